use rand::Rng;
use serde::{Deserialize, Serialize};

use super::camera::RayBatch;
use crate::diffmath::rng::{combine, stream, Purpose};
use crate::diffmath::{Graph, Mat, Real, Var};
use crate::fields::{ModelVars, SceneModel};
use crate::shading::{shade, ShadePoints, ShadingConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    /// Samples with a compositing weight below this are not shaded.
    pub weight_threshold: f64,
    /// At most this many (highest-weight) samples per ray are shaded.
    pub max_shaded_per_ray: usize,
    pub shading: ShadingConfig,
    /// Start offset of secondary rays, world units.
    pub bounce_offset: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 128,
            weight_threshold: 1e-4,
            max_shaded_per_ray: 32,
            shading: ShadingConfig::default(),
            bounce_offset: 0.05,
        }
    }
}

impl RenderConfig {
    /// Shade every sample (no pruning); used by gradient checks.
    pub fn exhaustive(samples_per_ray: usize) -> Self {
        RenderConfig {
            samples_per_ray,
            weight_threshold: 0.0,
            max_shaded_per_ray: samples_per_ray,
            ..Self::default()
        }
    }
}

/// Graph outputs for one batch of rays.
#[derive(Clone, Debug)]
pub struct RayRender {
    /// Linear radiance `[R, 3]` (unclamped).
    pub rgb: Var,
    /// `[R, 1]`
    pub opacity: Var,
    /// Weighted sums over shaded samples, `[R, 3]` / `[R, 1]`.
    pub normal: Var,
    pub albedo: Var,
    pub roughness: Var,
    pub f0: Var,
    /// Per shaded sample: compositing weight `[M, 1]`, normal `[M, 3]`, the
    /// ray it belongs to and whether its normal was degenerate.
    pub shaded_weight: Option<Var>,
    pub shaded_normal: Option<Var>,
    pub shaded_ray: Vec<usize>,
    pub shaded_degenerate: Vec<bool>,
    /// Full weight matrix `[hit rays, N]` and the ray index of each row.
    pub weights: Option<Var>,
    pub hit_rays: Vec<usize>,
    /// Final transmittance per ray (1 for rays missing the box).
    pub transmittance: Vec<f64>,
    pub sample_counts: Vec<u32>,
}

fn const_mat<T: Real>(g: &mut Graph<T>, rows: usize, cols: usize, v: impl IntoIterator<Item = f64>) -> Var {
    g.constant(Mat::new(rows, cols, v.into_iter().map(T::lit).collect()))
}

/// Volume-render a ray batch inside `g`.
///
/// `keys` give one random-stream key per ray; all stochastic choices
/// (stratified jitter, shading samples) derive from `(seed, key)` so the
/// result does not depend on how rays are grouped into batches.
pub fn render_rays<T: Real>(
    g: &mut Graph<T>,
    model: &SceneModel,
    vars: &ModelVars,
    env_rad: Var,
    rays: &RayBatch,
    keys: &[u64],
    cfg: &RenderConfig,
    seed: u64,
) -> RayRender {
    render_depth(g, model, vars, env_rad, rays, keys, cfg, seed, cfg.shading.bounce_depth.max(1), 0.0)
}

#[allow(clippy::too_many_arguments)]
fn render_depth<T: Real>(
    g: &mut Graph<T>,
    model: &SceneModel,
    vars: &ModelVars,
    env_rad: Var,
    rays: &RayBatch,
    keys: &[u64],
    cfg: &RenderConfig,
    seed: u64,
    depth: usize,
    t_min: f64,
) -> RayRender {
    let r = rays.len();
    let n = cfg.samples_per_ray;
    let bbox = model.config.bbox;

    // stratified samples inside the box
    let mut hit_rays = Vec::new();
    let mut points = Vec::new();
    let mut deltas = Vec::new();
    for i in 0..r {
        let Some((near, far)) = bbox.intersect(rays.origins[i], rays.dirs[i]) else { continue };
        let near = near.max(t_min);
        if far <= near || n == 0 {
            continue;
        }
        hit_rays.push(i);
        let delta = (far - near) / n as f64;
        let mut rng = stream(seed, Purpose::RaySamples, keys[i]);
        let (o, d) = (rays.origins[i], rays.dirs[i]);
        for j in 0..n {
            let t = near + (j as f64 + rng.gen::<f64>()) * delta;
            points.push([o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]);
        }
        deltas.push(delta);
    }
    let h = hit_rays.len();

    let mut transmittance = vec![1.0; r];
    let mut sample_counts = vec![0u32; r];
    let mut shaded_ray = Vec::new();
    let zeros3 = g.constant(Mat::zeros(r, 3));
    let zeros1 = g.constant(Mat::zeros(r, 1));
    let mut out = RayRender {
        rgb: zeros3,
        opacity: zeros1,
        normal: zeros3,
        albedo: zeros3,
        roughness: zeros1,
        f0: zeros3,
        shaded_weight: None,
        shaded_normal: None,
        shaded_ray: Vec::new(),
        shaded_degenerate: Vec::new(),
        weights: None,
        hit_rays: hit_rays.clone(),
        transmittance: Vec::new(),
        sample_counts: Vec::new(),
    };

    let dirs_all = const_mat(g, r, 3, rays.dirs.iter().flatten().copied());
    let bg = g.env_lookup(env_rad, dirs_all, model.config.env_height, model.config.env_width);

    if h == 0 {
        out.rgb = bg;
        out.transmittance = transmittance;
        out.sample_counts = sample_counts;
        return out;
    }

    // densities and compositing weights
    let plans = model.density_plans::<T>(&points, false);
    let raw = model.raw_density(g, vars, &plans);
    let sigma = model.density_from_raw(g, raw);
    let sigma = g.reshape(sigma, h, n);
    let dcol = const_mat(g, h, 1, deltas.iter().copied());
    let tau = g.mul(sigma, dcol);
    let acc = g.cumsum_exclusive(tau);
    let neg = g.neg(acc);
    let trans = g.exp(neg);
    let ntau = g.neg(tau);
    let keep = g.exp(ntau);
    let alpha = g.rsub(T::one(), keep);
    let w = g.mul(trans, alpha);
    let op_hit = g.sum_cols(w);
    out.weights = Some(w);

    {
        let tv = g.value(tau);
        for (row, &ray) in hit_rays.iter().enumerate() {
            let s: f64 = tv.row(row).iter().map(|v| v.as_f64()).sum();
            transmittance[ray] = (-s).exp();
        }
    }

    // shaded subset: above threshold, top-k by weight, in ray order
    let mut sel = Vec::new();
    {
        let wv = g.value(w);
        for (row, &ray) in hit_rays.iter().enumerate() {
            let mut cand: Vec<usize> = (0..n).filter(|&j| wv.at(row, j).as_f64() >= cfg.weight_threshold).collect();
            if cand.len() > cfg.max_shaded_per_ray {
                cand.sort_by(|&a, &b| wv.at(row, b).as_f64().total_cmp(&wv.at(row, a).as_f64()).then(a.cmp(&b)));
                cand.truncate(cfg.max_shaded_per_ray);
                cand.sort_unstable();
            }
            sample_counts[ray] = cand.len() as u32;
            for j in cand {
                sel.push(row * n + j);
                shaded_ray.push(ray);
            }
        }
    }

    let hit_seg = hit_rays.clone();
    let opacity = g.segment_sum(op_hit, hit_seg, r);
    out.opacity = opacity;

    let one_m = g.rsub(T::one(), opacity);
    let background = g.mul(one_m, bg);

    if sel.is_empty() {
        out.rgb = background;
        out.transmittance = transmittance;
        out.sample_counts = sample_counts;
        return out;
    }

    let m = sel.len();
    let sel_points: Vec<[f64; 3]> = sel.iter().map(|&s| points[s]).collect();
    let wo: Vec<[f64; 3]> = shaded_ray.iter().map(|&ray| rays.dirs[ray].map(|v| -v)).collect();
    let sel_keys: Vec<u64> = sel.iter().zip(&shaded_ray).map(|(&s, &ray)| combine(keys[ray], (s % n) as u64)).collect();

    let wflat = g.reshape(w, h * n, 1);
    let wsel = g.gather_rows(wflat, sel.clone());

    let gplans = model.density_plans::<T>(&sel_points, true);
    let fallback = Mat::new(m, 3, wo.iter().flatten().map(|&v| T::lit(v)).collect());
    let nv = model.normals(g, vars, &gplans, &fallback);
    let shaded_degenerate = nv.degenerate.clone();
    let material = model.material(g, vars, &sel_points);

    let sub_cfg = *cfg;
    let mut incoming = |g: &mut Graph<T>, dirs: Var, owner: &[usize]| -> Var {
        if depth <= 1 {
            return g.env_lookup(env_rad, dirs, model.config.env_height, model.config.env_width);
        }
        let dv = g.value(dirs).clone();
        let mut sub = RayBatch::default();
        let mut sub_keys = Vec::with_capacity(owner.len());
        for (j, &o) in owner.iter().enumerate() {
            let d = [dv.at(j, 0).as_f64(), dv.at(j, 1).as_f64(), dv.at(j, 2).as_f64()];
            let l = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            sub.push(sel_points[o], d.map(|v| v / l), j);
            sub_keys.push(combine(sel_keys[o], 0x5ec0_0000 + j as u64));
        }
        let rr = render_depth(g, model, vars, env_rad, &sub, &sub_keys, &sub_cfg, seed, depth - 1, sub_cfg.bounce_offset);
        rr.rgb
    };
    let pts = ShadePoints { normal: nv.normal, wo: &wo, material, keys: &sel_keys, seed };
    let radiance = shade(g, model, vars, &cfg.shading, &pts, &mut incoming);

    let contrib = g.mul(wsel, radiance);
    let fg = g.segment_sum(contrib, shaded_ray.clone(), r);
    out.rgb = g.add(fg, background);

    let defined = const_mat(g, m, 1, nv.degenerate.iter().map(|&d| if d { 0.0 } else { 1.0 }));
    let wn = g.mul(wsel, defined);
    let nsum = g.mul(wn, nv.normal);
    out.normal = g.segment_sum(nsum, shaded_ray.clone(), r);
    let a = g.mul(wsel, material.albedo);
    out.albedo = g.segment_sum(a, shaded_ray.clone(), r);
    let ro = g.mul(wsel, material.roughness);
    out.roughness = g.segment_sum(ro, shaded_ray.clone(), r);
    let f = g.mul(wsel, material.f0);
    out.f0 = g.segment_sum(f, shaded_ray.clone(), r);

    out.shaded_weight = Some(wsel);
    out.shaded_normal = Some(nv.normal);
    out.shaded_ray = shaded_ray;
    out.shaded_degenerate = shaded_degenerate;
    out.transmittance = transmittance;
    out.sample_counts = sample_counts;
    out
}
