//! Monte Carlo estimate of outgoing radiance at shaded points, built inside
//! the graph so gradients reach materials, normals (and through them the
//! density grid), the specular network and the environment map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::brdf::{ALPHA_MIN, DENOM_MIN};
use super::sampling::{cosine_local, frame_up};
use crate::diffmath::rng::{stream, Purpose};
use crate::diffmath::{Graph, Mat, Real, Var};
use crate::fields::{mlp_forward, MaterialVars, ModelVars, SceneModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShadingConfig {
    pub diffuse_samples: usize,
    pub specular_samples: usize,
    /// 1 = environment lookup at sampled directions; larger values march
    /// secondary rays through the volume first.
    pub bounce_depth: usize,
}

impl Default for ShadingConfig {
    fn default() -> Self {
        ShadingConfig { diffuse_samples: 16, specular_samples: 8, bounce_depth: 1 }
    }
}

/// Per-point inputs to `shade`.
pub struct ShadePoints<'a> {
    /// Unit normals `[n, 3]`.
    pub normal: Var,
    /// Unit outgoing (towards the viewer) directions, `[n, 3]` values.
    pub wo: &'a [[f64; 3]],
    pub material: MaterialVars,
    /// Random-stream key per point.
    pub keys: &'a [u64],
    pub seed: u64,
}

/// Incoming radiance along `dirs: [m, 3]`; `owner[j]` is the shaded point
/// row `j` was sampled from.
pub type IncomingFn<'a, T> = dyn FnMut(&mut Graph<T>, Var, &[usize]) -> Var + 'a;

/// Environment radiance `softplus(stored)` as `[H*W, 3]`.
pub fn env_radiance<T: Real>(g: &mut Graph<T>, vars: &ModelVars) -> Var {
    g.softplus(vars.env)
}

fn const_col<T: Real>(g: &mut Graph<T>, v: impl Iterator<Item = f64>) -> Var {
    let data: Vec<T> = v.map(T::lit).collect();
    let n = data.len();
    g.constant(Mat::new(n, 1, data))
}

/// `F0 + (1 - F0)(1 - clamp(c, 0, 1))^5`; `f0: [m, 3]`, `c: [m, 1]`.
pub fn fresnel_var<T: Real>(g: &mut Graph<T>, f0: Var, c: Var) -> Var {
    let c = g.clamp(c, T::zero(), T::one());
    let t = g.rsub(T::one(), c);
    let p = g.powf(t, T::lit(5.0));
    let q = g.mul(f0, p);
    let s = g.sub(p, q);
    g.add(f0, s)
}

/// Smith G1 for `nv: [m, 1]`, `a2 = alpha^2: [m, 1]`.
pub fn smith_g1_var<T: Real>(g: &mut Graph<T>, nv: Var, a2: Var) -> Var {
    let nv = g.clamp(nv, T::lit(DENOM_MIN), T::one());
    let nv2 = g.square(nv);
    let one_m = g.rsub(T::one(), a2);
    let t = g.mul(one_m, nv2);
    let r = g.add(a2, t);
    let r = g.sqrt(r);
    let den = g.add(nv, r);
    let num = g.scale(nv, T::lit(2.0));
    g.div(num, den)
}

fn normalize_eps<T: Real>(g: &mut Graph<T>, a: Var) -> Var {
    let sq = g.dot3(a, a);
    let sq = g.offset(sq, T::lit(1e-12));
    let n = g.sqrt(sq);
    g.div(a, n)
}

/// Combine local coordinates `(x, y, z)` (columns `[m, 1]`) with a frame.
fn local_to_world<T: Real>(g: &mut Graph<T>, t: Var, b: Var, n: Var, x: Var, y: Var, z: Var) -> Var {
    let a = g.mul(t, x);
    let bb = g.mul(b, y);
    let c = g.mul(n, z);
    let s = g.add(a, bb);
    g.add(s, c)
}

/// Outgoing radiance `[n, 3]` at the shaded points.
pub fn shade<T: Real>(
    g: &mut Graph<T>,
    model: &SceneModel,
    vars: &ModelVars,
    cfg: &ShadingConfig,
    pts: &ShadePoints<'_>,
    incoming: &mut IncomingFn<'_, T>,
) -> Var {
    let n = pts.wo.len();
    let kd = cfg.diffuse_samples;
    let ks = cfg.specular_samples;

    // per-point uniforms from counter-keyed streams
    let mut ud = Vec::with_capacity(n * kd);
    let mut us = Vec::with_capacity(n * ks);
    for &key in pts.keys {
        let mut rng = stream(pts.seed, Purpose::Shading, key);
        for _ in 0..kd {
            ud.push((rng.gen::<f64>(), rng.gen::<f64>()));
        }
        for _ in 0..ks {
            us.push((rng.gen::<f64>(), rng.gen::<f64>()));
        }
    }

    let nvals: Vec<[f64; 3]> = {
        let m = g.value(pts.normal);
        (0..n).map(|i| [m.at(i, 0).as_f64(), m.at(i, 1).as_f64(), m.at(i, 2).as_f64()]).collect()
    };
    let front: Vec<bool> = (0..n).map(|i| super::brdf::dot(nvals[i], pts.wo[i]) > 0.0).collect();

    // tangent frame, differentiable in n
    let up = g.constant(Mat::new(n, 3, nvals.iter().flat_map(|&v| frame_up(v)).map(T::lit).collect()));
    let t = g.cross3(up, pts.normal);
    let t = g.normalize3(t);
    let b = g.cross3(pts.normal, t);
    let wo = g.constant(Mat::new(n, 3, pts.wo.iter().flatten().map(|&v| T::lit(v)).collect()));
    let no = g.dot3(pts.normal, wo);

    let mut total: Option<Var> = None;

    if kd > 0 {
        let local: Vec<[f64; 3]> = ud.iter().map(|&(a, c)| cosine_local(a, c)).collect();
        let lx = const_col(g, local.iter().map(|v| v[0]));
        let ly = const_col(g, local.iter().map(|v| v[1]));
        let lz = const_col(g, local.iter().map(|v| v[2]));
        let tr = g.repeat_rows(t, kd);
        let br = g.repeat_rows(b, kd);
        let nr = g.repeat_rows(pts.normal, kd);
        let dirs = local_to_world(g, tr, br, nr, lx, ly, lz);
        let owner: Vec<usize> = (0..n * kd).map(|j| j / kd).collect();
        let li = incoming(g, dirs, &owner);
        let wor = g.repeat_rows(wo, kd);
        let hs = g.add(wor, dirs);
        let h = normalize_eps(g, hs);
        let ho = g.dot3(h, wor);
        let f0r = g.repeat_rows(pts.material.f0, kd);
        let fr = fresnel_var(g, f0r, ho);
        let kd_term = g.rsub(T::one(), fr);
        let rho = g.repeat_rows(pts.material.albedo, kd);
        let e = g.mul(rho, kd_term);
        let e = g.mul(e, li);
        let s = g.segment_sum(e, owner, n);
        let s = g.scale(s, T::lit(1.0 / kd as f64));
        total = Some(s);
    }

    if ks > 0 {
        let m = n * ks;
        let owner: Vec<usize> = (0..m).map(|j| j / ks).collect();
        let u1 = const_col(g, us.iter().map(|p| p.0));
        let one_m_u1 = const_col(g, us.iter().map(|p| 1.0 - p.0));
        let phi: Vec<f64> = us.iter().map(|p| 2.0 * std::f64::consts::PI * p.1).collect();
        let cphi = const_col(g, phi.iter().map(|p| p.cos()));
        let sphi = const_col(g, phi.iter().map(|p| p.sin()));

        let rough = g.repeat_rows(pts.material.roughness, ks);
        let a = g.clamp(rough, T::lit(ALPHA_MIN), T::one());
        let a2 = g.square(a);
        let am1 = g.offset(a2, -T::one());
        let den = g.mul(am1, u1);
        let den = g.offset(den, T::one());
        let cos2 = g.div(one_m_u1, den);
        let cos = g.sqrt(cos2);
        let sin2 = g.rsub(T::one(), cos2);
        let sin2 = g.clamp(sin2, T::lit(1e-12), T::one());
        let sin = g.sqrt(sin2);
        let hx = g.mul(sin, cphi);
        let hy = g.mul(sin, sphi);

        let tr = g.repeat_rows(t, ks);
        let br = g.repeat_rows(b, ks);
        let nr = g.repeat_rows(pts.normal, ks);
        let h = local_to_world(g, tr, br, nr, hx, hy, cos);
        let wor = g.repeat_rows(wo, ks);
        let ho = g.dot3(h, wor);
        let two_ho = g.scale(ho, T::lit(2.0));
        let proj = g.mul(h, two_ho);
        let wi = g.sub(proj, wor);
        let ni = g.dot3(nr, wi);
        let nh = g.dot3(nr, h);
        let nor = g.repeat_rows(no, ks);

        let valid: Vec<bool> = {
            let (vi, vh) = (g.value(ni), g.value(ho));
            (0..m).map(|j| front[j / ks] && vi.at(j, 0) > T::zero() && vh.at(j, 0) > T::zero()).collect()
        };
        let mask = const_col(g, valid.iter().map(|&v| if v { 1.0 } else { 0.0 }));

        let li = incoming(g, wi, &owner);
        let f0r = g.repeat_rows(pts.material.f0, ks);
        let fr = fresnel_var(g, f0r, ho);
        let g1 = smith_g1_var(g, nor, a2);

        // implicit term g in (0, 2) from direction cosines
        let cosines = g.concat_cols(&[ni, nor, nh]);
        let enc = model.config.specular_encoding.encode(g, cosines);
        let logit = mlp_forward(g, &vars.specular, enc);
        let gv = g.sigmoid(logit);
        let gv = g.scale(gv, T::lit(2.0));

        let hoc = g.clamp(ho, T::zero(), T::one());
        // f_s (n.w_i) / pdf = G1 g (h.w_o) / ((n.w_o)(n.h)); D cancels
        let den = g.mul(nor, nh);
        let den = g.clamp(den, T::lit(DENOM_MIN), T::one());
        let ratio = g.div(hoc, den);
        let w = g.mul(g1, gv);
        let w = g.mul(w, ratio);
        let w = g.mul(w, mask);
        let e = g.mul(fr, w);
        let e = g.mul(e, li);
        let s = g.segment_sum(e, owner, n);
        let s = g.scale(s, T::lit(1.0 / ks as f64));
        total = Some(match total {
            Some(d) => g.add(d, s),
            None => s,
        });
    }

    let out = match total {
        Some(v) => v,
        None => g.constant(Mat::zeros(n, 3)),
    };
    if front.iter().all(|&f| f) {
        out
    } else {
        let fm = const_col(g, front.iter().map(|&f| if f { 1.0 } else { 0.0 }));
        g.mul(out, fm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{GroupName, Mat};
    use crate::fields::{Aabb, ModelConfig, SceneModel};
    use crate::shading::EnvironmentMap;

    fn config() -> ModelConfig {
        ModelConfig {
            bbox: Aabb::cube(1.0),
            density_resolution: [5; 3],
            density_rank: 1,
            appearance_resolution: [4; 3],
            appearance_rank: 1,
            head_hidden: vec![8],
            specular_hidden: vec![8],
            env_height: 16,
            env_width: 32,
            ..ModelConfig::desk()
        }
    }

    /// Outgoing radiance for fixed materials under an environment map.
    fn shade_fixed(
        model: &SceneModel,
        cfg: &ShadingConfig,
        normal: [f64; 3],
        wo: [f64; 3],
        albedo: [f64; 3],
        rough: f64,
        f0: [f64; 3],
        points: usize,
    ) -> Vec<[f64; 3]> {
        let mut g = Graph::<f64>::new();
        let vars = model.bind(&mut g);
        let rep = |g: &mut Graph<f64>, v: &[f64]| {
            let data: Vec<f64> = (0..points).flat_map(|_| v.to_vec()).collect();
            g.constant(Mat::new(points, v.len(), data))
        };
        let nv = rep(&mut g, &normal);
        let material =
            MaterialVars { albedo: rep(&mut g, &albedo), roughness: rep(&mut g, &[rough]), f0: rep(&mut g, &f0) };
        let wos = vec![wo; points];
        let keys: Vec<u64> = (0..points as u64).collect();
        let env = env_radiance(&mut g, &vars);
        let (h, w) = (model.config.env_height, model.config.env_width);
        let mut inc = |g: &mut Graph<f64>, d: Var, _: &[usize]| g.env_lookup(env, d, h, w);
        let pts = ShadePoints { normal: nv, wo: &wos, material, keys: &keys, seed: 3 };
        let out = shade(&mut g, model, &vars, cfg, &pts, &mut inc);
        let m = g.value(out);
        (0..points).map(|i| [m.at(i, 0), m.at(i, 1), m.at(i, 2)]).collect()
    }

    fn with_env(env: &EnvironmentMap) -> SceneModel {
        let mut m = SceneModel::zeroed(config());
        m.group_mut(GroupName::Envmap).tensors[0] = env.to_stored();
        m
    }

    #[test]
    fn lambertian_white_furnace() {
        let env = EnvironmentMap::constant(16, 32, [2.0, 1.0, 0.5]);
        let model = with_env(&env);
        let cfg = ShadingConfig { diffuse_samples: 16, specular_samples: 0, bounce_depth: 1 };
        let n = [0.0, 0.6, 0.8];
        let out = shade_fixed(&model, &cfg, n, n, [0.3, 0.5, 0.7], 0.5, [0.0; 3], 4);
        for px in out {
            for c in 0..3 {
                // Schlick with F0 = 0 leaves at most (1 - cos 45deg)^5 ~ 0.002 at w_o = n
                let want = [0.3, 0.5, 0.7][c] * [2.0, 1.0, 0.5][c];
                assert!(px[c] <= want * (1.0 + 1e-5) && px[c] >= want * 0.997, "{px:?}");
            }
        }
    }

    #[test]
    fn back_facing_points_are_black() {
        let env = EnvironmentMap::constant(16, 32, [1.0; 3]);
        let model = with_env(&env);
        let out = shade_fixed(&model, &ShadingConfig::default(), [0.0, 0.0, 1.0], [0.0, 0.6, -0.8], [0.5; 3], 0.3, [0.5; 3], 3);
        assert!(out.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn smooth_mirror_reflects_environment() {
        // smooth, F0 = 1, g = 1 (zero specular MLP gives sigmoid(0) * 2 = 1)
        let env = EnvironmentMap::from_fn(16, 32, |d| [(1.0 + d[0]) as f32, (1.0 + d[1]) as f32, (1.5 + d[2]) as f32]);
        let model = with_env(&env);
        let cfg = ShadingConfig { diffuse_samples: 0, specular_samples: 4, bounce_depth: 1 };
        let n = super::super::brdf::normalize([0.1, 0.9, 0.3]);
        let wo = super::super::brdf::normalize([0.4, 0.8, 0.5]);
        let out = shade_fixed(&model, &cfg, n, wo, [0.0; 3], 1e-4, [1.0; 3], 2);
        let want = env.lookup(super::super::brdf::reflect(wo, n));
        for px in out {
            for c in 0..3 {
                assert!((px[c] - want[c]).abs() < 2e-2 * want[c], "{px:?} vs {want:?}");
            }
        }
    }
}
