use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoding::PositionalEncoding;
use super::mlp::{mlp_forward, MlpShape};
use super::vm::{grid_plans, vm_features, vm_spatial_gradient, Aabb, GridPlans, VmLayout, VmVars};
use crate::diffmath::rng::{stream, Purpose};
use crate::diffmath::{GroupName, Graph, Mat, ParamGroup, ParamKey, Real, Tensor, Var};
use crate::error::{Error, Result};

/// The three decoded material properties, in group order.
pub const MATERIALS: [GroupName; 3] = [GroupName::Albedo, GroupName::Roughness, GroupName::F0];

pub fn material_channels(name: GroupName) -> usize {
    match name {
        GroupName::Roughness => 1,
        _ => 3,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub bbox: Aabb,
    pub density_resolution: [usize; 3],
    pub density_rank: usize,
    pub appearance_resolution: [usize; 3],
    pub appearance_rank: usize,
    pub appearance_channels: usize,
    pub position_encoding: PositionalEncoding,
    pub head_hidden: Vec<usize>,
    pub specular_encoding: PositionalEncoding,
    pub specular_hidden: Vec<usize>,
    pub env_height: usize,
    pub env_width: usize,
    pub density_shift: f32,
    /// Raw density value the grid is initialized around.
    pub density_init: f32,
    pub normal_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            bbox: Aabb::cube(1.5),
            density_resolution: [48; 3],
            density_rank: 8,
            appearance_resolution: [32; 3],
            appearance_rank: 4,
            appearance_channels: 8,
            position_encoding: PositionalEncoding::default(),
            head_hidden: vec![64, 64],
            specular_encoding: PositionalEncoding { num_frequencies: 3, include_input: true },
            specular_hidden: vec![32, 32],
            env_height: 64,
            env_width: 128,
            density_shift: -10.0,
            density_init: 6.0,
            normal_eps: 1e-8,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            density_resolution: [128; 3],
            appearance_resolution: [96; 3],
            env_height: 256,
            env_width: 512,
            ..Self::desk()
        }
    }

    pub fn density_layout(&self) -> VmLayout {
        VmLayout { resolution: self.density_resolution, rank: self.density_rank, channels: 1, bbox: self.bbox }
    }

    pub fn appearance_layout(&self) -> VmLayout {
        VmLayout {
            resolution: self.appearance_resolution,
            rank: self.appearance_rank,
            channels: self.appearance_channels,
            bbox: self.bbox,
        }
    }

    pub fn head_shape(&self, name: GroupName) -> MlpShape {
        let input = self.appearance_channels + self.position_encoding.width(3);
        MlpShape::new(input, &self.head_hidden, material_channels(name))
    }

    pub fn specular_shape(&self) -> MlpShape {
        MlpShape::new(self.specular_encoding.width(3), &self.specular_hidden, 1)
    }

    /// Expected tensor shapes per group, in registry order.
    pub fn group_shapes(&self, name: GroupName) -> Vec<Vec<usize>> {
        let shapes = |ts: Vec<Tensor>| ts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        match name {
            GroupName::Density => shapes(self.density_layout().zero_tensors()),
            GroupName::Albedo | GroupName::Roughness | GroupName::F0 => {
                let mut s = shapes(self.appearance_layout().zero_tensors());
                s.extend(shapes(self.head_shape(name).zeros()));
                s
            }
            GroupName::Envmap => vec![vec![self.env_height, self.env_width, 3]],
            GroupName::SpecularMlp => shapes(self.specular_shape().zeros()),
        }
    }
}

/// Post-sigmoid multipliers on the material heads (perturbation hooks).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaterialHooks {
    pub albedo: Option<f32>,
    pub roughness: Option<f32>,
    pub f0: Option<f32>,
}

impl MaterialHooks {
    pub fn get(&self, name: GroupName) -> Option<f32> {
        match name {
            GroupName::Albedo => self.albedo,
            GroupName::Roughness => self.roughness,
            GroupName::F0 => self.f0,
            _ => None,
        }
    }

    pub fn slot(&mut self, name: GroupName) -> Option<&mut Option<f32>> {
        match name {
            GroupName::Albedo => Some(&mut self.albedo),
            GroupName::Roughness => Some(&mut self.roughness),
            GroupName::F0 => Some(&mut self.f0),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub config: ModelConfig,
    groups: Vec<ParamGroup>,
    pub hooks: MaterialHooks,
}

/// Graph leaves of one material branch.
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub grid: VmVars,
    pub mlp: Vec<Var>,
}

/// All model parameters bound into one graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub density: VmVars,
    pub heads: [HeadVars; 3],
    /// Pre-softplus environment texels as `[H*W, 3]`.
    pub env: Var,
    pub specular: Vec<Var>,
}

/// Decoded material values, one row per point.
#[derive(Clone, Copy, Debug)]
pub struct MaterialVars {
    pub albedo: Var,
    pub roughness: Var,
    pub f0: Var,
}

/// Normals for a point set plus the rows whose density gradient vanished.
#[derive(Clone, Debug)]
pub struct NormalVars {
    pub normal: Var,
    pub raw: Var,
    pub degenerate: Vec<bool>,
}

impl SceneModel {
    /// Model with every tensor zero (density at the bare shift, materials 0.5).
    pub fn zeroed(config: ModelConfig) -> Self {
        let groups = GroupName::ALL
            .iter()
            .map(|&name| {
                let ts = config.group_shapes(name).into_iter().map(Tensor::zeros).collect();
                ParamGroup::new(name, ts)
            })
            .collect();
        SceneModel { config, groups, hooks: MaterialHooks::default() }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut model = Self::zeroed(config);
        let cfg = model.config.clone();
        for name in GroupName::ALL {
            let mut rng = stream(seed, Purpose::Init, name.index() as u64);
            let ts = match name {
                GroupName::Density => {
                    // raw = sum over 3*rank products of plane * line, all near c / (3 rank) * 1
                    let layout = cfg.density_layout();
                    let per = cfg.density_init / (3 * layout.rank) as f32;
                    let mut ts = layout.zero_tensors();
                    for (i, t) in ts.iter_mut().enumerate() {
                        let centre = if i < 3 { per } else { 1.0 };
                        let jitter = 0.1 * centre;
                        for v in t.data_mut() {
                            *v = centre + rng.gen_range(-jitter..jitter);
                        }
                    }
                    ts
                }
                GroupName::Albedo | GroupName::Roughness | GroupName::F0 => {
                    let layout = cfg.appearance_layout();
                    let mut ts: Vec<Tensor> = layout
                        .zero_tensors()
                        .into_iter()
                        .map(|t| Tensor::from_fn(t.shape().to_vec(), |_| rng.gen_range(-0.1f32..0.1)))
                        .collect();
                    // F0 starts near the common dielectric value 0.04
                    let bias = if name == GroupName::F0 { (0.04f32 / 0.96).ln() } else { 0.0 };
                    ts.extend(cfg.head_shape(name).init(&mut rng, &[bias]));
                    ts
                }
                GroupName::Envmap => {
                    // softplus(-0.4328) = 0.5, mid-grey
                    vec![Tensor::from_fn(vec![cfg.env_height, cfg.env_width, 3], |_| -0.4328 + rng.gen_range(-0.01f32..0.01))]
                }
                GroupName::SpecularMlp => cfg.specular_shape().init(&mut rng, &[0.0]),
            };
            model.groups[name.index()].tensors = ts;
        }
        model
    }

    /// Assemble a model from loaded groups, validating shapes.
    pub fn from_groups(config: ModelConfig, groups: Vec<ParamGroup>) -> Result<Self> {
        let mut model = Self::zeroed(config);
        for g in groups {
            let want = model.config.group_shapes(g.name);
            let got: Vec<Vec<usize>> = g.tensors.iter().map(|t| t.shape().to_vec()).collect();
            if want != got {
                return Err(Error::ShapeMismatch(format!("group {}: expected {want:?}, found {got:?}", g.name)));
            }
            let i = g.name.index();
            model.groups[i] = g;
        }
        Ok(model)
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn group(&self, name: GroupName) -> &ParamGroup {
        &self.groups[name.index()]
    }

    pub fn group_mut(&mut self, name: GroupName) -> &mut ParamGroup {
        &mut self.groups[name.index()]
    }

    /// Make exactly one group trainable, or all of them for `None`.
    pub fn set_trainable(&mut self, only: Option<GroupName>) {
        for g in &mut self.groups {
            g.trainable = only.map_or(true, |o| o == g.name);
        }
    }

    /// Every tensor with its key, in registry order.
    pub fn flat_params(&self) -> Vec<(ParamKey, Tensor)> {
        self.groups
            .iter()
            .flat_map(|g| {
                g.tensors.iter().enumerate().map(move |(index, t)| (ParamKey { group: g.name, index }, t.clone()))
            })
            .collect()
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> ModelVars {
        self.bind_with(g, false)
    }

    /// Bind every tensor as a constant (inference only).
    pub fn bind_frozen<T: Real>(&self, g: &mut Graph<T>) -> ModelVars {
        self.bind_with(g, true)
    }

    fn bind_with<T: Real>(&self, g: &mut Graph<T>, frozen: bool) -> ModelVars {
        let vars: Vec<Var> = self
            .groups
            .iter()
            .flat_map(|grp| {
                grp.tensors.iter().enumerate().map(|(index, t)| (ParamKey { group: grp.name, index }, t, grp.trainable))
            })
            .map(|(k, t, tr)| g.param(k, t, tr && !frozen))
            .collect();
        self.vars_from_flat(&vars)
    }

    /// Interpret a flat list of leaves in `flat_params` order.
    pub fn vars_from_flat(&self, vars: &[Var]) -> ModelVars {
        let mut at = 0;
        let mut take = |n: usize| {
            let s = vars[at..at + n].to_vec();
            at += n;
            s
        };
        let density = VmVars::from_slice(&take(6), false);
        let app = self.config.appearance_layout();
        let mut head = |name: GroupName| {
            let grid = VmVars::from_slice(&take(app.tensor_count()), app.has_basis());
            let mlp = take(self.config.head_shape(name).tensor_count());
            HeadVars { grid, mlp }
        };
        let heads = [head(GroupName::Albedo), head(GroupName::Roughness), head(GroupName::F0)];
        let env = take(1)[0];
        let specular = take(self.config.specular_shape().tensor_count());
        ModelVars { density, heads, env, specular }
    }

    pub fn density_plans<T: Real>(&self, points: &[[f64; 3]], with_grad: bool) -> GridPlans<T> {
        grid_plans(&self.config.density_layout(), points, with_grad)
    }

    /// Raw (pre-activation) density grid value, `[n, 1]`.
    pub fn raw_density<T: Real>(&self, g: &mut Graph<T>, vars: &ModelVars, plans: &GridPlans<T>) -> Var {
        vm_features(g, &vars.density, plans)
    }

    /// sigma = softplus(raw + shift), `[n, 1]`.
    pub fn density_from_raw<T: Real>(&self, g: &mut Graph<T>, raw: Var) -> Var {
        let shifted = g.offset(raw, T::lit(self.config.density_shift as f64));
        g.softplus(shifted)
    }

    /// Normals `-grad sigma / |grad sigma|` at the plan's points.
    ///
    /// Rows with `|grad sigma| <= normal_eps` are flagged and take the
    /// corresponding row of `fallback` (or its single row), with no gradient
    /// reaching the density grid.
    pub fn normals<T: Real>(&self, g: &mut Graph<T>, vars: &ModelVars, plans: &GridPlans<T>, fallback: &Mat<T>) -> NormalVars {
        let raw = self.raw_density(g, vars, plans);
        let grad = vm_spatial_gradient(g, &vars.density, plans);
        let shift = self.config.density_shift as f64;
        let eps = self.config.normal_eps;
        let degenerate: Vec<bool> = {
            let rv = g.value(raw);
            let gv = g.value(grad);
            (0..plans.n)
                .map(|i| {
                    let r = rv.at(i, 0).as_f64() + shift;
                    let slope = 1.0 / (1.0 + (-r).exp());
                    let row = gv.row(i);
                    let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
                    !(slope * norm > eps)
                })
                .collect()
        };
        let normal = if degenerate.iter().any(|&d| d) {
            let keep = Mat::new(plans.n, 1, degenerate.iter().map(|&d| if d { T::zero() } else { T::one() }).collect());
            let mut subst = Mat::zeros(plans.n, 3);
            for (i, &d) in degenerate.iter().enumerate() {
                if d {
                    let r = if fallback.rows == 1 { 0 } else { i };
                    for c in 0..3 {
                        // normal = -grad / |grad|
                        subst.data[i * 3 + c] = -fallback.at(r, c);
                    }
                }
            }
            let keep = g.constant(keep);
            let subst = g.constant(subst);
            let masked = g.mul(grad, keep);
            let safe = g.add(masked, subst);
            let n = g.normalize3(safe);
            g.neg(n)
        } else {
            let n = g.normalize3(grad);
            g.neg(n)
        };
        NormalVars { normal, raw, degenerate }
    }

    /// Decoded materials at `points` (constant positions), hooks applied.
    pub fn material<T: Real>(&self, g: &mut Graph<T>, vars: &ModelVars, points: &[[f64; 3]]) -> MaterialVars {
        let app = self.config.appearance_layout();
        let plans = grid_plans::<T>(&app, points, false);
        let bbox = self.config.bbox;
        let normed = Mat::new(
            points.len(),
            3,
            points
                .iter()
                .flat_map(|p| (0..3).map(move |i| T::lit(2.0 * (p[i] - bbox.min[i]) / bbox.extent(i) - 1.0)))
                .collect(),
        );
        let pe = g.constant(self.config.position_encoding.encode_const(&normed));
        let mut out = [None; 3];
        for (k, name) in MATERIALS.into_iter().enumerate() {
            let head = &vars.heads[k];
            let feat = vm_features(g, &head.grid, &plans);
            let input = g.concat_cols(&[feat, pe]);
            let logits = mlp_forward(g, &head.mlp, input);
            let mut v = g.sigmoid(logits);
            if let Some(m) = self.hooks.get(name) {
                v = apply_multiplier_var(g, v, m);
            }
            out[k] = Some(v);
        }
        MaterialVars { albedo: out[0].unwrap(), roughness: out[1].unwrap(), f0: out[2].unwrap() }
    }

    // ---- plain evaluation helpers (no gradient) ----

    pub fn density_at(&self, x: [f64; 3]) -> f64 {
        let mut g = Graph::<f64>::new();
        let vars = self.bind(&mut g);
        let plans = self.density_plans(&[x], false);
        let raw = self.raw_density(&mut g, &vars, &plans);
        let s = self.density_from_raw(&mut g, raw);
        g.scalar_value(s)
    }

    /// `None` when the density gradient is degenerate at `x`.
    pub fn normal_at(&self, x: [f64; 3]) -> Option<[f64; 3]> {
        let mut g = Graph::<f64>::new();
        let vars = self.bind(&mut g);
        let plans = self.density_plans(&[x], true);
        let nv = self.normals(&mut g, &vars, &plans, &Mat::new(1, 3, vec![0.0, 0.0, 1.0]));
        if nv.degenerate[0] {
            return None;
        }
        let n = g.value(nv.normal);
        Some([n.at(0, 0), n.at(0, 1), n.at(0, 2)])
    }

    /// `(albedo, roughness, f0)` per point.
    pub fn material_at(&self, points: &[[f64; 3]]) -> Vec<([f64; 3], f64, [f64; 3])> {
        let mut g = Graph::<f64>::new();
        let vars = self.bind(&mut g);
        let m = self.material(&mut g, &vars, points);
        let (a, r, f) = (g.value(m.albedo), g.value(m.roughness), g.value(m.f0));
        (0..points.len())
            .map(|i| ([a.at(i, 0), a.at(i, 1), a.at(i, 2)], r.at(i, 0), [f.at(i, 0), f.at(i, 1), f.at(i, 2)]))
            .collect()
    }

    /// Environment radiance `softplus(stored)` as `[H, W, 3]`.
    pub fn env_radiance(&self) -> Tensor {
        let t = &self.group(GroupName::Envmap).tensors[0];
        let data = t.data().iter().map(|&x| crate::shading::softplus_f32(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }
}

/// `min(max(m * v, 0), 1)` inside the graph; gradient only where unclipped.
pub fn apply_multiplier_var<T: Real>(g: &mut Graph<T>, v: Var, m: f32) -> Var {
    let s = g.scale(v, T::from_f32v(m));
    g.clamp(s, T::zero(), T::one())
}
