//! Property manipulations: post-sigmoid material multipliers, Gaussian noise
//! on the density coefficients, and Gaussian blur of the environment map.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffmath::rng::{stream, Purpose};
use crate::diffmath::{GroupName, ParamGroup, Tensor};
use crate::error::{Error, Result};
use crate::fields::{SceneModel, MATERIALS};
use crate::shading::EnvironmentMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Under,
    Over,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Under => "under",
            Direction::Over => "over",
            Direction::NotApplicable => "n/a",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "under" => Ok(Direction::Under),
            "over" => Ok(Direction::Over),
            "n/a" | "" => Ok(Direction::NotApplicable),
            _ => Err(Error::InvalidPerturbation(format!("unknown direction `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    Multiplier { m: f32 },
    GaussianNoise { sigma_d: f32, seed: u64 },
    GaussianBlur { size: usize, sigma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub target: GroupName,
    #[serde(flatten)]
    pub perturbation: Perturbation,
    pub direction: Direction,
}

impl PerturbationSpec {
    pub fn multiplier(target: GroupName, m: f32, direction: Direction) -> Self {
        PerturbationSpec { target, perturbation: Perturbation::Multiplier { m }, direction }
    }

    pub fn density_noise(sigma_d: f32, seed: u64) -> Self {
        PerturbationSpec {
            target: GroupName::Density,
            perturbation: Perturbation::GaussianNoise { sigma_d, seed },
            direction: Direction::NotApplicable,
        }
    }

    pub fn envmap_blur(size: usize, sigma: f64) -> Self {
        PerturbationSpec {
            target: GroupName::Envmap,
            perturbation: Perturbation::GaussianBlur { size, sigma },
            direction: Direction::NotApplicable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPerturbation(msg));
        match self.perturbation {
            Perturbation::Multiplier { m } => {
                if !MATERIALS.contains(&self.target) {
                    return bad(format!("multiplier applies to albedo, roughness or f0, not {}", self.target));
                }
                if !(m >= 0.0 && m.is_finite()) {
                    return bad(format!("multiplier must be finite and >= 0, got {m}"));
                }
            }
            Perturbation::GaussianNoise { sigma_d, .. } => {
                if self.target != GroupName::Density {
                    return bad(format!("gaussian noise applies to density, not {}", self.target));
                }
                if !(sigma_d >= 0.0 && sigma_d.is_finite()) {
                    return bad(format!("sigma_d must be finite and >= 0, got {sigma_d}"));
                }
            }
            Perturbation::GaussianBlur { size, sigma } => {
                if self.target != GroupName::Envmap {
                    return bad(format!("blur applies to envmap, not {}", self.target));
                }
                if size == 0 || size % 2 == 0 {
                    return bad(format!("blur kernel size must be odd and >= 1, got {size}"));
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return bad(format!("blur sigma must be > 0, got {sigma}"));
                }
            }
        }
        Ok(())
    }

    /// Row label used in reports, e.g. `albedo_under`, `density`.
    pub fn label(&self) -> String {
        match self.direction {
            Direction::NotApplicable => self.target.to_string(),
            d => format!("{}_{}", self.target, d.as_str()),
        }
    }

    /// Short parameter description, e.g. `m=0.5`, `N(0,1.5)`, `G(301,300)`.
    pub fn describe(&self) -> String {
        match self.perturbation {
            Perturbation::Multiplier { m } => format!("m={m}"),
            Perturbation::GaussianNoise { sigma_d, .. } => format!("N(0,{sigma_d})"),
            Perturbation::GaussianBlur { size, sigma } => format!("G({size},{sigma})"),
        }
    }

    /// The eight manipulations of the study with the ball-scene parameters.
    pub fn default_rows(seed: u64) -> Vec<PerturbationSpec> {
        use Direction::*;
        vec![
            Self::multiplier(GroupName::Albedo, 0.0, Under),
            Self::multiplier(GroupName::Albedo, 1000.0, Over),
            Self::multiplier(GroupName::Roughness, 0.1, Under),
            Self::multiplier(GroupName::Roughness, 2.0, Over),
            Self::multiplier(GroupName::F0, 0.8, Under),
            Self::multiplier(GroupName::F0, 1.2, Over),
            Self::density_noise(1.05, seed),
            Self::envmap_blur(301, 300.0),
        ]
    }
}

/// `min(max(m * value, 0), 1)`.
pub fn apply_multiplier(value: f32, m: f32) -> f32 {
    (m * value).clamp(0.0, 1.0)
}

/// Adds i.i.d. `N(0, sigma_d^2)` draws to every coefficient of the density
/// factors. Tensor `i` draws from stream `(seed, DensityNoise, i)`.
pub fn perturb_density(tensors: &[Tensor], sigma_d: f32, seed: u64) -> Result<Vec<Tensor>> {
    if !(sigma_d >= 0.0 && sigma_d.is_finite()) {
        return Err(Error::InvalidPerturbation(format!("sigma_d must be finite and >= 0, got {sigma_d}")));
    }
    if sigma_d == 0.0 {
        return Ok(tensors.to_vec());
    }
    let normal = Normal::new(0.0f64, sigma_d as f64).expect("valid std");
    Ok(tensors
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = stream(seed, Purpose::DensityNoise, i as u64);
            let mut out = t.clone();
            for v in out.data_mut() {
                *v = (*v as f64 + normal.sample(&mut rng)) as f32;
            }
            out
        })
        .collect())
}

/// Normalized 1-D Gaussian kernel of odd `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur; longitude wraps, latitude clamps at the poles.
pub fn blur_envmap(env: &EnvironmentMap, size: usize, sigma: f64) -> Result<EnvironmentMap> {
    PerturbationSpec::envmap_blur(size, sigma).validate()?;
    if size == 1 {
        return Ok(env.clone());
    }
    let (h, w) = (env.height, env.width);
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;

    let mut horiz = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (j, kv) in k.iter().enumerate() {
                let sx = (x as isize + j as isize - r).rem_euclid(w as isize) as usize;
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += kv * env.data[i + c] as f64;
                }
            }
            horiz[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut data = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (j, kv) in k.iter().enumerate() {
                let sy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                let i = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += kv * horiz[i + c];
                }
            }
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = acc[c] as f32;
            }
        }
    }
    EnvironmentMap::new(h, w, data)
}

/// A copy of `model` with `spec` applied. Material multipliers become
/// post-sigmoid hooks; density and envmap perturbations rewrite copies of
/// their group. Every other group is left untouched.
pub fn attach(model: &SceneModel, spec: &PerturbationSpec) -> Result<SceneModel> {
    spec.validate()?;
    let mut out = model.clone();
    match spec.perturbation {
        Perturbation::Multiplier { m } => {
            let slot = out.hooks.slot(spec.target).expect("validated material target");
            if slot.is_some() {
                return Err(Error::ConflictingPerturbation(spec.target.to_string()));
            }
            *slot = Some(m);
        }
        Perturbation::GaussianNoise { sigma_d, seed } => {
            let g = out.group_mut(GroupName::Density);
            g.tensors = perturb_density(&g.tensors, sigma_d, seed)?;
        }
        Perturbation::GaussianBlur { size, sigma } => {
            if size > 1 {
                let g = out.group_mut(GroupName::Envmap);
                let env = EnvironmentMap::from_stored(&g.tensors[0])?;
                g.tensors[0] = blur_envmap(&env, size, sigma)?.to_stored();
            }
        }
    }
    Ok(out)
}

/// Apply several specs, each to a distinct target.
pub fn attach_all(model: &SceneModel, specs: &[PerturbationSpec]) -> Result<SceneModel> {
    for (i, a) in specs.iter().enumerate() {
        if specs[..i].iter().any(|b| b.target == a.target) {
            return Err(Error::ConflictingPerturbation(a.target.to_string()));
        }
    }
    specs.iter().try_fold(model.clone(), |m, s| attach(&m, s))
}

/// True when every group other than `except` is bit-identical.
pub fn others_bit_identical(a: &SceneModel, b: &SceneModel, except: Option<GroupName>) -> bool {
    a.groups()
        .iter()
        .zip(b.groups())
        .filter(|(g, _)| Some(g.name) != except)
        .all(|(x, y): (&ParamGroup, &ParamGroup)| x.bit_eq(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Aabb, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn config() -> ModelConfig {
        ModelConfig {
            bbox: Aabb::cube(1.0),
            density_resolution: [7; 3],
            density_rank: 2,
            appearance_resolution: [5; 3],
            appearance_rank: 2,
            head_hidden: vec![8],
            specular_hidden: vec![8],
            env_height: 8,
            env_width: 16,
            ..ModelConfig::desk()
        }
    }

    fn random_env(h: usize, w: usize, seed: u64) -> EnvironmentMap {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        EnvironmentMap::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..4.0)).collect()).unwrap()
    }

    #[test]
    fn multiplier_clips() {
        assert_eq!(apply_multiplier(0.7, 2.0), 1.0);
        assert_eq!(apply_multiplier(0.3, 1.0), 0.3);
        assert_eq!(apply_multiplier(0.001, 1000.0), 1.0);
        assert_eq!(apply_multiplier(0.5, 0.0), 0.0);
    }

    #[test]
    fn validation_rules() {
        assert!(PerturbationSpec::multiplier(GroupName::Density, 1.0, Direction::Over).validate().is_err());
        assert!(PerturbationSpec::multiplier(GroupName::Albedo, -1.0, Direction::Under).validate().is_err());
        assert!(PerturbationSpec::envmap_blur(4, 1.0).validate().is_err());
        assert!(PerturbationSpec::envmap_blur(3, 0.0).validate().is_err());
        assert!(PerturbationSpec::density_noise(-0.1, 0).validate().is_err());
        let wrong = PerturbationSpec {
            target: GroupName::Envmap,
            perturbation: Perturbation::GaussianNoise { sigma_d: 1.0, seed: 0 },
            direction: Direction::NotApplicable,
        };
        assert!(wrong.validate().is_err());
        for s in PerturbationSpec::default_rows(0) {
            s.validate().unwrap();
        }
    }

    #[test]
    fn spec_json_round_trip() {
        for s in PerturbationSpec::default_rows(9) {
            let j = serde_json::to_string(&s).unwrap();
            let back: PerturbationSpec = serde_json::from_str(&j).unwrap();
            assert_eq!(back, s);
        }
        let j = r#"{"target":"roughness","kind":"multiplier","m":0.1,"direction":"under"}"#;
        let s: PerturbationSpec = serde_json::from_str(j).unwrap();
        assert_eq!(s, PerturbationSpec::multiplier(GroupName::Roughness, 0.1, Direction::Under));
    }

    #[test]
    fn zero_noise_is_bit_exact() {
        let model = SceneModel::init(config(), 2);
        let t = model.group(GroupName::Density).tensors.clone();
        let out = perturb_density(&t, 0.0, 5).unwrap();
        assert!(t.iter().zip(&out).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn noise_is_reproducible() {
        let model = SceneModel::init(config(), 2);
        let t = &model.group(GroupName::Density).tensors;
        let a = perturb_density(t, 0.5, 5).unwrap();
        let b = perturb_density(t, 0.5, 5).unwrap();
        let c = perturb_density(t, 0.5, 6).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
        assert!(!a.iter().zip(&c).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn unit_kernel_blur_is_identity() {
        let env = random_env(8, 16, 1);
        assert_eq!(blur_envmap(&env, 1, 3.0).unwrap(), env);
    }

    #[test]
    fn blur_keeps_constant_map() {
        let env = EnvironmentMap::constant(8, 16, [0.3, 1.5, 2.0]);
        let b = blur_envmap(&env, 301, 300.0).unwrap();
        for (x, y) in env.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-5 * x.abs().max(1.0));
        }
    }

    #[test]
    fn impulse_row_sum_is_conserved_under_wraparound() {
        let (h, w) = (8, 128);
        let mut data = vec![0.0f32; h * w * 3];
        let y = 4;
        data[(y * w + 17) * 3] = 1.0;
        let env = EnvironmentMap::new(h, w, data).unwrap();
        // horizontal pass only: a vertical extent of one row keeps the impulse in its row
        let row = EnvironmentMap::new(1, w, env.data[y * w * 3..(y + 1) * w * 3].to_vec()).unwrap();
        let b = blur_envmap(&row, 301, 300.0).unwrap();
        let sum: f64 = b.data.chunks(3).map(|p| p[0] as f64).sum();
        assert!((sum - 1.0).abs() < 1e-4, "{sum}");
        // mass spread over the whole ring
        assert!(b.data.chunks(3).all(|p| p[0] > 0.0));
    }

    #[test]
    fn blur_preserves_mean_away_from_poles() {
        let (h, w) = (32, 64);
        let (size, sigma) = (7, 2.0);
        let r = size / 2;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        // rows within the kernel radius of a pole are constant per column
        let mut data = vec![0.0f32; h * w * 3];
        for x in 0..w {
            let top: f32 = rng.gen_range(0.0..2.0);
            let bottom: f32 = rng.gen_range(0.0..2.0);
            for y in 0..h {
                let v = if y < 2 * r { top } else if y >= h - 2 * r { bottom } else { rng.gen_range(0.0..2.0) };
                for c in 0..3 {
                    data[(y * w + x) * 3 + c] = v * (c + 1) as f32;
                }
            }
        }
        let env = EnvironmentMap::new(h, w, data).unwrap();
        let b = blur_envmap(&env, size, sigma).unwrap();
        let (ma, mb) = (env.mean(), b.mean());
        for c in 0..3 {
            assert!((ma[c] - mb[c]).abs() < 1e-4 * ma[c], "{:?} {:?}", ma, mb);
        }
    }

    fn rotate(env: &EnvironmentMap, k: usize) -> EnvironmentMap {
        let (h, w) = (env.height, env.width);
        let mut data = vec![0.0; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let d = (y * w + (x + k) % w) * 3;
                data[d..d + 3].copy_from_slice(&env.data[(y * w + x) * 3..(y * w + x) * 3 + 3]);
            }
        }
        EnvironmentMap::new(h, w, data).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn blur_commutes_with_horizontal_rotation(seed in 0u64..1000, k in 0usize..16, half in 0usize..6) {
            let env = random_env(6, 16, seed);
            let size = 2 * half + 1;
            let a = blur_envmap(&rotate(&env, k), size, 1.7).unwrap();
            let b = rotate(&blur_envmap(&env, size, 1.7).unwrap(), k);
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn multiplier_monotone_and_idempotent_at_bounds(a in 0.0f32..1.0, b in 0.0f32..1.0, m in 0.0f32..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(apply_multiplier(lo, m) <= apply_multiplier(hi, m));
            let v = apply_multiplier(a, m);
            if v == 1.0 || v == 0.0 {
                prop_assert_eq!(apply_multiplier(v, 1.0), v);
            }
        }
    }

    #[test]
    fn attach_isolates_the_target() {
        let model = SceneModel::init(config(), 3);
        for spec in PerturbationSpec::default_rows(1) {
            let spec = match spec.perturbation {
                Perturbation::GaussianBlur { .. } => PerturbationSpec::envmap_blur(5, 2.0),
                _ => spec,
            };
            let p = attach(&model, &spec).unwrap();
            let except = if MATERIALS.contains(&spec.target) { None } else { Some(spec.target) };
            assert!(others_bit_identical(&model, &p, except), "{}", spec.label());
            if except.is_some() {
                assert!(!p.group(spec.target).bit_eq(model.group(spec.target)));
                assert_eq!(p.hooks, model.hooks);
            }
        }
    }

    #[test]
    fn attach_roughness_changes_only_roughness_outputs() {
        let model = SceneModel::init(config(), 3);
        let p = attach(&model, &PerturbationSpec::multiplier(GroupName::Roughness, 0.1, Direction::Under)).unwrap();
        let pts = [[0.1, 0.2, -0.3], [0.5, -0.5, 0.0]];
        let (a, b) = (model.material_at(&pts), p.material_at(&pts));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0.map(f64::to_bits), y.0.map(f64::to_bits));
            assert_eq!(x.2.map(f64::to_bits), y.2.map(f64::to_bits));
            assert!((y.1 - 0.1 * x.1).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_multiplier_is_a_no_op_on_materials() {
        let model = SceneModel::init(config(), 3);
        let p = attach(&model, &PerturbationSpec::multiplier(GroupName::Albedo, 1.0, Direction::Under)).unwrap();
        let pts = [[0.1, 0.2, -0.3]];
        let (a, b) = (model.material_at(&pts), p.material_at(&pts));
        assert_eq!(a[0].0.map(f64::to_bits), b[0].0.map(f64::to_bits));
    }

    #[test]
    fn conflicting_specs_are_rejected() {
        let model = SceneModel::init(config(), 3);
        let a = PerturbationSpec::multiplier(GroupName::Albedo, 0.5, Direction::Under);
        let b = PerturbationSpec::multiplier(GroupName::Albedo, 2.0, Direction::Over);
        assert!(matches!(attach_all(&model, &[a, b]), Err(Error::ConflictingPerturbation(_))));
        let once = attach(&model, &a).unwrap();
        assert!(matches!(attach(&once, &b), Err(Error::ConflictingPerturbation(_))));
    }
}
