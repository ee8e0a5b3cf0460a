use serde::{Deserialize, Serialize};

use crate::diffmath::{GroupName, ParamKey};
use crate::error::{Error, Result};
use crate::fields::{ModelConfig, SceneModel};
use crate::perturb::PerturbationSpec;
use crate::renderer::RenderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub iterations: usize,
    /// Rays per optimization step.
    pub batch_rays: usize,
    /// Rays per gradient chunk. Chunks are evaluated independently and
    /// summed in order, so results do not depend on the worker count.
    pub chunk_rays: usize,
    pub lr_grid: f32,
    pub lr_mlp: f32,
    pub lr_env: f32,
    /// Final learning-rate factor of an exponential decay over the run
    /// (1 = constant).
    pub lr_decay: f32,
    pub lambda_photometric: f64,
    pub lambda_orientation: f64,
    pub lambda_entropy: f64,
    pub seed: u64,
    /// Periodic held-out evaluation; 0 disables it.
    pub eval_every: usize,
    /// Pixels per held-out view used by periodic evaluation (strided).
    pub eval_pixels: usize,
    pub finetune_iterations: usize,
    pub finetune_eval_every: usize,
    /// Learning-rate factor applied to the unfrozen group while fine-tuning.
    pub finetune_lr_scale: f32,
    pub matrix_rows: Vec<PerturbationSpec>,
    pub workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            render: RenderConfig::default(),
            iterations: 2000,
            batch_rays: 512,
            chunk_rays: 128,
            lr_grid: 0.02,
            lr_mlp: 1e-3,
            lr_env: 1e-3,
            lr_decay: 1.0,
            lambda_photometric: 1.0,
            lambda_orientation: 0.01,
            lambda_entropy: 0.001,
            seed: 0,
            eval_every: 500,
            eval_pixels: 1024,
            finetune_iterations: 500,
            finetune_eval_every: 50,
            finetune_lr_scale: 10.0,
            matrix_rows: PerturbationSpec::default_rows(0),
            workers: None,
        }
    }

    pub fn full() -> Self {
        let mut render = RenderConfig::default();
        render.shading.diffuse_samples = 64;
        TrainConfig {
            model: ModelConfig::full(),
            render,
            iterations: 30000,
            batch_rays: 4096,
            finetune_iterations: 5000,
            finetune_eval_every: 250,
            eval_every: 2500,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_rays", self.batch_rays as f64),
            ("chunk_rays", self.chunk_rays as f64),
            ("lr_grid", self.lr_grid as f64),
            ("lr_mlp", self.lr_mlp as f64),
            ("lr_env", self.lr_env as f64),
            ("lr_decay", self.lr_decay as f64),
            ("finetune_lr_scale", self.finetune_lr_scale as f64),
            ("samples_per_ray", self.render.samples_per_ray as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_photometric", self.lambda_photometric),
            ("lambda_orientation", self.lambda_orientation),
            ("lambda_entropy", self.lambda_entropy),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for s in &self.matrix_rows {
            s.validate()?;
        }
        Ok(())
    }

    /// Learning rate of every tensor: plane and line factors use `lr_grid`,
    /// the appearance basis and networks `lr_mlp`, the environment map
    /// `lr_env`.
    pub fn learning_rates(&self, model: &SceneModel) -> Vec<(ParamKey, f32)> {
        let grid_tensors = 6;
        model
            .groups()
            .iter()
            .flat_map(|g| (0..g.tensors.len()).map(move |index| ParamKey { group: g.name, index }))
            .map(|k| {
                let lr = match k.group {
                    GroupName::Density => self.lr_grid,
                    GroupName::Envmap => self.lr_env,
                    GroupName::SpecularMlp => self.lr_mlp,
                    _ if k.index < grid_tensors => self.lr_grid,
                    _ => self.lr_mlp,
                };
                (k, lr)
            })
            .collect()
    }

    /// Learning-rate factor at iteration `it` of `total`.
    pub fn decay_factor(&self, it: usize, total: usize) -> f32 {
        if total == 0 || self.lr_decay == 1.0 {
            1.0
        } else {
            self.lr_decay.powf(it as f32 / total as f32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let c = TrainConfig::desk();
        assert_eq!((c.iterations, c.batch_rays), (2000, 512));
        assert_eq!((c.lr_grid, c.lr_mlp), (0.02, 1e-3));
        assert_eq!((c.lambda_orientation, c.lambda_entropy), (0.01, 0.001));
        assert_eq!(c.matrix_rows.len(), 8);
        c.validate().unwrap();
        let f = TrainConfig::full();
        assert_eq!((f.iterations, f.batch_rays, f.finetune_iterations), (30000, 4096, 5000));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"iterations": 10, "seed": 3}"#).unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.seed, 3);
        assert_eq!(c.batch_rays, 512);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let c = TrainConfig { lr_grid: 0.0, ..TrainConfig::desk() };
        assert!(c.validate().is_err());
        let c = TrainConfig { lambda_entropy: -1.0, ..TrainConfig::desk() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_and_network_rates_split_within_a_material_group() {
        let cfg = TrainConfig::desk();
        let model = SceneModel::zeroed(cfg.model.clone());
        let lrs = cfg.learning_rates(&model);
        let get = |g, i| lrs.iter().find(|(k, _)| k.group == g && k.index == i).unwrap().1;
        assert_eq!(get(GroupName::Albedo, 0), 0.02);
        assert_eq!(get(GroupName::Albedo, 5), 0.02);
        assert_eq!(get(GroupName::Albedo, 6), 1e-3);
        assert_eq!(get(GroupName::Albedo, 7), 1e-3);
        assert_eq!(get(GroupName::Density, 5), 0.02);
        assert_eq!(get(GroupName::Envmap, 0), 1e-3);
    }
}
