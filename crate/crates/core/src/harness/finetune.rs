use super::config::TrainConfig;
use super::train::{batch_gradients, evaluate, optimizer_for, subset_psnr, with_workers, LossWeights, RayPool};
use crate::diffmath::rng::combine;
use crate::diffmath::{adam_step, AdamHyper, GroupName};
use crate::error::{Error, Result};
use crate::fields::SceneModel;
use crate::io::{SceneDataset, Split};
use crate::metrics::MetricBundle;
use crate::perturb::{attach, PerturbationSpec};
use crate::renderer::RenderOutput;

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Best model by held-out subset PSNR (iteration 0 included).
    pub model: SceneModel,
    pub metrics: MetricBundle,
    pub best_iteration: usize,
    /// `(iteration, held-out subset PSNR)` at every evaluation.
    pub history: Vec<(usize, f64)>,
    /// Held-out renders of the returned model.
    pub renders: Vec<RenderOutput>,
}

/// Perturb `baseline` with `spec`, then re-optimize the photometric loss
/// with only `unfrozen` trainable. The baseline is not modified.
pub fn finetune(
    baseline: &SceneModel,
    spec: &PerturbationSpec,
    unfrozen: GroupName,
    ds: &SceneDataset,
    cfg: &TrainConfig,
    iterations: usize,
    seed: u64,
) -> Result<FinetuneOutcome> {
    let perturbed = attach(baseline, spec)?;
    finetune_model(&perturbed, unfrozen, ds, cfg, iterations, seed)
}

/// Fine-tune an already perturbed model.
pub fn finetune_model(
    perturbed: &SceneModel,
    unfrozen: GroupName,
    ds: &SceneDataset,
    cfg: &TrainConfig,
    iterations: usize,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let pool = RayPool::new(ds, Split::Train)?;
    let split = if ds.count(Split::Test) > 0 { Split::Test } else { Split::Train };
    let mut model = perturbed.clone();
    model.set_trainable(Some(unfrozen));
    let weights = LossWeights::photometric_only();
    let every = cfg.finetune_eval_every.max(1);

    let (best, best_iteration, history) = with_workers(cfg.workers, || -> Result<_> {
        let score = |m: &SceneModel| subset_psnr(m, ds, split, &cfg.render, cfg.seed, cfg.eval_pixels);
        let mut best = model.clone();
        let mut best_score = score(&model)?;
        let mut best_iteration = 0;
        let mut history = vec![(0, best_score)];
        let mut state = optimizer_for(cfg, &model, None, cfg.finetune_lr_scale);
        for it in 0..iterations {
            let batch = pool.sample(cfg.batch_rays, seed, it as u64);
            let (parts, grads) = batch_gradients(&model, &batch, &cfg.render, weights, combine(seed, it as u64), cfg.chunk_rays)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged { iteration: it, loss: parts.total });
            }
            adam_step(model.groups_mut(), &grads, &mut state, &AdamHyper::default())?;
            let done = it + 1;
            if done % every == 0 || done == iterations {
                let s = score(&model)?;
                history.push((done, s));
                if s > best_score {
                    best_score = s;
                    best = model.clone();
                    best_iteration = done;
                }
            }
        }
        Ok((best, best_iteration, history))
    })??;

    for (a, b) in perturbed.groups().iter().zip(best.groups()) {
        if a.name != unfrozen {
            assert!(a.bit_eq(b), "frozen group {} changed during fine-tuning", a.name);
        }
    }
    let mut model = best;
    model.set_trainable(None);
    let eval = evaluate(&model, ds, split, &cfg.render, cfg.seed, None)?;
    Ok(FinetuneOutcome { model, metrics: eval.metrics, best_iteration, history, renders: eval.renders })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::tests::{tiny_dataset, tiny_train};
    use crate::perturb::Direction;

    #[test]
    fn frozen_groups_stay_bit_identical() {
        let ds = tiny_dataset(24, 20);
        let cfg = TrainConfig { finetune_eval_every: 1, eval_pixels: 0, ..tiny_train() };
        let base = SceneModel::init(cfg.model.clone(), 1);
        let spec = PerturbationSpec::multiplier(GroupName::Roughness, 2.0, Direction::Over);
        let out = finetune(&base, &spec, GroupName::Albedo, &ds, &cfg, 3, 5).unwrap();
        let perturbed = attach(&base, &spec).unwrap();
        for g in GroupName::ALL {
            if g != GroupName::Albedo {
                assert!(perturbed.group(g).bit_eq(out.model.group(g)));
            }
        }
        assert_eq!(out.history.len(), 4);
        assert_eq!(out.model.hooks.roughness, Some(2.0));
        let best = out.history.iter().map(|h| h.1).fold(f64::MIN, f64::max);
        assert_eq!(out.history[out.best_iteration].1, best);
    }

    #[test]
    fn identity_perturbation_without_iterations_matches_baseline() {
        let ds = tiny_dataset(24, 20);
        let cfg = tiny_train();
        let base = SceneModel::init(cfg.model.clone(), 1);
        let spec = PerturbationSpec::multiplier(GroupName::Albedo, 1.0, Direction::NotApplicable);
        let out = finetune(&base, &spec, GroupName::F0, &ds, &cfg, 0, 5).unwrap();
        let reference = evaluate(&base, &ds, Split::Test, &cfg.render, cfg.seed, None).unwrap().metrics;
        assert_eq!(out.metrics.psnr.to_bits(), reference.psnr.to_bits());
        assert_eq!(out.metrics.ssim.to_bits(), reference.ssim.to_bits());
        assert_eq!(out.best_iteration, 0);
    }
}
