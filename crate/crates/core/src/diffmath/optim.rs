use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{GroupName, ParamGroup, ParamKey};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    moments: BTreeMap<ParamKey, (Vec<f32>, Vec<f32>)>,
    step: u64,
    lr: BTreeMap<GroupName, f32>,
    tensor_lr: BTreeMap<ParamKey, f32>,
}

impl OptimizerState {
    pub fn new(lr: impl IntoIterator<Item = (GroupName, f32)>) -> Self {
        OptimizerState { moments: BTreeMap::new(), step: 0, lr: lr.into_iter().collect(), tensor_lr: BTreeMap::new() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lr(&self, group: GroupName) -> f32 {
        self.lr.get(&group).copied().unwrap_or(0.0)
    }

    pub fn set_lr(&mut self, group: GroupName, lr: f32) {
        self.lr.insert(group, lr);
    }

    /// Per-tensor rate, taking precedence over the group rate.
    pub fn set_tensor_lr(&mut self, key: ParamKey, lr: f32) {
        self.tensor_lr.insert(key, lr);
    }

    pub fn tensor_lr(&self, key: ParamKey) -> f32 {
        self.tensor_lr.get(&key).copied().unwrap_or_else(|| self.lr(key.group))
    }

    pub fn moments(&self, key: ParamKey) -> Option<(&[f32], &[f32])> {
        self.moments.get(&key).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update over every trainable group.
///
/// Frozen groups are skipped entirely, even when `grads` carries entries
/// for them. Tensors of a trainable group without a gradient entry are
/// treated as having zero gradient.
pub fn adam_step(
    groups: &mut [ParamGroup],
    grads: &Gradients<f32>,
    state: &mut OptimizerState,
    hp: &AdamHyper,
) -> Result<()> {
    for (key, g) in grads.iter() {
        let group = groups
            .iter()
            .find(|p| p.name == key.group)
            .ok_or_else(|| Error::UnknownGroup(key.group.to_string()))?;
        let t = group.tensors.get(key.index).ok_or_else(|| {
            Error::ShapeMismatch(format!("group {} has no tensor {}", key.group, key.index))
        })?;
        if t.len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {}[{}] has {} elements, parameter has {}",
                key.group,
                key.index,
                g.len(),
                t.len()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);

    for group in groups.iter_mut().filter(|g| g.trainable) {
        for (index, tensor) in group.tensors.iter_mut().enumerate() {
            if !tensor.requires_grad {
                continue;
            }
            let key = ParamKey { group: group.name, index };
            let lr = state.tensor_lr(key);
            let n = tensor.len();
            let (m, v) = state.moments.entry(key).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let g = grads.get(key);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= lr * mh / (vh.sqrt() + hp.eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::tensor::Tensor;

    fn groups() -> Vec<ParamGroup> {
        vec![
            ParamGroup::new(GroupName::Albedo, vec![Tensor::filled(vec![1], 1.0)]),
            ParamGroup::new(GroupName::Roughness, vec![Tensor::filled(vec![2], 0.5)]),
        ]
    }

    fn grads(v: f32) -> Gradients<f32> {
        let mut g = Gradients::default();
        g.insert(ParamKey { group: GroupName::Albedo, index: 0 }, vec![v]);
        g.insert(ParamKey { group: GroupName::Roughness, index: 0 }, vec![v, v]);
        g
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut gs = groups();
        let before = gs.clone();
        let mut st = OptimizerState::new([(GroupName::Albedo, 0.1), (GroupName::Roughness, 0.1)]);
        for _ in 0..5 {
            adam_step(&mut gs, &grads(0.0), &mut st, &AdamHyper::default()).unwrap();
        }
        assert_eq!(gs, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut gs = groups();
        let mut st = OptimizerState::new([(GroupName::Albedo, 0.1)]);
        adam_step(&mut gs, &grads(1.0), &mut st, &AdamHyper::default()).unwrap();
        let w = gs[0].tensors[0].data()[0];
        // m_hat = v_hat = 1, update = lr / (1 + eps)
        assert!((w - 0.9).abs() < 1e-6, "{w}");
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn frozen_group_is_bit_identical() {
        let mut gs = groups();
        gs[1].trainable = false;
        let frozen = gs[1].clone();
        let mut st = OptimizerState::new([(GroupName::Albedo, 0.1), (GroupName::Roughness, 0.1)]);
        for _ in 0..10 {
            adam_step(&mut gs, &grads(0.7), &mut st, &AdamHyper::default()).unwrap();
        }
        assert!(gs[1].bit_eq(&frozen));
        assert!(st.moments(ParamKey { group: GroupName::Roughness, index: 0 }).is_none());
    }

    #[test]
    fn tensor_rate_overrides_group_rate() {
        let mut gs = groups();
        let mut st = OptimizerState::new([(GroupName::Albedo, 0.1)]);
        st.set_tensor_lr(ParamKey { group: GroupName::Albedo, index: 0 }, 0.5);
        adam_step(&mut gs, &grads(1.0), &mut st, &AdamHyper::default()).unwrap();
        assert!((gs[0].tensors[0].data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut gs = groups();
        let mut g = Gradients::default();
        g.insert(ParamKey { group: GroupName::Albedo, index: 0 }, vec![1.0, 2.0]);
        let mut st = OptimizerState::new([]);
        assert!(matches!(
            adam_step(&mut gs, &g, &mut st, &AdamHyper::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
