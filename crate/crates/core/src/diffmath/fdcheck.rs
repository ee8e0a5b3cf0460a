//! Central finite-difference oracle for analytic gradients.
//!
//! The analytic side runs the graph in `f32`; the numeric side re-evaluates
//! the same objective in `f64`.

use rand::seq::SliceRandom;

use super::graph::{Graph, Mat, Var};
use super::params::ParamKey;
use super::real::Real;
use super::rng::{stream, Purpose};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A deterministic scalar function of a list of parameter tensors.
pub trait Objective {
    /// Build the scalar loss from bound parameter leaves (same order as the
    /// evaluation point).
    fn eval<T: Real>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// When set, only this many coordinates per tensor are checked: those
    /// with the largest analytic gradient magnitude.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { step: 1e-3, max_coords_per_tensor: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// (tensor position, coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

fn eval_f64<O: Objective>(obj: &O, point: &[(ParamKey, Vec<f64>, (usize, usize))]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|(k, data, (r, c))| g.param_raw(*k, Mat::new(*r, *c, data.clone()), false))
        .collect();
    let loss = obj.eval(&mut g, &vars)?;
    Ok(g.scalar_value(loss))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn finite_diff_check<O: Objective>(obj: &O, point: &[(ParamKey, Tensor)], opts: &FdOptions) -> Result<FdReport> {
    // analytic, 32-bit
    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = point.iter().map(|(k, t)| g.param(*k, t, true)).collect();
    let loss = obj.eval(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut base: Vec<(ParamKey, Vec<f64>, (usize, usize))> = point
        .iter()
        .map(|(k, t)| (*k, t.data().iter().map(|&x| x as f64).collect(), t.matrix_dims()))
        .collect();

    let first = eval_f64(obj, &base)?;
    let second = eval_f64(obj, &base)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut report = FdReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut rng = stream(opts.seed, Purpose::FiniteDiff, 0);
    for ti in 0..base.len() {
        let key = base[ti].0;
        let n = base[ti].1.len();
        let analytic: Vec<f64> = match grads.get(key) {
            Some(gr) => gr.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(limit) if limit < n => {
                // the largest-magnitude entries first; ties broken by a seeded shuffle
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                idx.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
                idx.truncate(limit);
                idx
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = base[ti].1[i];
            base[ti].1[i] = x0 + opts.step;
            let fp = eval_f64(obj, &base)?;
            base[ti].1[i] = x0 - opts.step;
            let fm = eval_f64(obj, &base)?;
            base[ti].1[i] = x0;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((ti, i, analytic[i], numeric));
                }
            }
        }
    }
    Ok(report)
}
