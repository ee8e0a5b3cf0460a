//! Vector-matrix (VM) factorized feature volumes.
//!
//! A grid of `rank` components per mode stores, for each of the three modes,
//! a plane factor over two axes and a line factor over the remaining axis:
//!
//! | mode | plane axes | line axis |
//! |------|------------|-----------|
//! | 0    | (x, y)     | z         |
//! | 1    | (x, z)     | y         |
//! | 2    | (y, z)     | x         |
//!
//! Planes are stored texel-major as `[res_a, res_b, rank]`, lines as
//! `[res_c, rank]`, so one interpolation tap touches `rank` contiguous
//! floats. A grid with `channels > 1` owns a `[3 * rank, channels]` basis
//! matrix mapping the concatenated component products to features; a
//! single-channel grid sums the products instead.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, InterpPlan, Real, Tensor, Var};

pub const MODE_AXES: [([usize; 2], usize); 3] = [([0, 1], 2), ([0, 2], 1), ([1, 2], 0)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn cube(half: f64) -> Self {
        Aabb { min: [-half; 3], max: [half; 3] }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    /// Slab test. Returns the parametric entry/exit distances along the ray,
    /// clipped to `t >= 0`.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (mut a, mut b) = ((self.min[i] - o[i]) * inv, (self.max[i] - o[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmLayout {
    pub resolution: [usize; 3],
    pub rank: usize,
    pub channels: usize,
    pub bbox: Aabb,
}

impl VmLayout {
    pub fn has_basis(&self) -> bool {
        self.channels > 1
    }

    /// Number of tensors this grid contributes to its parameter group.
    pub fn tensor_count(&self) -> usize {
        6 + usize::from(self.has_basis())
    }

    pub fn plane_shape(&self, mode: usize) -> Vec<usize> {
        let [a, b] = MODE_AXES[mode].0;
        vec![self.resolution[a], self.resolution[b], self.rank]
    }

    pub fn line_shape(&self, mode: usize) -> Vec<usize> {
        vec![self.resolution[MODE_AXES[mode].1], self.rank]
    }

    pub fn zero_tensors(&self) -> Vec<Tensor> {
        let mut ts: Vec<Tensor> = (0..3).map(|m| Tensor::zeros(self.plane_shape(m))).collect();
        ts.extend((0..3).map(|m| Tensor::zeros(self.line_shape(m))));
        if self.has_basis() {
            ts.push(Tensor::zeros(vec![3 * self.rank, self.channels]));
        }
        ts
    }

    /// Continuous node coordinate of `x` along `axis`, or `None` outside.
    fn node_coord(&self, axis: usize, x: f64) -> Option<(usize, f64, f64)> {
        let lo = self.bbox.min[axis];
        let ext = self.bbox.extent(axis);
        let res = self.resolution[axis];
        if !(x >= lo && x <= lo + ext) || res < 2 {
            return None;
        }
        let scale = (res - 1) as f64 / ext;
        let c = (x - lo) * scale;
        // exact node hits belong to the cell below (lower index)
        let fl = c.floor();
        let mut i0 = if fl == c && c > 0.0 { fl as i64 - 1 } else { fl as i64 };
        i0 = i0.clamp(0, res as i64 - 2);
        Some((i0 as usize, c - i0 as f64, scale))
    }
}

/// Interpolation plans for one point set. Derivative plans are present only
/// when requested.
pub struct GridPlans<T> {
    pub n: usize,
    pub planes: Vec<InterpPlan<T>>,
    pub lines: Vec<InterpPlan<T>>,
    /// Per mode: derivative of the plane factor along each plane axis.
    pub plane_grads: Option<Vec<[InterpPlan<T>; 2]>>,
    /// Per mode: derivative of the line factor along its axis.
    pub line_grads: Option<Vec<InterpPlan<T>>>,
}

pub fn grid_plans<T: Real>(layout: &VmLayout, points: &[[f64; 3]], with_grad: bool) -> GridPlans<T> {
    let n = points.len();
    let mut planes = Vec::with_capacity(3);
    let mut lines = Vec::with_capacity(3);
    let mut pgrads = Vec::with_capacity(3);
    let mut lgrads = Vec::with_capacity(3);
    for &([a, b], c) in &MODE_AXES {
        let rb = layout.resolution[b];
        let mut p_off = Vec::with_capacity(n * 4);
        let mut p_w = Vec::with_capacity(n * 4);
        let mut pa_w = Vec::with_capacity(if with_grad { n * 4 } else { 0 });
        let mut pb_w = Vec::with_capacity(if with_grad { n * 4 } else { 0 });
        let mut l_off = Vec::with_capacity(n * 2);
        let mut l_w = Vec::with_capacity(n * 2);
        let mut lc_w = Vec::with_capacity(if with_grad { n * 2 } else { 0 });
        for p in points {
            let inside = layout.bbox.contains(*p);
            let (ca, cb, cc) = (
                layout.node_coord(a, p[a]),
                layout.node_coord(b, p[b]),
                layout.node_coord(c, p[c]),
            );
            match (inside, ca, cb, cc) {
                (true, Some((ia, fa, sa)), Some((ib, fb, sb)), Some((ic, fc, sc))) => {
                    let base = ia * rb + ib;
                    p_off.extend_from_slice(&[base as u32, (base + 1) as u32, (base + rb) as u32, (base + rb + 1) as u32]);
                    p_w.extend_from_slice(&[(1.0 - fa) * (1.0 - fb), (1.0 - fa) * fb, fa * (1.0 - fb), fa * fb].map(T::lit));
                    l_off.extend_from_slice(&[ic as u32, (ic + 1) as u32]);
                    l_w.extend_from_slice(&[1.0 - fc, fc].map(T::lit));
                    if with_grad {
                        pa_w.extend_from_slice(&[-(1.0 - fb) * sa, -fb * sa, (1.0 - fb) * sa, fb * sa].map(T::lit));
                        pb_w.extend_from_slice(&[-(1.0 - fa) * sb, (1.0 - fa) * sb, -fa * sb, fa * sb].map(T::lit));
                        lc_w.extend_from_slice(&[-sc, sc].map(T::lit));
                    }
                }
                _ => {
                    p_off.extend_from_slice(&[0; 4]);
                    p_w.extend_from_slice(&[T::zero(); 4]);
                    l_off.extend_from_slice(&[0; 2]);
                    l_w.extend_from_slice(&[T::zero(); 2]);
                    if with_grad {
                        pa_w.extend_from_slice(&[T::zero(); 4]);
                        pb_w.extend_from_slice(&[T::zero(); 4]);
                        lc_w.extend_from_slice(&[T::zero(); 2]);
                    }
                }
            }
        }
        if with_grad {
            pgrads.push([
                InterpPlan { taps: 4, offsets: p_off.clone(), weights: pa_w },
                InterpPlan { taps: 4, offsets: p_off.clone(), weights: pb_w },
            ]);
            lgrads.push(InterpPlan { taps: 2, offsets: l_off.clone(), weights: lc_w });
        }
        planes.push(InterpPlan { taps: 4, offsets: p_off, weights: p_w });
        lines.push(InterpPlan { taps: 2, offsets: l_off, weights: l_w });
    }
    GridPlans {
        n,
        planes,
        lines,
        plane_grads: with_grad.then_some(pgrads),
        line_grads: with_grad.then_some(lgrads),
    }
}

/// Graph leaves of one grid, in tensor order.
#[derive(Clone, Copy, Debug)]
pub struct VmVars {
    pub planes: [Var; 3],
    pub lines: [Var; 3],
    pub basis: Option<Var>,
}

impl VmVars {
    pub fn from_slice(vars: &[Var], has_basis: bool) -> Self {
        VmVars {
            planes: [vars[0], vars[1], vars[2]],
            lines: [vars[3], vars[4], vars[5]],
            basis: has_basis.then(|| vars[6]),
        }
    }
}

/// Grid features at the plan's points: `[n, channels]` (`[n, 1]` for a
/// summed single-channel grid).
pub fn vm_features<T: Real>(g: &mut Graph<T>, vars: &VmVars, plans: &GridPlans<T>) -> Var {
    let mut products = Vec::with_capacity(3);
    for m in 0..3 {
        let p = g.interp(vars.planes[m], plans.planes[m].clone());
        let l = g.interp(vars.lines[m], plans.lines[m].clone());
        products.push(g.mul(p, l));
    }
    match vars.basis {
        Some(basis) => {
            let cat = g.concat_cols(&products);
            g.matmul(cat, basis)
        }
        None => {
            let sums: Vec<Var> = products.iter().map(|&p| g.sum_cols(p)).collect();
            let s = g.add(sums[0], sums[1]);
            g.add(s, sums[2])
        }
    }
}

/// Spatial gradient of a summed single-channel grid: `[n, 3]`.
pub fn vm_spatial_gradient<T: Real>(g: &mut Graph<T>, vars: &VmVars, plans: &GridPlans<T>) -> Var {
    let pgrads = plans.plane_grads.as_ref().expect("plans built without derivatives");
    let lgrads = plans.line_grads.as_ref().expect("plans built without derivatives");
    let mut per_axis: [Vec<Var>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (m, &([a, b], c)) in MODE_AXES.iter().enumerate() {
        let p = g.interp(vars.planes[m], plans.planes[m].clone());
        let l = g.interp(vars.lines[m], plans.lines[m].clone());
        let pa = g.interp(vars.planes[m], pgrads[m][0].clone());
        let pb = g.interp(vars.planes[m], pgrads[m][1].clone());
        let lc = g.interp(vars.lines[m], lgrads[m].clone());
        let da = g.mul(pa, l);
        let db = g.mul(pb, l);
        let dc = g.mul(p, lc);
        per_axis[a].push(g.sum_cols(da));
        per_axis[b].push(g.sum_cols(db));
        per_axis[c].push(g.sum_cols(dc));
    }
    let cols: Vec<Var> = per_axis
        .iter()
        .map(|terms| {
            let s = g.add(terms[0], terms[1]);
            g.add(s, terms[2])
        })
        .collect();
    g.concat_cols(&cols)
}
