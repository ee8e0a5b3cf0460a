//! Reverse-mode differentiation over a recorded tape of 2-D tensor ops.
//!
//! Every value is a row-major matrix. Nodes are appended in evaluation order,
//! so the node index is already a topological order and `backward` walks it
//! in reverse. Leaves bound to model parameters are tagged with a
//! [`ParamKey`]; only trainable leaves (and nodes depending on them) carry
//! gradients.

use std::collections::BTreeMap;

use super::params::ParamKey;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} with {} elements", data.len());
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: T) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Mat::new(rows, cols, data.iter().map(|&x| T::from_f32v(x)).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn map(&self, f: impl Fn(T) -> T) -> Mat<T> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

/// Sparse linear gather: `out[i, c] = sum_k w[i, k] * p[off[i, k], c]` for a
/// parameter matrix `p` of shape `[texels, channels]`. Grid queries build one
/// plan per (factor, point set); derivative plans reuse the same offsets with
/// differentiated weights.
#[derive(Clone, Debug)]
pub struct InterpPlan<T> {
    pub taps: usize,
    pub offsets: Vec<u32>,
    pub weights: Vec<T>,
}

impl<T> InterpPlan<T> {
    pub fn points(&self) -> usize {
        if self.taps == 0 {
            0
        } else {
            self.offsets.len() / self.taps
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Relu,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    Offset(Var),
    Powf(Var, T),
    Clamp(Var, T, T),
    MatMul(Var, Var),
    Sum(Var),
    SumCols(Var),
    Concat(Vec<Var>),
    Slice { src: Var, start: usize },
    RepeatRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    Reshape(Var),
    CumsumExclusive(Var),
    Interp(Var, InterpPlan<T>),
    EnvLookup { env: Var, dirs: Var, height: usize, width: usize },
    Detach,
    Floor(Var),
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamKey>,
}

/// Gradients of a scalar loss w.r.t. every trainable parameter leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    by_param: BTreeMap<ParamKey, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, key: ParamKey) -> Option<&[T]> {
        self.by_param.get(&key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Vec<T>)> {
        self.by_param.iter()
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn insert(&mut self, key: ParamKey, grad: Vec<T>) {
        self.by_param.insert(key, grad);
    }

    /// Elementwise accumulation; keys absent on one side are copied.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (k, g) in &other.by_param {
            match self.by_param.get_mut(k) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => {
                    self.by_param.insert(*k, g.clone());
                }
            }
        }
    }

    pub fn to_f32(&self) -> Gradients<f32> {
        Gradients {
            by_param: self
                .by_param
                .iter()
                .map(|(k, g)| (*k, g.iter().map(|x| x.as_f32()).collect()))
                .collect(),
        }
    }
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

#[inline]
fn bidx(shape: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if shape.0 == 1 { 0 } else { r };
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
}

/// Sum `g` (of broadcast shape) down to `shape`.
fn reduce_to<T: Real>(g: &Mat<T>, shape: (usize, usize)) -> Vec<T> {
    if g.shape() == shape {
        return g.data.clone();
    }
    let mut out = vec![T::zero(); shape.0 * shape.1];
    for r in 0..g.rows {
        for c in 0..g.cols {
            out[bidx(shape, r, c)] += g.data[r * g.cols + c];
        }
    }
    out
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Equirectangular texel coordinates of a unit direction and their
/// derivatives: returns `(x, y, dx/dd, dy/dd)` in texel units.
#[inline]
pub(crate) fn equirect_coords<T: Real>(d: [T; 3], height: usize, width: usize) -> (T, T, [T; 3], [T; 3]) {
    let two_pi = T::PI() + T::PI();
    let a = d[0];
    let b = -d[2];
    let u = T::lit(0.5) + a.atan2(b) / two_pi;
    let dy = d[1].max(-T::one()).min(T::one());
    let v = dy.acos() / T::PI();
    let w = T::lit(width as f64);
    let h = T::lit(height as f64);
    let x = u * w - T::lit(0.5);
    let y = v * h - T::lit(0.5);
    let r2 = a * a + b * b;
    let dxd = if r2 > T::lit(1e-24) {
        // d atan2(a, b) = (b da - a db) / (a^2 + b^2), with b = -d_z
        let s = w / (two_pi * r2);
        [b * s, T::zero(), a * s]
    } else {
        [T::zero(); 3]
    };
    let one_m = T::one() - dy * dy;
    let dyd = if one_m > T::lit(1e-12) && d[1].abs() < T::one() {
        [T::zero(), -h / (T::PI() * one_m.sqrt()), T::zero()]
    } else {
        [T::zero(); 3]
    };
    (x, y, dxd, dyd)
}

/// Bilinear taps of a texel coordinate with horizontal wraparound and
/// vertical clamping. Returns texel indices, weights, and whether the
/// vertical coordinate is live (both rows distinct).
#[inline]
pub(crate) fn equirect_taps<T: Real>(x: T, y: T, height: usize, width: usize) -> ([usize; 4], [T; 4], T, T, bool) {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let wi = width as i64;
    let x0 = x0f.to_i64().unwrap_or(0).rem_euclid(wi) as usize;
    let x1 = (x0 + 1) % width;
    let hmax = height as i64 - 1;
    let y0i = y0f.to_i64().unwrap_or(0);
    let y0 = y0i.clamp(0, hmax) as usize;
    let y1 = (y0i + 1).clamp(0, hmax) as usize;
    let live = y0 != y1;
    let one = T::one();
    let idx = [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1];
    let w = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
    (idx, w, fx, fy, live)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Mat::scalar(v))
    }

    /// Free leaf that receives a gradient (used by tests and oracles).
    pub fn variable(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Bind a model tensor as a leaf. Frozen tensors become constants.
    pub fn param(&mut self, key: ParamKey, t: &Tensor, trainable: bool) -> Var {
        let (r, c) = t.matrix_dims();
        let v = self.push(Mat::from_f32(r, c, t.data()), Op::Leaf, trainable && t.requires_grad);
        self.nodes[v.0].param = Some(key);
        v
    }

    /// Bind a parameter given directly in the graph's precision.
    pub fn param_raw(&mut self, key: ParamKey, m: Mat<T>, trainable: bool) -> Var {
        let v = self.push(m, Op::Leaf, trainable);
        self.nodes[v.0].param = Some(key);
        v
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Mat<T> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if sa == sb {
            let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
            return Mat::new(sa.0, sa.1, data);
        }
        let (r, c) = broadcast_shape(sa, sb);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(f(va.data[bidx(sa, i, j)], vb.data[bidx(sb, i, j)]));
            }
        }
        Mat::new(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let m = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(m, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let m = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(m, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let m = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(m, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let m = self.binary(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(m, Op::Div(a, b), rg)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Neg => |x| -x,
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Exp => |x| x.exp(),
            Unary::Ln => |x| x.ln(),
            Unary::Sin => |x| x.sin(),
            Unary::Cos => |x| x.cos(),
            Unary::Sqrt => |x| x.sqrt(),
            Unary::Relu => |x| x.max(T::zero()),
        };
        let m = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(m, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let m = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.rg(a);
        self.push(m, Op::Scale(a, s), rg)
    }

    pub fn offset(&mut self, a: Var, s: T) -> Var {
        let m = self.nodes[a.0].value.map(|x| x + s);
        let rg = self.rg(a);
        self.push(m, Op::Offset(a), rg)
    }

    /// `s - a`
    pub fn rsub(&mut self, s: T, a: Var) -> Var {
        let n = self.neg(a);
        self.offset(n, s)
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let m = self.nodes[a.0].value.map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(m, Op::Powf(a, p), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Clamp with a hard gradient stop outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let m = self.nodes[a.0].value.map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(m, Op::Clamp(a, lo, hi), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions {m}x{k} * {k2}x{n}");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value.data,
            k as isize,
            1,
            &self.nodes[b.0].value.data,
            n as isize,
            1,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Mat::new(m, n, out), Op::MatMul(a, b), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().copied().sum();
        let rg = self.rg(a);
        self.push(Mat::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.data.len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let data = (0..v.rows).map(|r| v.row(r).iter().copied().sum()).collect();
        let m = Mat::new(v.rows, 1, data);
        let rg = self.rg(a);
        self.push(m, Op::SumCols(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.rows, rows, "concat row mismatch");
                data.extend_from_slice(v.row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Mat::new(rows, cols, data), Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(start + len <= v.cols, "column slice out of range");
        let mut data = Vec::with_capacity(v.rows * len);
        for r in 0..v.rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let m = Mat::new(v.rows, len, data);
        let rg = self.rg(a);
        self.push(m, Op::Slice { src: a, start }, rg)
    }

    /// Split a 3-column matrix into its columns.
    pub fn columns3(&mut self, a: Var) -> [Var; 3] {
        [self.slice_cols(a, 0, 1), self.slice_cols(a, 1, 1), self.slice_cols(a, 2, 1)]
    }

    /// Each row repeated `k` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(v.rows * k * v.cols);
        for r in 0..v.rows {
            for _ in 0..k {
                data.extend_from_slice(v.row(r));
            }
        }
        let m = Mat::new(v.rows * k, v.cols, data);
        let rg = self.rg(a);
        self.push(m, Op::RepeatRows(a, k), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(idx.len() * v.cols);
        for &i in &idx {
            data.extend_from_slice(v.row(i));
        }
        let m = Mat::new(idx.len(), v.cols, data);
        let rg = self.rg(a);
        self.push(m, Op::GatherRows(a, idx), rg)
    }

    /// Scatter-add rows into `segments` output rows: `out[seg[i]] += a[i]`.
    pub fn segment_sum(&mut self, a: Var, seg: Vec<usize>, segments: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(seg.len(), v.rows, "one segment id per row");
        let mut out = Mat::zeros(segments, v.cols);
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..v.cols {
                out.data[s * v.cols + c] += v.data[r * v.cols + c];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SegmentSum(a, seg), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.data.len(), rows * cols, "reshape size mismatch");
        let m = Mat::new(rows, cols, v.data.clone());
        let rg = self.rg(a);
        self.push(m, Op::Reshape(a), rg)
    }

    /// Exclusive prefix sum along each row.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = Mat::zeros(v.rows, v.cols);
        for r in 0..v.rows {
            let mut acc = T::zero();
            for c in 0..v.cols {
                out.data[r * v.cols + c] = acc;
                acc += v.data[r * v.cols + c];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::CumsumExclusive(a), rg)
    }

    pub fn interp(&mut self, param: Var, plan: InterpPlan<T>) -> Var {
        let p = &self.nodes[param.0].value;
        let ch = p.cols;
        let n = plan.points();
        let mut out = vec![T::zero(); n * ch];
        for i in 0..n {
            let o = &mut out[i * ch..(i + 1) * ch];
            for k in 0..plan.taps {
                let w = plan.weights[i * plan.taps + k];
                if w == T::zero() {
                    continue;
                }
                let base = plan.offsets[i * plan.taps + k] as usize * ch;
                for (c, oc) in o.iter_mut().enumerate() {
                    *oc += w * p.data[base + c];
                }
            }
        }
        let rg = self.rg(param);
        self.push(Mat::new(n, ch, out), Op::Interp(param, plan), rg)
    }

    /// Bilinear equirectangular lookup of `env: [height*width, channels]`
    /// along unit directions `dirs: [n, 3]`; differentiable in both.
    pub fn env_lookup(&mut self, env: Var, dirs: Var, height: usize, width: usize) -> Var {
        let e = &self.nodes[env.0].value;
        let d = &self.nodes[dirs.0].value;
        assert_eq!(e.rows, height * width, "environment texel count");
        assert_eq!(d.cols, 3, "directions must be [n, 3]");
        let ch = e.cols;
        let mut out = vec![T::zero(); d.rows * ch];
        for i in 0..d.rows {
            let dir = [d.data[i * 3], d.data[i * 3 + 1], d.data[i * 3 + 2]];
            let (x, y, _, _) = equirect_coords(dir, height, width);
            let (idx, w, ..) = equirect_taps(x, y, height, width);
            for k in 0..4 {
                for c in 0..ch {
                    out[i * ch + c] += w[k] * e.data[idx[k] * ch + c];
                }
            }
        }
        let rg = self.rg(env) || self.rg(dirs);
        self.push(Mat::new(d.rows, ch, out), Op::EnvLookup { env, dirs, height, width }, rg)
    }

    pub fn detach(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.clone();
        self.push(m, Op::Detach, false)
    }

    /// Forward-only; `backward` fails if a gradient has to pass through it.
    pub fn floor(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0].value.map(|x| x.floor());
        let rg = self.rg(a);
        self.push(m, Op::Floor(a), rg)
    }

    // ---- composite helpers over [n, 3] direction matrices ----

    pub fn dot3(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_cols(p)
    }

    pub fn normalize3(&mut self, a: Var) -> Var {
        let sq = self.dot3(a, a);
        let n = self.sqrt(sq);
        self.div(a, n)
    }

    pub fn cross3(&mut self, a: Var, b: Var) -> Var {
        let [a0, a1, a2] = self.columns3(a);
        let [b0, b1, b2] = self.columns3(b);
        let x0 = self.mul(a1, b2);
        let x1 = self.mul(a2, b1);
        let x = self.sub(x0, x1);
        let y0 = self.mul(a2, b0);
        let y1 = self.mul(a0, b2);
        let y = self.sub(y0, y1);
        let z0 = self.mul(a0, b1);
        let z1 = self.mul(a1, b0);
        let z = self.sub(z0, z1);
        self.concat_cols(&[x, y, z])
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut out = Gradients::default();
        if !self.rg(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let gm = Mat::new(node.value.rows, node.value.cols, g);
            self.propagate(node, &gm, &mut grads)?;
            if let (Op::Leaf, Some(key)) = (&node.op, node.param) {
                out.insert(key, gm.data);
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Mat<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Floor(a) => {
                if self.rg(*a) {
                    return Err(Error::UnsupportedPrimitive("floor"));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, reduce_to(g, val(*a).shape()));
                self.accum(grads, *b, reduce_to(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, reduce_to(g, val(*a).shape()));
                let gb: Vec<T> = reduce_to(g, val(*b).shape()).into_iter().map(|x| -x).collect();
                self.accum(grads, *b, gb);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let is_div = matches!(node.op, Op::Div(..));
                if self.rg(*a) {
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            let y = vb.data[bidx(sb, r, c)];
                            let gi = g.data[r * g.cols + c];
                            ga.data[r * g.cols + c] = if is_div { gi / y } else { gi * y };
                        }
                    }
                    self.accum(grads, *a, reduce_to(&ga, sa));
                }
                if self.rg(*b) {
                    let mut gb = Mat::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            let x = va.data[bidx(sa, r, c)];
                            let gi = g.data[r * g.cols + c];
                            gb.data[r * g.cols + c] = if is_div {
                                let y = vb.data[bidx(sb, r, c)];
                                -gi * x / (y * y)
                            } else {
                                gi * x
                            };
                        }
                    }
                    self.accum(grads, *b, reduce_to(&gb, sb));
                }
            }
            Op::Unary(kind, a) => {
                let x = &val(*a).data;
                let y = &node.value.data;
                let ga: Vec<T> = g
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let d = match kind {
                            Unary::Neg => -T::one(),
                            Unary::Sigmoid => y[i] * (T::one() - y[i]),
                            Unary::Softplus => sigmoid(x[i]),
                            Unary::Exp => y[i],
                            Unary::Ln => T::one() / x[i],
                            Unary::Sin => x[i].cos(),
                            Unary::Cos => -x[i].sin(),
                            Unary::Sqrt => T::lit(0.5) / y[i],
                            Unary::Relu => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        gi * d
                    })
                    .collect();
                self.accum(grads, *a, ga);
            }
            Op::Scale(a, s) => {
                self.accum(grads, *a, g.data.iter().map(|&x| x * *s).collect());
            }
            Op::Offset(a) | Op::Reshape(a) => {
                self.accum(grads, *a, g.data.clone());
            }
            Op::Powf(a, p) => {
                let x = &val(*a).data;
                let ga = g
                    .data
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * *p * xi.powf(*p - T::one()))
                    .collect();
                self.accum(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &val(*a).data;
                let ga = g
                    .data
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi >= *lo && xi <= *hi { gi } else { T::zero() })
                    .collect();
                self.accum(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows, va.cols, vb.cols);
                if self.rg(*a) {
                    // ga = g * b^T : [m, n] x [n, k]
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g.data, n as isize, 1, &vb.data, 1, n as isize, &mut ga, false);
                    self.accum(grads, *a, ga);
                }
                if self.rg(*b) {
                    // gb = a^T * g : [k, m] x [m, n]
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, &va.data, 1, k as isize, &g.data, n as isize, 1, &mut gb, false);
                    self.accum(grads, *b, gb);
                }
            }
            Op::Sum(a) => {
                let n = val(*a).data.len();
                self.accum(grads, *a, vec![g.data[0]; n]);
            }
            Op::SumCols(a) => {
                let va = val(*a);
                let mut ga = Vec::with_capacity(va.data.len());
                for r in 0..va.rows {
                    ga.extend(std::iter::repeat(g.data[r]).take(va.cols));
                }
                self.accum(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pc = val(p).cols;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(g.rows * pc);
                        for r in 0..g.rows {
                            gp.extend_from_slice(&g.row(r)[start..start + pc]);
                        }
                        self.accum(grads, p, gp);
                    }
                    start += pc;
                }
            }
            Op::Slice { src, start } => {
                let vs = val(*src);
                let mut gs = vec![T::zero(); vs.data.len()];
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        gs[r * vs.cols + start + c] = g.data[r * g.cols + c];
                    }
                }
                self.accum(grads, *src, gs);
            }
            Op::RepeatRows(a, k) => {
                let va = val(*a);
                let mut ga = vec![T::zero(); va.data.len()];
                for r in 0..va.rows {
                    for j in 0..*k {
                        let src = g.row(r * k + j);
                        for c in 0..va.cols {
                            ga[r * va.cols + c] += src[c];
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let va = val(*a);
                let mut ga = vec![T::zero(); va.data.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..va.cols {
                        ga[i * va.cols + c] += g.data[r * va.cols + c];
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::SegmentSum(a, seg) => {
                let va = val(*a);
                let mut ga = Vec::with_capacity(va.data.len());
                for &s in seg {
                    ga.extend_from_slice(g.row(s));
                }
                self.accum(grads, *a, ga);
            }
            Op::CumsumExclusive(a) => {
                let mut ga = vec![T::zero(); g.data.len()];
                for r in 0..g.rows {
                    let mut acc = T::zero();
                    for c in (0..g.cols).rev() {
                        ga[r * g.cols + c] = acc;
                        acc += g.data[r * g.cols + c];
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::Interp(p, plan) => {
                let vp = val(*p);
                let ch = vp.cols;
                let mut gp = vec![T::zero(); vp.data.len()];
                for i in 0..plan.points() {
                    let go = g.row(i);
                    for k in 0..plan.taps {
                        let w = plan.weights[i * plan.taps + k];
                        if w == T::zero() {
                            continue;
                        }
                        let base = plan.offsets[i * plan.taps + k] as usize * ch;
                        for c in 0..ch {
                            gp[base + c] += w * go[c];
                        }
                    }
                }
                self.accum(grads, *p, gp);
            }
            Op::EnvLookup { env, dirs, height, width } => {
                let (e, d) = (val(*env), val(*dirs));
                let ch = e.cols;
                let mut ge = if self.rg(*env) { Some(vec![T::zero(); e.data.len()]) } else { None };
                let mut gd = if self.rg(*dirs) { Some(vec![T::zero(); d.data.len()]) } else { None };
                for i in 0..d.rows {
                    let dir = [d.data[i * 3], d.data[i * 3 + 1], d.data[i * 3 + 2]];
                    let (x, y, dxd, dyd) = equirect_coords(dir, *height, *width);
                    let (idx, w, fx, fy, live) = equirect_taps(x, y, *height, *width);
                    let go = g.row(i);
                    if let Some(ge) = ge.as_mut() {
                        for k in 0..4 {
                            for c in 0..ch {
                                ge[idx[k] * ch + c] += w[k] * go[c];
                            }
                        }
                    }
                    if let Some(gd) = gd.as_mut() {
                        let one = T::one();
                        let mut s_dx = T::zero();
                        let mut s_dy = T::zero();
                        for c in 0..ch {
                            let t = |k: usize| e.data[idx[k] * ch + c];
                            let dvdx = (one - fy) * (t(1) - t(0)) + fy * (t(3) - t(2));
                            let dvdy = if live { (one - fx) * (t(2) - t(0)) + fx * (t(3) - t(1)) } else { T::zero() };
                            s_dx += go[c] * dvdx;
                            s_dy += go[c] * dvdy;
                        }
                        for j in 0..3 {
                            gd[i * 3 + j] += s_dx * dxd[j] + s_dy * dyd[j];
                        }
                    }
                }
                if let Some(ge) = ge {
                    self.accum(grads, *env, ge);
                }
                if let Some(gd) = gd {
                    self.accum(grads, *dirs, gd);
                }
            }
        }
        Ok(())
    }
}
