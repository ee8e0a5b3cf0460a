use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, Mat, Real, Var};

/// Sinusoidal positional encoding: `[x, sin(2^0 pi x), cos(2^0 pi x), ...]`
/// with one sin/cos block of width `dims` per frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl Default for PositionalEncoding {
    fn default() -> Self {
        PositionalEncoding { num_frequencies: 6, include_input: true }
    }
}

impl PositionalEncoding {
    pub fn width(&self, dims: usize) -> usize {
        dims * usize::from(self.include_input) + dims * 2 * self.num_frequencies
    }

    /// Encoding of constant inputs (no gradient), computed directly.
    pub fn encode_const<T: Real>(&self, x: &Mat<T>) -> Mat<T> {
        let dims = x.cols;
        let w = self.width(dims);
        let mut data = Vec::with_capacity(x.rows * w);
        for r in 0..x.rows {
            let row = x.row(r);
            if self.include_input {
                data.extend_from_slice(row);
            }
            for k in 0..self.num_frequencies {
                let f = T::lit((1u64 << k) as f64) * T::PI();
                data.extend(row.iter().map(|&v| (f * v).sin()));
                data.extend(row.iter().map(|&v| (f * v).cos()));
            }
        }
        Mat::new(x.rows, w, data)
    }

    /// Differentiable encoding of a graph value.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        if !g.requires_grad(x) {
            let m = self.encode_const(g.value(x));
            return g.constant(m);
        }
        let mut parts = Vec::with_capacity(1 + 2 * self.num_frequencies);
        if self.include_input {
            parts.push(x);
        }
        for k in 0..self.num_frequencies {
            let s = g.scale(x, T::lit((1u64 << k) as f64) * T::PI());
            parts.push(g.sin(s));
            parts.push(g.cos(s));
        }
        g.concat_cols(&parts)
    }
}
