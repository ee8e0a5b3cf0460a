use rand::Rng;

use crate::diffmath::{Graph, Real, Tensor, Var};

/// Layer widths of a fully connected network, input first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub widths: Vec<usize>,
}

impl MlpShape {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        MlpShape { widths }
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Two tensors per layer: weight `[in, out]`, bias `[1, out]`.
    pub fn tensor_count(&self) -> usize {
        2 * self.layers()
    }

    /// He-uniform weights, zero biases; the last bias is set to `out_bias`.
    pub fn init(&self, rng: &mut impl Rng, out_bias: &[f32]) -> Vec<Tensor> {
        let mut ts = Vec::with_capacity(self.tensor_count());
        for l in 0..self.layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            let bound = (6.0 / i as f32).sqrt();
            ts.push(Tensor::from_fn(vec![i, o], |_| rng.gen_range(-bound..bound)));
            if l + 1 == self.layers() {
                ts.push(Tensor::from_fn(vec![1, o], |j| out_bias[j % out_bias.len().max(1)]));
            } else {
                ts.push(Tensor::zeros(vec![1, o]));
            }
        }
        ts
    }

    pub fn zeros(&self) -> Vec<Tensor> {
        (0..self.layers())
            .flat_map(|l| {
                let (i, o) = (self.widths[l], self.widths[l + 1]);
                [Tensor::zeros(vec![i, o]), Tensor::zeros(vec![1, o])]
            })
            .collect()
    }
}

/// ReLU hidden layers, linear output (pre-activation logits).
pub fn mlp_forward<T: Real>(g: &mut Graph<T>, layers: &[Var], input: Var) -> Var {
    let mut h = input;
    let n = layers.len() / 2;
    for l in 0..n {
        let z = g.matmul(h, layers[2 * l]);
        h = g.add(z, layers[2 * l + 1]);
        if l + 1 < n {
            h = g.relu(h);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Mat;
    use rand::SeedableRng;

    #[test]
    fn forward_matches_hand_computation() {
        let shape = MlpShape::new(2, &[2], 1);
        let mut g = Graph::<f64>::new();
        let w1 = g.constant(Mat::new(2, 2, vec![1.0, -1.0, 2.0, 0.5]));
        let b1 = g.constant(Mat::new(1, 2, vec![0.0, -3.0]));
        let w2 = g.constant(Mat::new(2, 1, vec![1.0, 10.0]));
        let b2 = g.constant(Mat::new(1, 1, vec![0.25]));
        let x = g.constant(Mat::new(1, 2, vec![1.0, 1.0]));
        let y = mlp_forward(&mut g, &[w1, b1, w2, b2], x);
        // hidden = relu([3, -2.5]) = [3, 0]
        assert_eq!(g.value(y).data, vec![3.25]);
        assert_eq!(shape.tensor_count(), 4);
    }

    #[test]
    fn init_shapes_and_output_bias() {
        let shape = MlpShape::new(47, &[64, 64], 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let ts = shape.init(&mut rng, &[-3.0]);
        let shapes: Vec<_> = ts.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![47, 64], vec![1, 64], vec![64, 64], vec![1, 64], vec![64, 3], vec![1, 3]]);
        assert_eq!(ts[5].data(), &[-3.0, -3.0, -3.0]);
        assert!(ts[1].data().iter().all(|&b| b == 0.0));
    }
}
