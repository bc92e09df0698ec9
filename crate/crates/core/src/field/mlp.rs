//! Fully connected network with ReLU hidden layers and a linear output,
//! evaluated on row-major batches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::gemm;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations recorded by [`Mlp::forward`]: the input of every layer and the
/// final (pre-output-activation) values.
#[derive(Clone, Debug, Default)]
pub struct MlpTrace {
    pub rows: usize,
    inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`, all zero.
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        Self {
            layers: dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    /// Kaiming-uniform weights (`±sqrt(6 / fan_in)`), zero biases.
    pub fn new(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut m = Self::zeros(dims);
        for layer in &mut m.layers {
            let bound = (6.0 / layer.in_dim as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.random_range(-bound..bound);
            }
        }
        m
    }

    pub fn zeros_like(&self) -> Self {
        let mut dims = vec![self.in_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        Self::zeros(&dims)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, input: &[f64], rows: usize) -> MlpTrace {
        assert_eq!(input.len(), rows * self.in_dim());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (n_in, n_out) = (layer.in_dim, layer.out_dim);
            let mut y = Vec::with_capacity(rows * n_out);
            for _ in 0..rows {
                y.extend_from_slice(&layer.bias);
            }
            // y += x · Wᵀ
            gemm(rows, n_in, n_out, &x, (n_in, 1), &layer.weight, (1, n_in), 1.0, &mut y);
            if i + 1 < self.layers.len() {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            inputs.push(x);
            x = y;
        }
        MlpTrace {
            rows,
            inputs,
            output: x,
        }
    }

    pub fn forward_one(&self, input: &[f64]) -> Vec<f64> {
        self.forward(input, 1).output
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input batch when `want_input` is set.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        d_out: &[f64],
        grads: &mut Mlp,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let rows = trace.rows;
        assert_eq!(d_out.len(), rows * self.out_dim());
        let mut delta = d_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            let (n_in, n_out) = (layer.in_dim, layer.out_dim);
            let g = &mut grads.layers[i];
            for r in 0..rows {
                for (gb, d) in g.bias.iter_mut().zip(&delta[r * n_out..(r + 1) * n_out]) {
                    *gb += d;
                }
            }
            // dW += δᵀ · x
            gemm(n_out, rows, n_in, &delta, (1, n_out), x, (n_in, 1), 1.0, &mut g.weight);
            if i == 0 && !want_input {
                return None;
            }
            let mut dx = vec![0.0; rows * n_in];
            gemm(rows, n_out, n_in, &delta, (n_out, 1), &layer.weight, (n_in, 1), 0.0, &mut dx);
            if i > 0 {
                // ReLU: x holds post-activation values of the previous layer
                for (dv, xv) in dx.iter_mut().zip(x) {
                    if *xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            delta = dx;
        }
        Some(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_network_outputs_bias() {
        let mut m = Mlp::zeros(&[3, 4, 2]);
        m.layers[1].bias = vec![0.5, -1.0];
        assert_eq!(m.forward_one(&[1.0, 2.0, 3.0]), vec![0.5, -1.0]);
    }

    #[test]
    fn batch_rows_match_single_rows() {
        let m = Mlp::new(&[5, 8, 8, 3], &mut ChaCha8Rng::seed_from_u64(1));
        let input: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
        let batch = m.forward(&input, 4).output;
        for r in 0..4 {
            assert_eq!(&batch[r * 3..r * 3 + 3], m.forward_one(&input[r * 5..r * 5 + 5]).as_slice());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = Mlp::new(&[3, 6, 6, 2], &mut ChaCha8Rng::seed_from_u64(2));
        for l in &mut m.layers {
            for b in &mut l.bias {
                *b = 0.1;
            }
        }
        let input = [0.3, -0.7, 1.1, 0.9, 0.2, -0.4];
        let loss = |m: &Mlp, x: &[f64]| -> f64 {
            let y = m.forward(x, 2).output;
            y.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum()
        };
        let trace = m.forward(&input, 2);
        let d_out: Vec<f64> = trace
            .output
            .iter()
            .enumerate()
            .map(|(i, v)| 2.0 * (i as f64 + 1.0) * v)
            .collect();
        let mut grads = m.zeros_like();
        let dx = m.backward(&trace, &d_out, &mut grads, true).unwrap();
        let h = 1e-6;
        for li in 0..m.layers.len() {
            for wi in 0..m.layers[li].weight.len() {
                let mut p = m.clone();
                p.layers[li].weight[wi] += h;
                let mut q = m.clone();
                q.layers[li].weight[wi] -= h;
                let fd = (loss(&p, &input) - loss(&q, &input)) / (2.0 * h);
                assert!((fd - grads.layers[li].weight[wi]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
        for i in 0..input.len() {
            let mut a = input;
            a[i] += h;
            let mut b = input;
            b[i] -= h;
            let fd = (loss(&m, &a) - loss(&m, &b)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}
