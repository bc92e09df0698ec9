use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BevFeatureGrid;
use crate::error::{Error, Result};
use crate::linalg::gemm;

const TAPS: usize = 9;

/// Zero-padded 3×3 convolution over an `h × w × c_in` map.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    pub c_in: usize,
    pub c_out: usize,
    /// `[tap][out][in]`, taps in row-major `(dy, dx)` order.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Column range `[c0, c1)` of outputs whose `dx` neighbor exists.
fn valid_cols(w: usize, dx: isize) -> (usize, usize) {
    ((-dx).max(0) as usize, (w as isize - dx.max(0)) as usize)
}

impl Conv3x3 {
    fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            weight: vec![0.0; TAPS * c_out * c_in],
            bias: vec![0.0; c_out],
        }
    }

    fn tap(&self, t: usize) -> &[f64] {
        &self.weight[t * self.c_out * self.c_in..(t + 1) * self.c_out * self.c_in]
    }

    /// Calls `f(tap, out_row, in_row, c0, m, dx)` for every row pair that
    /// overlaps under the tap offset.
    fn for_each_row(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
        for t in 0..TAPS {
            let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
            let (c0, c1) = valid_cols(w, dx);
            if c1 <= c0 {
                continue;
            }
            for r in 0..h {
                let sr = r as isize + dy;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                f(t, r, sr as usize, c0, c1 - c0, dx);
            }
        }
    }

    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (ci, co) = (self.c_in, self.c_out);
        assert_eq!(x.len(), h * w * ci);
        let mut y = Vec::with_capacity(h * w * co);
        for _ in 0..h * w {
            y.extend_from_slice(&self.bias);
        }
        Self::for_each_row(h, w, |t, r, sr, c0, m, dx| {
            let src = (sr * w + (c0 as isize + dx) as usize) * ci;
            let dst = (r * w + c0) * co;
            gemm(m, ci, co, &x[src..], (ci, 1), self.tap(t), (1, ci), 1.0, &mut y[dst..dst + m * co]);
        });
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], h: usize, w: usize, dy: &[f64], grads: &mut Conv3x3) -> Vec<f64> {
        let (ci, co) = (self.c_in, self.c_out);
        for px in dy.chunks_exact(co) {
            for (g, d) in grads.bias.iter_mut().zip(px) {
                *g += d;
            }
        }
        let mut dx_out = vec![0.0; h * w * ci];
        Self::for_each_row(h, w, |t, r, sr, c0, m, dx| {
            let src = (sr * w + (c0 as isize + dx) as usize) * ci;
            let dst = (r * w + c0) * co;
            let gt = &mut grads.weight[t * co * ci..(t + 1) * co * ci];
            // dW_t += dyᵀ · x_shifted
            gemm(co, m, ci, &dy[dst..], (1, co), &x[src..], (ci, 1), 1.0, gt);
            // dx_shifted += dy · W_t
            gemm(m, co, ci, &dy[dst..], (co, 1), self.tap(t), (ci, 1), 1.0, &mut dx_out[src..src + m * ci]);
        });
        dx_out
    }
}

/// Mixing stage applied to `[online, prior]` channel concatenation:
/// conv 3×3 → ReLU → conv 3×3, back to the online channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub online_channels: usize,
    pub prior_channels: usize,
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
}

impl FusionHead {
    pub fn zeros(online_channels: usize, prior_channels: usize, hidden: usize) -> Self {
        Self {
            online_channels,
            prior_channels,
            conv1: Conv3x3::zeros(online_channels + prior_channels, hidden),
            conv2: Conv3x3::zeros(hidden, online_channels),
        }
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn new(online_channels: usize, prior_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut head = Self::zeros(online_channels, prior_channels, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in [&mut head.conv1, &mut head.conv2] {
            let bound = (6.0 / (TAPS * conv.c_in) as f64).sqrt();
            conv.weight.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
        head
    }

    /// Passes the online channels through unchanged: hidden channels hold
    /// `relu(x)` and `relu(-x)`, the output takes their difference. Prior
    /// weights are zero.
    pub fn identity(online_channels: usize, prior_channels: usize) -> Self {
        let c = online_channels;
        let mut head = Self::zeros(c, prior_channels, 2 * c);
        let center = 4;
        let (c1_in, c2_in) = (head.conv1.c_in, head.conv2.c_in);
        let w1 = &mut head.conv1.weight[center * 2 * c * c1_in..];
        let w2 = &mut head.conv2.weight[center * c * c2_in..];
        for k in 0..c {
            w1[k * c1_in + k] = 1.0;
            w1[(k + c) * c1_in + k] = -1.0;
            w2[k * c2_in + k] = 1.0;
            w2[k * c2_in + k + c] = -1.0;
        }
        head
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.online_channels, self.prior_channels, self.conv1.c_out)
    }

    pub fn num_params(&self) -> usize {
        [&self.conv1, &self.conv2]
            .iter()
            .map(|c| c.weight.len() + c.bias.len())
            .sum()
    }

    /// Mutable views of `[conv1.weight, conv1.bias, conv2.weight, conv2.bias]`.
    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ]
    }
}

/// Activations kept by [`fuse_traced`] for [`fuse_backward`].
#[derive(Clone, Debug)]
pub struct FuseTrace {
    rows: usize,
    cols: usize,
    input: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuseGradients {
    pub head: FusionHead,
    pub online: Vec<f64>,
    pub prior: Vec<f64>,
}

fn check_shapes(online: &BevFeatureGrid, prior: &BevFeatureGrid, head: &FusionHead) -> Result<()> {
    if online.spec != prior.spec {
        return Err(Error::InvalidArgument("online and prior grids differ in extent or resolution".into()));
    }
    if head.online_channels == 0 {
        return Err(Error::InvalidArgument("the online grid needs at least one channel".into()));
    }
    if online.channels != head.online_channels || prior.channels != head.prior_channels {
        return Err(Error::InvalidArgument(format!(
            "head expects {} + {} channels, got {} + {}",
            head.online_channels, head.prior_channels, online.channels, prior.channels
        )));
    }
    Ok(())
}

/// Concatenates `[online, prior]` per bin and applies `head`. The output
/// has the online grid's shape.
pub fn fuse(online: &BevFeatureGrid, prior: &BevFeatureGrid, head: &FusionHead) -> Result<BevFeatureGrid> {
    Ok(fuse_traced(online, prior, head)?.0)
}

/// [`fuse`] plus the activations needed by [`fuse_backward`].
pub fn fuse_traced(
    online: &BevFeatureGrid,
    prior: &BevFeatureGrid,
    head: &FusionHead,
) -> Result<(BevFeatureGrid, FuseTrace)> {
    check_shapes(online, prior, head)?;
    let (h, w) = (online.rows(), online.cols());
    let (co, cp) = (online.channels, prior.channels);
    let mut input = Vec::with_capacity(h * w * (co + cp));
    for i in 0..h * w {
        input.extend_from_slice(&online.data[i * co..(i + 1) * co]);
        input.extend_from_slice(&prior.data[i * cp..(i + 1) * cp]);
    }
    let mut hidden = head.conv1.forward(&input, h, w);
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let out = head.conv2.forward(&hidden, h, w);
    Ok((
        BevFeatureGrid {
            spec: online.spec,
            channels: head.online_channels,
            data: out,
        },
        FuseTrace {
            rows: h,
            cols: w,
            input,
            hidden,
        },
    ))
}

/// Gradients of a scalar loss with `dL/d(output) = d_out` with respect to
/// the head parameters and both inputs.
pub fn fuse_backward(head: &FusionHead, trace: &FuseTrace, d_out: &[f64]) -> FuseGradients {
    let (h, w) = (trace.rows, trace.cols);
    let mut grads = head.zeros_like();
    let mut d_hidden = head.conv2.backward(&trace.hidden, h, w, d_out, &mut grads.conv2);
    for (d, v) in d_hidden.iter_mut().zip(&trace.hidden) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    let d_input = head.conv1.backward(&trace.input, h, w, &d_hidden, &mut grads.conv1);
    let (co, cp) = (head.online_channels, head.prior_channels);
    let mut online = Vec::with_capacity(h * w * co);
    let mut prior = Vec::with_capacity(h * w * cp);
    for px in d_input.chunks_exact(co + cp).take(h * w) {
        online.extend_from_slice(&px[..co]);
        prior.extend_from_slice(&px[co..]);
    }
    FuseGradients {
        head: grads,
        online,
        prior,
    }
}
