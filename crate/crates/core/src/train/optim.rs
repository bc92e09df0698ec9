//! AdamW with decoupled weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub state: Vec<Moments>,
}

impl AdamW {
    /// One moment buffer per tensor, sized from `sizes`.
    pub fn new(config: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            config,
            step: 0,
            state: sizes
                .into_iter()
                .map(|n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    /// Advances the step counter, then updates each `(param, grad)` pair with
    /// its own moments.
    pub fn step<'a>(&mut self, lr: f64, tensors: impl IntoIterator<Item = (&'a mut [f64], &'a [f64])>) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for ((p, g), st) in tensors.into_iter().zip(&mut self.state) {
            debug_assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                let gi = g[i];
                let m = beta1 * st.m[i] + (1.0 - beta1) * gi;
                let v = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                st.m[i] = m;
                st.v[i] = v;
                p[i] = p[i] * decay - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            }
        }
    }
}

/// `base · factor^k`, where `k` counts the milestones (fractions of
/// `iterations`) already reached at `step` (0-based).
pub fn scheduled_lr(base: f64, factor: f64, milestones: &[f64], iterations: usize, step: usize) -> f64 {
    let passed = milestones
        .iter()
        .filter(|&&m| step >= milestone_step(m, iterations))
        .count();
    base * factor.powi(passed as i32)
}

pub fn milestone_step(fraction: f64, iterations: usize) -> usize {
    (fraction * iterations as f64).round() as usize
}

/// Scales `grads` in place so that their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut [f64]>, max_norm: f64) -> f64 {
    let grads: Vec<&mut [f64]> = grads.into_iter().collect();
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, [3]);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            opt.step(0.01, [(&mut p[..], &[0.0; 3][..])]);
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn single_step_by_hand() {
        let mut opt = AdamW::new(AdamWConfig::default(), [1]);
        let mut p = vec![1.0];
        opt.step(0.01, [(&mut p[..], &[1.0][..])]);
        // m̂ = 1, v̂ = 1: p ← p(1 − lr·wd) − lr / (1 + eps)
        let expect = 1.0 * (1.0 - 0.01 * 1e-5) - 0.01 / (1.0 + 1e-15);
        assert!((p[0] - expect).abs() < 1e-15, "{} vs {expect}", p[0]);
        // second step with the same gradient moves by the same amount
        opt.step(0.01, [(&mut p[..], &[1.0][..])]);
        let expect2 = expect * (1.0 - 1e-7) - 0.01;
        assert!((p[0] - expect2).abs() < 1e-12);
    }

    #[test]
    fn tensors_keep_separate_state() {
        let mut opt = AdamW::new(AdamWConfig::default(), [1, 1]);
        let mut a = vec![0.0];
        let mut b = vec![0.0];
        opt.step(0.1, [(&mut a[..], &[1.0][..]), (&mut b[..], &[0.0][..])]);
        opt.step(0.1, [(&mut a[..], &[0.0][..]), (&mut b[..], &[-3.0][..])]);
        assert!((opt.state[1].m[0] + 0.3).abs() < 1e-15);
        assert!(b[0] > 0.0 && a[0] < 0.0);
        let mut solo = AdamW::new(AdamWConfig::default(), [1]);
        let mut c = vec![0.0];
        solo.step(0.1, [(&mut c[..], &[1.0][..])]);
        solo.step(0.1, [(&mut c[..], &[0.0][..])]);
        assert_eq!(a, c);
    }

    #[test]
    fn schedule_is_exact() {
        let lr = |s| scheduled_lr(0.01, 0.33, &[0.25, 0.5, 0.75], 100, s);
        assert_eq!(lr(0), 0.01);
        assert_eq!(lr(24), 0.01);
        assert_eq!(lr(25), 0.01 * 0.33);
        assert_eq!(lr(50), 0.01 * 0.33f64.powi(2));
        assert_eq!(lr(74), 0.01 * 0.33f64.powi(2));
        assert_eq!(lr(99), 0.01 * 0.33f64.powi(3));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut a = vec![3.0, 0.0];
        let mut b = vec![4.0];
        let n = clip_global_norm([&mut a[..], &mut b[..]], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
        let mut c = vec![0.1];
        assert_eq!(clip_global_norm([&mut c[..]], 1.0), 0.1);
        assert_eq!(c, vec![0.1]);
    }
}
