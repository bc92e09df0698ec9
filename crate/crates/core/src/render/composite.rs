//! Opacity, transmittance and weights along one ray, and their adjoint.

/// Per-sample compositing state for depths `t¹ < … < tᴺ`, where sample `i`
/// covers `[tⁱ, tⁱ⁺¹)` and the last one covers `[tᴺ, t_end]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Compositing {
    pub deltas: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `T¹ … Tᴺ⁺¹`; `T¹ = 1`.
    pub transmittance: Vec<f64>,
    /// `wⁱ = Tⁱ αⁱ`.
    pub weights: Vec<f64>,
}

pub fn interval_widths(depths: &[f64], t_end: f64) -> Vec<f64> {
    let n = depths.len();
    (0..n)
        .map(|i| {
            let next = if i + 1 < n { depths[i + 1] } else { t_end };
            (next - depths[i]).max(0.0)
        })
        .collect()
}

impl Compositing {
    pub fn new(depths: &[f64], t_end: f64, sigma: &[f64]) -> Self {
        debug_assert_eq!(depths.len(), sigma.len());
        let deltas = interval_widths(depths, t_end);
        let n = depths.len();
        let mut alpha = Vec::with_capacity(n);
        let mut transmittance = Vec::with_capacity(n + 1);
        let mut weights = Vec::with_capacity(n);
        let mut t = 1.0;
        transmittance.push(t);
        for i in 0..n {
            let a = -(-sigma[i] * deltas[i]).exp_m1();
            alpha.push(a);
            weights.push(t * a);
            t *= 1.0 - a;
            transmittance.push(t);
        }
        Self {
            deltas,
            alpha,
            transmittance,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `O = Σ wⁱ`.
    pub fn opacity(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Maps `∂L/∂wⁱ` to `∂L/∂σⁱ`:
    /// `δⁱ (gⁱ Tⁱ⁺¹ − Σ_{k>i} gᵏ wᵏ)`.
    pub fn sigma_gradient(&self, d_weights: &[f64]) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n];
        let mut tail = 0.0;
        for i in (0..n).rev() {
            out[i] = self.deltas[i] * (d_weights[i] * self.transmittance[i + 1] - tail);
            tail += d_weights[i] * self.weights[i];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transmittance_recurrence() {
        let c = Compositing::new(&[0.0, 1.0, 1.5], 3.0, &[0.2, 1.0, 0.5]);
        assert_eq!(c.deltas, vec![1.0, 0.5, 1.5]);
        assert_eq!(c.transmittance[0], 1.0);
        for i in 0..3 {
            assert!((c.transmittance[i + 1] - c.transmittance[i] * (1.0 - c.alpha[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn sigma_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let depths = [0.1, 0.4, 0.45, 1.0, 1.7];
        let sigma: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
        let g: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |s: &[f64]| -> f64 {
            Compositing::new(&depths, 2.0, s)
                .weights
                .iter()
                .zip(&g)
                .map(|(w, g)| w * g)
                .sum()
        };
        let analytic = Compositing::new(&depths, 2.0, &sigma).sigma_gradient(&g);
        for i in 0..5 {
            let mut p = sigma.clone();
            let mut m = sigma.clone();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - analytic[i]).abs() < 1e-8, "{i}: {fd} vs {}", analytic[i]);
        }
    }
}
