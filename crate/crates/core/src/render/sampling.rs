//! Depth placement along a ray: uniform bins and inverse-CDF resampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `n` depths in `[t0, t1]`, one per equal-width bin: the bin midpoint, or a
/// uniform draw inside the bin when `rng` is given.
pub fn sample_uniform(t0: f64, t1: f64, n: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let step = (t1 - t0) / n as f64;
    match rng {
        None => (0..n).map(|i| t0 + (i as f64 + 0.5) * step).collect(),
        Some(rng) => (0..n)
            .map(|i| (t0 + (i as f64 + rng.random::<f64>()) * step).min(t1))
            .collect(),
    }
}

/// Draws `n` sorted depths from the piecewise-constant density whose mass on
/// bin `[depths[i], depths[i+1])` is `weights[i]`; the last bin ends at
/// `t_end`. Quantiles are `(k + 0.5) / n`, or stratified when `rng` is
/// given. All-zero weights fall back to uniform over `[depths[0], t_end]`.
pub fn resample_from_weights(
    depths: &[f64],
    weights: &[f64],
    t_end: f64,
    n: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Vec<f64> {
    debug_assert_eq!(depths.len(), weights.len());
    if depths.is_empty() {
        return Vec::new();
    }
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    let quantiles: Vec<f64> = match rng {
        None => (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect(),
        Some(rng) => (0..n)
            .map(|k| (k as f64 + rng.random::<f64>()) / n as f64)
            .collect(),
    };
    let start = depths[0];
    if total <= 0.0 || !total.is_finite() {
        return quantiles
            .iter()
            .map(|u| start + u * (t_end - start))
            .collect();
    }
    // cdf[i] = mass before bin i
    let mut cdf = Vec::with_capacity(depths.len() + 1);
    let mut acc = 0.0;
    cdf.push(0.0);
    for w in weights {
        acc += w.max(0.0) / total;
        cdf.push(acc);
    }
    let last = depths.len() - 1;
    let mut out = Vec::with_capacity(n);
    let mut bin = 0;
    for u in quantiles {
        let u = u.min(cdf[depths.len()]);
        // quantiles ascend, so the bin index only moves forward;
        // zero-mass bins are stepped over by the strict comparison
        while bin < last && cdf[bin + 1] <= u {
            bin += 1;
        }
        let mut b = bin;
        let mut frac = 1.0;
        if cdf[b + 1] > cdf[b] {
            frac = ((u - cdf[b]) / (cdf[b + 1] - cdf[b])).clamp(0.0, 1.0);
        } else {
            // rounding left u past the total mass: end of the last live bin
            while weights[b] <= 0.0 {
                b -= 1;
            }
        }
        let lo = depths[b];
        let hi = if b == last { t_end } else { depths[b + 1] };
        let t = lo + frac * (hi - lo);
        out.push(match out.last() {
            Some(&prev) if t < prev => prev,
            _ => t,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn two_midpoints() {
        assert_eq!(sample_uniform(0.0, 1.0, 2, None), vec![0.25, 0.75]);
    }

    #[test]
    fn stratified_is_reproducible_and_in_range() {
        let a = sample_uniform(1.0, 3.0, 50, Some(&mut ChaCha8Rng::seed_from_u64(4)));
        let b = sample_uniform(1.0, 3.0, 50, Some(&mut ChaCha8Rng::seed_from_u64(4)));
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert!(a.iter().all(|&t| (1.0..=3.0).contains(&t)));
    }

    #[test]
    fn stratified_passes_ks_against_uniform() {
        let n = 1000;
        let s = sample_uniform(0.0, 1.0, n, Some(&mut ChaCha8Rng::seed_from_u64(9)));
        let mut d: f64 = 0.0;
        for (i, &x) in s.iter().enumerate() {
            d = d.max(((i + 1) as f64 / n as f64 - x).abs()).max((x - i as f64 / n as f64).abs());
        }
        // critical value at significance 0.001
        assert!(d < 1.95 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn concentrated_weight_stays_in_bin() {
        let depths = [0.0, 1.0, 2.0, 3.0];
        let weights = [0.0, 0.0, 1.0, 0.0];
        for rng in [None, Some(ChaCha8Rng::seed_from_u64(2))] {
            let mut rng = rng;
            let s = resample_from_weights(&depths, &weights, 4.0, 64, rng.as_mut());
            assert!(s.iter().all(|&t| (2.0..=3.0).contains(&t)), "{s:?}");
        }
    }

    #[test]
    fn last_bin_extends_to_end() {
        let s = resample_from_weights(&[0.0, 1.0], &[0.0, 1.0], 5.0, 4, None);
        assert_eq!(s, vec![1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn width_proportional_weights_reduce_to_uniform() {
        let depths = [0.5, 1.0, 2.5, 3.0];
        let weights = [0.5, 1.5, 0.5, 1.0];
        let s = resample_from_weights(&depths, &weights, 4.0, 7, None);
        let u = sample_uniform(0.5, 4.0, 7, None);
        for (a, b) in s.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let s = resample_from_weights(&[1.0, 2.0, 3.0], &[0.0; 3], 4.0, 6, None);
        assert_eq!(s, sample_uniform(1.0, 4.0, 6, None));
    }

    #[test]
    fn bin_frequencies_follow_weights() {
        let depths = [0.0, 0.3, 0.5, 1.2, 2.0, 2.1];
        let weights = [0.1, 0.0, 0.45, 0.05, 0.3, 0.1];
        let total: f64 = weights.iter().sum();
        let n = 100_000;
        let mut counts = [0usize; 6];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // independent draws: one quantile per call
        for _ in 0..n {
            let t = resample_from_weights(&depths, &weights, 3.0, 1, Some(&mut rng))[0];
            let b = depths.partition_point(|&d| d <= t) - 1;
            counts[b] += 1;
        }
        for (b, &c) in counts.iter().enumerate() {
            let p = weights[b] / total;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((c as f64 - n as f64 * p).abs() <= 4.0 * sd, "bin {b}: {c} vs {}", n as f64 * p);
        }
    }

    #[test]
    fn output_is_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let depths: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let weights: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let s = resample_from_weights(&depths, &weights, 10.0, 33, Some(&mut rng));
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.iter().all(|&t| (0.0..=10.0).contains(&t)));
    }
}
