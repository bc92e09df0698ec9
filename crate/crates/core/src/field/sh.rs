//! Real spherical harmonics (degree ≤ 4), orthonormal with Condon–Shortley
//! phase.

pub const MAX_DEGREE: u32 = 4;

pub fn sh_dim(degree: u32) -> usize {
    (degree * degree) as usize
}

/// Writes the first `degree²` real SH basis values of unit direction `d`.
pub fn sh_encode_into(d: &[f64; 3], degree: u32, out: &mut [f64]) {
    assert!(
        (1..=MAX_DEGREE).contains(&degree),
        "SH degree must be in 1..=4, got {degree}"
    );
    let [x, y, z] = *d;
    out[0] = 0.282_094_791_773_878_14;
    if degree <= 1 {
        return;
    }
    out[1] = -0.488_602_511_902_919_87 * y;
    out[2] = 0.488_602_511_902_919_87 * z;
    out[3] = -0.488_602_511_902_919_87 * x;
    if degree <= 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = 1.092_548_430_592_079_2 * x * y;
    out[5] = -1.092_548_430_592_079_2 * y * z;
    out[6] = 0.946_174_695_757_559_97 * zz - 0.315_391_565_252_519_99;
    out[7] = -1.092_548_430_592_079_2 * x * z;
    out[8] = 0.546_274_215_296_039_59 * (xx - yy);
    if degree <= 3 {
        return;
    }
    out[9] = 0.590_043_589_926_643_52 * y * (-3.0 * xx + yy);
    out[10] = 2.890_611_442_640_553_8 * x * y * z;
    out[11] = 0.457_045_799_464_465_72 * y * (1.0 - 5.0 * zz);
    out[12] = 0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0);
    out[13] = 0.457_045_799_464_465_72 * x * (1.0 - 5.0 * zz);
    out[14] = 1.445_305_721_320_276_9 * z * (xx - yy);
    out[15] = 0.590_043_589_926_643_52 * x * (-xx + 3.0 * yy);
}

pub fn sh_encode(d: &[f64; 3], degree: u32) -> Vec<f64> {
    let mut out = vec![0.0; sh_dim(degree)];
    sh_encode_into(d, degree, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn degree_one_is_constant() {
        let v = sh_encode(&[0.0, 1.0, 0.0], 1);
        assert_eq!(v.len(), 1);
        assert!((v[0] - 1.0 / (2.0 * PI.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn z_axis_has_no_xy_terms() {
        let v = sh_encode(&[0.0, 0.0, 1.0], 2);
        assert_eq!(v.len(), 4);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn addition_theorem() {
        // Σ_m Y_lm(d)² = (2l+1)/4π, so the first L bands sum to L²/4π
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let mut d = [0.0f64; 3];
            for v in &mut d {
                *v = rng.random_range(-1.0..1.0);
            }
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if n < 1e-3 {
                continue;
            }
            d.iter_mut().for_each(|v| *v /= n);
            for degree in 1..=4 {
                let s: f64 = sh_encode(&d, degree).iter().map(|v| v * v).sum();
                let expected = (degree * degree) as f64 / (4.0 * PI);
                assert!((s - expected).abs() < 1e-12, "degree {degree}: {s} vs {expected}");
            }
        }
    }
}
