use serde::{Deserialize, Serialize};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Axis-aligned box in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|a| self.max[a] > self.min[a] && self.min[a].is_finite() && self.max[a].is_finite())
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Maps `p` into `[0, 1]^3`, clamping points outside the box.
    pub fn normalize(&self, p: &Vec3) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] - self.min[a]) / (self.max[a] - self.min[a]);
            out[a] = u.clamp(0.0, 1.0);
        }
        out
    }

    /// Slab test. Returns the parametric interval `[t0, t1]` of the ray
    /// `origin + t * dir` inside the box, intersected with `[near, far]`.
    pub fn clip_ray(&self, origin: &Vec3, dir: &Vec3, near: f64, far: f64) -> Option<(f64, f64)> {
        let mut t0 = near;
        let mut t1 = far;
        for a in 0..3 {
            if dir[a].abs() < 1e-300 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let mut ta = (self.min[a] - origin[a]) * inv;
            let mut tb = (self.max[a] - origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_ray_through_unit_box() {
        let b = Aabb::new([-1.0; 3], [1.0; 3]);
        let (t0, t1) = b
            .clip_ray(&Vec3::new(0.0, 0.0, -5.0), &Vec3::z(), 0.1, 100.0)
            .unwrap();
        assert!((t0 - 4.0).abs() < 1e-12 && (t1 - 6.0).abs() < 1e-12);
        assert!(b
            .clip_ray(&Vec3::new(3.0, 0.0, -5.0), &Vec3::z(), 0.1, 100.0)
            .is_none());
        // starting inside: near wins
        let (t0, _) = b.clip_ray(&Vec3::zeros(), &Vec3::x(), 0.1, 100.0).unwrap();
        assert_eq!(t0, 0.1);
    }
}
