use super::*;
use crate::extract::{voxel_downsample, SurfacePoint};
use crate::geometry::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cell(p: [f64; 3], f: &[f32], w: f64) -> QueriedCell {
    QueriedCell {
        position: Vec3::from(p),
        feature: f.to_vec(),
        weight: w,
    }
}

fn small_spec() -> GridSpec {
    GridSpec {
        x_range: (-2.0, 2.0),
        y_range: (-1.5, 1.0),
        z_range: (-1.0, 1.0),
        resolution: 0.5,
    }
}

fn random_cells(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<QueriedCell> {
    (0..n)
        .map(|_| {
            let p = [rng.random_range(-2.5..2.5), rng.random_range(-2.0..1.5), rng.random_range(-1.2..1.2)];
            let f: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            cell(p, &f, rng.random_range(1..5) as f64)
        })
        .collect()
}

#[test]
fn grid_shape_rounds_up() {
    let s = GridSpec::default();
    assert_eq!((s.rows(), s.cols(), s.depth()), (100, 200, 16));
    let s = GridSpec { resolution: 0.3, ..small_spec() };
    assert_eq!((s.rows(), s.cols()), (9, 14));
    assert!(GridSpec { resolution: 0.0, ..small_spec() }.validate().is_err());
    assert!(GridSpec { x_range: (1.0, 1.0), ..small_spec() }.validate().is_err());
}

#[test]
fn single_cell_lands_in_the_center_bin() {
    let spec = GridSpec::default();
    let g = rasterize_bev(&[cell([0.0, 0.0, 0.0], &[0.25, -2.0], 1.0)], &spec, 8).unwrap();
    assert_eq!(g.channels, 16);
    let nonzero: Vec<usize> = (0..g.data.len()).filter(|&i| g.data[i] != 0.0).collect();
    let center = g.at(spec.rows() / 2, spec.cols() / 2);
    // z = 0 is in slab 3 of [-3, 5) split 8 ways
    assert_eq!(&center[6..8], &[0.25, -2.0]);
    assert_eq!(nonzero.len(), 2);
}

#[test]
fn shared_bin_takes_the_weighted_mean() {
    let cells = [cell([0.1, 0.1, 0.1], &[1.0], 1.0), cell([0.2, 0.3, 0.2], &[5.0], 3.0)];
    let g = rasterize_bev(&cells, &small_spec(), 1).unwrap();
    let (r, c) = small_spec().bev_bin(0.1, 0.1).unwrap();
    assert_eq!(g.at(r, c), &[(1.0 + 3.0 * 5.0) / 4.0]);
    let v = rasterize_3d(&cells, &small_spec()).unwrap();
    assert_eq!(v.at(2, r, c), &[4.0]);
}

#[test]
fn bev_matches_brute_force_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cells = random_cells(&mut rng, 400, 3);
    let spec = small_spec();
    let slabs = 4;
    let (g, weights) = rasterize_bev_weighted(&cells, &spec, slabs).unwrap();
    let res = spec.resolution;
    let slab = 0.5;
    for r in 0..spec.rows() {
        for c in 0..spec.cols() {
            for h in 0..slabs {
                let (x0, y0, z0) = (-2.0 + c as f64 * res, -1.5 + r as f64 * res, -1.0 + h as f64 * slab);
                let members: Vec<&QueriedCell> = cells
                    .iter()
                    .filter(|q| {
                        let p = q.position;
                        p.x >= x0 && p.x < x0 + res && p.y >= y0 && p.y < y0 + res && p.z >= z0 && p.z < z0 + slab
                    })
                    .collect();
                let w: f64 = members.iter().map(|q| q.weight).sum();
                assert_eq!(weights[(r * spec.cols() + c) * slabs + h], w);
                for d in 0..3 {
                    let s: f64 = members.iter().map(|q| q.weight * q.feature[d] as f64).sum();
                    let expected = if w > 0.0 { s / w } else { 0.0 };
                    let got = g.at(r, c)[h * 3 + d];
                    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
                }
            }
        }
    }
}

#[test]
fn voxels_match_brute_force_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cells = random_cells(&mut rng, 300, 2);
    let spec = small_spec();
    let (v, weights) = rasterize_3d_weighted(&cells, &spec).unwrap();
    let res = spec.resolution;
    for l in 0..spec.depth() {
        for r in 0..spec.rows() {
            for c in 0..spec.cols() {
                let lo = Vec3::new(-2.0 + c as f64 * res, -1.5 + r as f64 * res, -1.0 + l as f64 * res);
                let members: Vec<&QueriedCell> = cells
                    .iter()
                    .filter(|q| (0..3).all(|a| q.position[a] >= lo[a] && q.position[a] < lo[a] + res))
                    .collect();
                let w: f64 = members.iter().map(|q| q.weight).sum();
                assert_eq!(weights[(l * spec.rows() + r) * spec.cols() + c], w);
                for d in 0..2 {
                    let s: f64 = members.iter().map(|q| q.weight * q.feature[d] as f64).sum();
                    let expected = if w > 0.0 { s / w } else { 0.0 };
                    assert!((v.at(l, r, c)[d] - expected).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn unit_weights_conserve_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cells = random_cells(&mut rng, 1000, 1);
    cells.iter_mut().for_each(|c| c.weight = 1.0);
    let spec = small_spec();
    let inside = cells
        .iter()
        .filter(|c| spec.bev_bin(c.position.x, c.position.y).is_some() && c.position.z >= -1.0 && c.position.z < 1.0)
        .count();
    let (_, w) = rasterize_bev_weighted(&cells, &spec, 3).unwrap();
    assert_eq!(w.iter().sum::<f64>(), inside as f64);
    let everything = GridSpec {
        x_range: (-3.0, 3.0),
        y_range: (-3.0, 3.0),
        z_range: (-2.0, 2.0),
        resolution: 0.5,
    };
    let (_, w) = rasterize_bev_weighted(&cells, &everything, 2).unwrap();
    assert_eq!(w.iter().sum::<f64>(), 1000.0);
}

#[test]
fn moving_the_ego_by_one_bin_shifts_the_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts: Vec<SurfacePoint> = (0..2000)
        .map(|_| SurfacePoint {
            position: Vec3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-0.9..0.9)),
            feature: vec![rng.random_range(-1.0f32..1.0)],
            video_id: 0,
            pixel: (0, 0),
        })
        .collect();
    let prior = voxel_downsample(&pts, 0.5, Vec3::zeros()).unwrap();
    let spec = GridSpec {
        x_range: (-4.0, 4.0),
        y_range: (-3.0, 3.0),
        z_range: (-1.0, 1.0),
        resolution: 0.5,
    };
    let half = Vec3::new(100.0, 100.0, 100.0);
    let raster = |center: Vec3| rasterize_bev(&prior.query_region(&center, &half, 0.0), &spec, 2).unwrap();
    let a = raster(Vec3::zeros());
    let b = raster(Vec3::new(0.5, 0.0, 0.0));
    let c = raster(Vec3::new(0.0, 0.5, 0.0));
    for r in 0..spec.rows() {
        for col in 0..spec.cols() - 1 {
            assert_eq!(b.at(r, col), a.at(r, col + 1));
        }
    }
    for r in 0..spec.rows() - 1 {
        for col in 0..spec.cols() {
            assert_eq!(c.at(r, col), a.at(r + 1, col));
        }
    }
}

fn random_grid(spec: GridSpec, channels: usize, rng: &mut ChaCha8Rng) -> BevFeatureGrid {
    let mut g = BevFeatureGrid::zeros(spec, channels);
    g.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    g
}

/// Direct 3×3 convolution with zero padding.
fn naive_conv(conv: &Conv3x3, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut y = vec![0.0; h * w * conv.c_out];
    for r in 0..h {
        for c in 0..w {
            for o in 0..conv.c_out {
                let mut s = conv.bias[o];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sr, sc) = (r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                        if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                            continue;
                        }
                        for i in 0..conv.c_in {
                            let wt = conv.weight[((ky * 3 + kx) * conv.c_out + o) * conv.c_in + i];
                            s += wt * x[(sr as usize * w + sc as usize) * conv.c_in + i];
                        }
                    }
                }
                y[(r * w + c) * conv.c_out + o] = s;
            }
        }
    }
    y
}

#[test]
fn convolution_matches_direct_loops() {
    let head = FusionHead::new(3, 2, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(1, 1), (1, 5), (4, 1), (5, 7)] {
        let x: Vec<f64> = (0..h * w * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = head.conv1.forward(&x, h, w);
        let slow = naive_conv(&head.conv1, &x, h, w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_head_with_zero_prior_returns_online() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = small_spec();
    let online = random_grid(spec, 4, &mut rng);
    let prior = BevFeatureGrid::zeros(spec, 6);
    let out = fuse(&online, &prior, &FusionHead::identity(4, 6)).unwrap();
    assert_eq!(out.channels, 4);
    for (a, b) in out.data.iter().zip(&online.data) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn concatenation_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = small_spec();
    let online = random_grid(spec, 3, &mut rng);
    let prior = random_grid(spec, 3, &mut rng);
    for head in [FusionHead::identity(3, 3), FusionHead::new(3, 3, 5, 8)] {
        let ab = fuse(&online, &prior, &head).unwrap();
        let ba = fuse(&prior, &online, &head).unwrap();
        assert_ne!(ab, ba);
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let spec = small_spec();
    let head = FusionHead::identity(2, 2);
    let a = BevFeatureGrid::zeros(spec, 2);
    let other = BevFeatureGrid::zeros(GridSpec { resolution: 0.25, ..spec }, 2);
    assert!(fuse(&a, &other, &head).is_err());
    assert!(fuse(&a, &BevFeatureGrid::zeros(spec, 3), &head).is_err());
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = GridSpec {
        x_range: (0.0, 2.5),
        y_range: (0.0, 2.0),
        z_range: (0.0, 1.0),
        resolution: 0.5,
    };
    let online = random_grid(spec, 2, &mut rng);
    let prior = random_grid(spec, 3, &mut rng);
    let mut head = FusionHead::new(2, 3, 4, 10);
    for b in head.conv1.bias.iter_mut().chain(head.conv2.bias.iter_mut()) {
        *b = rng.random_range(-0.3..0.3);
    }
    let readout: Vec<f64> = (0..spec.rows() * spec.cols() * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |h: &FusionHead, on: &BevFeatureGrid, pr: &BevFeatureGrid| -> f64 {
        fuse(on, pr, h).unwrap().data.iter().zip(&readout).map(|(a, b)| a * b).sum()
    };
    let (_, trace) = fuse_traced(&online, &prior, &head).unwrap();
    let g = fuse_backward(&head, &trace, &readout);
    let eps = 1e-4;
    let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) || (fd - an).abs() < 1e-8;
    let mut g_head = g.head.clone();
    let analytic: Vec<Vec<f64>> = g_head.params_mut().iter().map(|p| p.to_vec()).collect();
    for k in 0..4 {
        for i in 0..analytic[k].len() {
            let mut p = head.clone();
            p.params_mut()[k][i] += eps;
            let mut q = head.clone();
            q.params_mut()[k][i] -= eps;
            let fd = (loss(&p, &online, &prior) - loss(&q, &online, &prior)) / (2.0 * eps);
            assert!(close(fd, analytic[k][i]), "param {k}[{i}]: fd {fd} vs {}", analytic[k][i]);
        }
    }
    for (grid, analytic, is_online) in [(&online, &g.online, true), (&prior, &g.prior, false)] {
        for i in 0..grid.data.len() {
            let mut p = grid.clone();
            p.data[i] += eps;
            let mut q = grid.clone();
            q.data[i] -= eps;
            let fd = if is_online {
                (loss(&head, &p, &prior) - loss(&head, &q, &prior)) / (2.0 * eps)
            } else {
                (loss(&head, &online, &p) - loss(&head, &online, &q)) / (2.0 * eps)
            };
            assert!(close(fd, analytic[i]), "input {i}: fd {fd} vs {}", analytic[i]);
        }
    }
}

#[test]
fn grid_query_matches_brute_force_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pts: Vec<SurfacePoint> = (0..4000)
        .map(|_| SurfacePoint {
            position: Vec3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-3.0..3.0)),
            feature: vec![rng.random_range(-1.0f32..1.0)],
            video_id: 0,
            pixel: (0, 0),
        })
        .collect();
    let prior = voxel_downsample(&pts, 0.4, Vec3::zeros()).unwrap();
    let spec = GridSpec {
        x_range: (-2.0, 6.0),
        y_range: (-3.0, 1.0),
        z_range: (-1.0, 2.5),
        resolution: 0.5,
    };
    let (pos, yaw) = (Vec3::new(1.0, -0.5, 0.2), 0.7f64);
    let got = query_grid(&prior, &pos, yaw, &spec);
    let (s, c) = yaw.sin_cos();
    let mut expect = Vec::new();
    for (idx, _) in prior.cells() {
        let d = prior.cell_center(idx) - pos;
        let e = Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
        let inside = |v: f64, r: (f64, f64)| v >= r.0 - 1e-9 && v <= r.1 + 1e-9;
        if inside(e.x, spec.x_range) && inside(e.y, spec.y_range) && inside(e.z, spec.z_range) {
            expect.push(e);
        }
    }
    assert!(expect.len() > 50);
    assert_eq!(got.len(), expect.len());
    for (g, e) in got.iter().zip(&expect) {
        assert!((g.position - e).norm() < 1e-9);
    }
    let g3 = rasterize_3d(&got, &spec).unwrap();
    let fm = g3.to_feature_map();
    assert_eq!((fm.height as usize, fm.width as usize), (spec.depth() * spec.rows(), spec.cols()));
}
