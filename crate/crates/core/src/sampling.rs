//! ADC-pace interpolation of control points to measurement locations, its
//! exact transpose for gradient pull-back, and the multi-resolution
//! decimation/upsampling used by the coarse-to-fine schedule.
//!
//! Everything here is one primitive: uniform resampling of a polyline with
//! `ns` vertices to `p` points, where output point `p_i` sits at parameter
//! `t_i = i * (ns - 1) / (p - 1)` and is linearly interpolated between the
//! bracketing vertices. Resampled points are convex combinations of control
//! points, so they never leave the feasible box.
//!
//! Flattened sample order is canonical: shot 0 first, then shot 1, each
//! shot's points in readout order.

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::geometry::Trajectory;
use crate::nufft::SamplePointSet;

/// Interpolation stencil of one output point: left vertex index and the
/// weight of the right vertex (left gets `1 - frac`).
#[derive(Debug, Clone, Copy)]
struct Stencil {
    left: usize,
    frac: f64,
}

/// Row `i` of the `p x ns` uniform-resampling matrix has weight `1 - frac`
/// at column `left` and `frac` at `left + 1`.
fn resample_stencils(ns: usize, p: usize) -> Vec<Stencil> {
    debug_assert!(ns >= 2 && p >= 2);
    (0..p)
        .map(|i| {
            let t = i as f64 * (ns - 1) as f64 / (p - 1) as f64;
            let left = (t.floor() as usize).min(ns - 2);
            Stencil {
                left,
                frac: t - left as f64,
            }
        })
        .collect()
}

fn resample_shot(shot: ArrayView2<f64>, stencils: &[Stencil], out: &mut [[f64; 2]]) {
    for (o, s) in out.iter_mut().zip(stencils) {
        for d in 0..2 {
            o[d] = (1.0 - s.frac) * shot[[s.left, d]] + s.frac * shot[[s.left + 1, d]];
        }
    }
}

fn resample_trajectory(traj: &Trajectory, p: usize) -> Trajectory {
    let (nc, _, _) = traj.shots().dim();
    let stencils = resample_stencils(traj.samples_per_shot(), p);
    let mut out = Array3::zeros((nc, p, 2));
    let mut buf = vec![[0.0f64; 2]; p];
    for i in 0..nc {
        resample_shot(traj.shot(i), &stencils, &mut buf);
        for (j, pt) in buf.iter().enumerate() {
            out[[i, j, 0]] = pt[0];
            out[[i, j, 1]] = pt[1];
        }
    }
    Trajectory::new(out).expect("convex combinations of a valid trajectory stay valid")
}

/// Resamples every shot to the readout rate: `Ns * q` points per shot,
/// flattened shot-major into one point set.
pub fn adc_interpolate(traj: &Trajectory, q: usize) -> Result<SamplePointSet> {
    if q < 1 {
        return Err(Error::Config("interpolation factor must be >= 1".into()));
    }
    let (nc, ns, _) = traj.shots().dim();
    let p = ns * q;
    let stencils = resample_stencils(ns, p);
    let mut flat = Array2::zeros((nc * p, 2));
    let mut buf = vec![[0.0f64; 2]; p];
    for i in 0..nc {
        resample_shot(traj.shot(i), &stencils, &mut buf);
        for (j, pt) in buf.iter().enumerate() {
            flat[[i * p + j, 0]] = pt[0];
            flat[[i * p + j, 1]] = pt[1];
        }
    }
    SamplePointSet::new(flat)
}

/// Exact transpose of [`adc_interpolate`]: pulls per-sample position
/// gradients back onto the control points.
pub fn adc_interpolate_vjp(
    point_grads: &Array2<f64>,
    nc: usize,
    ns: usize,
    q: usize,
) -> Result<Array3<f64>> {
    if q < 1 {
        return Err(Error::Config("interpolation factor must be >= 1".into()));
    }
    let p = ns * q;
    if point_grads.dim() != (nc * p, 2) {
        return Err(Error::Shape(format!(
            "expected {} x 2 point gradients, got {} x {}",
            nc * p,
            point_grads.dim().0,
            point_grads.dim().1
        )));
    }
    let stencils = resample_stencils(ns, p);
    let mut out = Array3::zeros((nc, ns, 2));
    for i in 0..nc {
        for (j, s) in stencils.iter().enumerate() {
            for d in 0..2 {
                let g = point_grads[[i * p + j, d]];
                out[[i, s.left, d]] += (1.0 - s.frac) * g;
                out[[i, s.left + 1, d]] += s.frac * g;
            }
        }
    }
    Ok(out)
}

/// Reduces each shot to `Ns / factor` control points for coarse-level
/// optimization. A stride that keeps endpoints would need `(Ns - 1)` to be
/// divisible by the factor, which a factor dividing `Ns` only satisfies at
/// factor 1; every real decimation therefore uniformly resamples.
pub fn multires_decimate(traj: &Trajectory, factor: usize) -> Result<Trajectory> {
    let ns = traj.samples_per_shot();
    if factor == 0 || !factor.is_power_of_two() || ns % factor != 0 {
        return Err(Error::Config(format!(
            "decimation factor must be a power of 2 dividing {ns}, got {factor}"
        )));
    }
    if factor == 1 {
        return Ok(traj.clone());
    }
    Ok(resample_trajectory(traj, ns / factor))
}

/// Doubles (or more generally multiplies by a dyadic factor) the control
/// points of each shot, for warm restarts between resolution levels.
pub fn multires_upsample(traj: &Trajectory, factor: usize) -> Result<Trajectory> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Config(format!(
            "upsampling factor must be a power of 2, got {factor}"
        )));
    }
    if factor == 1 {
        return Ok(traj.clone());
    }
    Ok(resample_trajectory(traj, traj.samples_per_shot() * factor))
}

/// Resamples a decimated trajectory back to the full control-point count so
/// the forward model always sees the same number of measurement locations
/// regardless of the active resolution level.
pub fn expand_to_full(traj: &Trajectory, ns_full: usize) -> Result<Trajectory> {
    let ns = traj.samples_per_shot();
    if ns_full < ns {
        return Err(Error::Shape(format!(
            "cannot expand {ns} control points to fewer ({ns_full})"
        )));
    }
    if ns_full == ns {
        return Ok(traj.clone());
    }
    Ok(resample_trajectory(traj, ns_full))
}

/// Exact transpose of [`expand_to_full`]: pulls full-resolution control
/// gradients back onto the decimated control points.
pub fn expand_to_full_vjp(grads: &Array3<f64>, ns: usize) -> Result<Array3<f64>> {
    let (nc, ns_full, two) = grads.dim();
    if two != 2 {
        return Err(Error::Shape("gradient array must be Nc x Ns x 2".into()));
    }
    if ns_full < ns || ns < 2 {
        return Err(Error::Shape(format!(
            "cannot pull {ns_full}-point gradients back onto {ns} control points"
        )));
    }
    if ns_full == ns {
        return Ok(grads.clone());
    }
    let stencils = resample_stencils(ns, ns_full);
    let mut out = Array3::zeros((nc, ns, 2));
    for i in 0..nc {
        for (j, s) in stencils.iter().enumerate() {
            for d in 0..2 {
                let g = grads[[i, j, d]];
                out[[i, s.left, d]] += (1.0 - s.frac) * g;
                out[[i, s.left + 1, d]] += s.frac * g;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::radial_init;
    use ndarray::arr3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_shot(ns: usize) -> Trajectory {
        // single shot marching along x from 0 to (ns-1)/10
        let mut shots = Array3::zeros((1, ns, 2));
        for j in 0..ns {
            shots[[0, j, 0]] = j as f64 / 10.0;
        }
        Trajectory::new(shots).unwrap()
    }

    fn random_traj(nc: usize, ns: usize, seed: u64) -> Trajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shots = Array3::from_shape_fn((nc, ns, 2), |_| rng.gen_range(-1.0..1.0));
        Trajectory::new(shots).unwrap()
    }

    #[test]
    fn interpolate_q1_is_identity() {
        let traj = random_traj(3, 5, 1);
        let pts = adc_interpolate(&traj, 1).unwrap();
        assert_eq!(pts.len(), 15);
        for i in 0..3 {
            for j in 0..5 {
                for d in 0..2 {
                    assert_eq!(pts.points()[[i * 5 + j, d]], traj.shots()[[i, j, d]]);
                }
            }
        }
    }

    #[test]
    fn interpolate_two_point_shot_example() {
        let shots = arr3(&[[[0.0, 0.0], [0.3, 0.0]]]);
        let traj = Trajectory::new(shots).unwrap();
        let pts = adc_interpolate(&traj, 2).unwrap();
        let expected_x = [0.0, 0.1, 0.2, 0.3];
        assert_eq!(pts.len(), 4);
        for (i, &x) in expected_x.iter().enumerate() {
            assert!((pts.points()[[i, 0]] - x).abs() < 1e-12);
            assert_eq!(pts.points()[[i, 1]], 0.0);
        }
    }

    #[test]
    fn interpolate_preserves_endpoints() {
        let traj = random_traj(4, 7, 2);
        let q = 5;
        let p = 7 * q;
        let pts = adc_interpolate(&traj, q).unwrap();
        for i in 0..4 {
            for d in 0..2 {
                assert_eq!(pts.points()[[i * p, d]], traj.shots()[[i, 0, d]]);
                assert!(
                    (pts.points()[[i * p + p - 1, d]] - traj.shots()[[i, 6, d]]).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn interpolate_straight_shot_stays_collinear() {
        let traj = line_shot(6);
        let pts = adc_interpolate(&traj, 3).unwrap();
        for i in 0..pts.len() {
            assert_eq!(pts.points()[[i, 1]], 0.0);
        }
        // x must be nondecreasing along the straight march
        for i in 1..pts.len() {
            assert!(pts.points()[[i, 0]] >= pts.points()[[i - 1, 0]] - 1e-15);
        }
    }

    #[test]
    fn interpolate_rejects_zero_factor() {
        assert!(adc_interpolate(&line_shot(4), 0).is_err());
    }

    #[test]
    fn vjp_q1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grads = Array2::from_shape_fn((10, 2), |_| rng.gen_range(-1.0..1.0));
        let back = adc_interpolate_vjp(&grads, 2, 5, 1).unwrap();
        for i in 0..2 {
            for j in 0..5 {
                for d in 0..2 {
                    assert_eq!(back[[i, j, d]], grads[[i * 5 + j, d]]);
                }
            }
        }
    }

    #[test]
    fn vjp_constant_gradient_mass() {
        let (nc, ns, q) = (2, 4, 3);
        let v = 0.25;
        let grads = Array2::from_elem((nc * ns * q, 2), v);
        let back = adc_interpolate_vjp(&grads, nc, ns, q).unwrap();
        for i in 0..nc {
            let mass: f64 = (0..ns).map(|j| back[[i, j, 0]]).sum();
            assert!((mass - (ns * q) as f64 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn vjp_matches_materialized_transpose() {
        // build the dense interpolation matrix by probing with basis vectors
        let (nc, ns, q) = (1usize, 4usize, 3usize);
        let p = ns * q;
        let mut a = Array2::zeros((p, ns));
        for j in 0..ns {
            let mut shots = Array3::zeros((nc, ns, 2));
            shots[[0, j, 0]] = 1.0;
            let traj = Trajectory::new(shots).unwrap();
            let pts = adc_interpolate(&traj, q).unwrap();
            for i in 0..p {
                a[[i, j]] = pts.points()[[i, 0]];
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Array2::from_shape_fn((p, 2), |_| rng.gen_range(-1.0..1.0));
        let back = adc_interpolate_vjp(&g, nc, ns, q).unwrap();
        for j in 0..ns {
            for d in 0..2 {
                let expected: f64 = (0..p).map(|i| a[[i, j]] * g[[i, d]]).sum();
                assert!((back[[0, j, d]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decimate_factor_one_is_identity() {
        let traj = random_traj(2, 8, 7);
        let out = multires_decimate(&traj, 1).unwrap();
        assert_eq!(out.shots(), traj.shots());
    }

    #[test]
    fn decimate_eight_to_four_parameters() {
        // vertices at x = j/10: resampled parameters t = {0, 7/3, 14/3, 7}
        let traj = line_shot(8);
        let out = multires_decimate(&traj, 2).unwrap();
        let expected_t = [0.0, 7.0 / 3.0, 14.0 / 3.0, 7.0];
        assert_eq!(out.samples_per_shot(), 4);
        for (j, &t) in expected_t.iter().enumerate() {
            assert!((out.shots()[[0, j, 0]] - t / 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decimate_rejects_non_dividing_factor() {
        assert!(multires_decimate(&line_shot(6), 4).is_err());
        assert!(multires_decimate(&line_shot(8), 3).is_err());
    }

    #[test]
    fn upsample_constant_shot_stays_constant() {
        let shots = Array3::from_elem((1, 3, 2), 0.4);
        let traj = Trajectory::new(shots).unwrap();
        let out = multires_upsample(&traj, 2).unwrap();
        assert_eq!(out.samples_per_shot(), 6);
        assert!(out.shots().iter().all(|&v| (v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn upsample_two_point_shot_parameters() {
        let shots = arr3(&[[[0.0, -0.6], [0.0, 0.6]]]);
        let traj = Trajectory::new(shots).unwrap();
        let out = multires_upsample(&traj, 2).unwrap();
        let expected_y = [-0.6, -0.2, 0.2, 0.6];
        for (j, &y) in expected_y.iter().enumerate() {
            assert!((out.shots()[[0, j, 1]] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn expand_preserves_endpoints_and_identity() {
        let traj = random_traj(3, 4, 11);
        let same = expand_to_full(&traj, 4).unwrap();
        assert_eq!(same.shots(), traj.shots());
        let full = expand_to_full(&traj, 16).unwrap();
        for i in 0..3 {
            for d in 0..2 {
                assert_eq!(full.shots()[[i, 0, d]], traj.shots()[[i, 0, d]]);
                assert!(
                    (full.shots()[[i, 15, d]] - traj.shots()[[i, 3, d]]).abs() < 1e-12
                );
            }
        }
        assert!(expand_to_full(&traj, 3).is_err());
    }

    #[test]
    fn interpolate_then_decimate_reproduces_endpoints() {
        let traj = radial_init(3, 4, 0.9).unwrap();
        let q = 4;
        let pts = adc_interpolate(&traj, q).unwrap();
        // reshape flattened points back into a trajectory to decimate
        let p = 4 * q;
        let mut shots = Array3::zeros((3, p, 2));
        for i in 0..3 {
            for j in 0..p {
                for d in 0..2 {
                    shots[[i, j, d]] = pts.points()[[i * p + j, d]];
                }
            }
        }
        let dense = Trajectory::new(shots).unwrap();
        let back = multires_decimate(&dense, q).unwrap();
        for i in 0..3 {
            for d in 0..2 {
                assert!((back.shots()[[i, 0, d]] - traj.shots()[[i, 0, d]]).abs() < 1e-12);
                assert!((back.shots()[[i, 3, d]] - traj.shots()[[i, 3, d]]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn prop_vjp_is_exact_adjoint(
            nc in 1usize..3,
            ns in 2usize..7,
            q in 1usize..4,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shots = Array3::from_shape_fn((nc, ns, 2), |_| rng.gen_range(-1.0f64..1.0));
            let traj = Trajectory::new(shots).unwrap();
            let pts = adc_interpolate(&traj, q).unwrap();
            let g = Array2::from_shape_fn((nc * ns * q, 2), |_| rng.gen_range(-1.0f64..1.0));
            let back = adc_interpolate_vjp(&g, nc, ns, q).unwrap();
            let lhs: f64 = pts.points().iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = traj.shots().iter().zip(back.iter()).map(|(a, b)| a * b).sum();
            // both sides are <A K, G> = <K, A^T G> for the same sparse A
            prop_assert!((lhs - rhs).abs() <= 1e-11 * lhs.abs().max(1.0));
        }

        #[test]
        fn prop_interpolation_stays_in_hull(
            ns in 2usize..9,
            q in 1usize..5,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shots = Array3::from_shape_fn((1, ns, 2), |_| rng.gen_range(-1.0f64..1.0));
            let traj = Trajectory::new(shots).unwrap();
            let pts = adc_interpolate(&traj, q).unwrap();
            for d in 0..2 {
                let lo = (0..ns).map(|j| traj.shots()[[0, j, d]]).fold(f64::MAX, f64::min);
                let hi = (0..ns).map(|j| traj.shots()[[0, j, d]]).fold(f64::MIN, f64::max);
                for i in 0..pts.len() {
                    let v = pts.points()[[i, d]];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn prop_expand_vjp_is_exact_adjoint(
            nc in 1usize..3,
            ns in 2usize..5,
            extra in 0usize..12,
            seed in 0u64..1000,
        ) {
            let ns_full = ns + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shots = Array3::from_shape_fn((nc, ns, 2), |_| rng.gen_range(-1.0f64..1.0));
            let traj = Trajectory::new(shots).unwrap();
            let full = expand_to_full(&traj, ns_full).unwrap();
            let g = Array3::from_shape_fn((nc, ns_full, 2), |_| rng.gen_range(-1.0f64..1.0));
            let back = expand_to_full_vjp(&g, ns).unwrap();
            let lhs: f64 = full.shots().iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = traj.shots().iter().zip(back.iter()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-11 * lhs.abs().max(1.0));
        }
    }
}
