//! Euclidean projection of each shot onto the hardware-feasible set: the
//! box `[-1, 1]^2` intersected with per-step speed and acceleration balls,
//!
//! ```text
//!     || k[j+1] - k[j] ||_2          <= alpha_c   (gradient amplitude)
//!     || k[j+1] - 2 k[j] + k[j-1] || <= beta_c    (slew rate)
//! ```
//!
//! Solved independently per shot by accelerated ascent on the dual: one
//! dual variable per speed step and one per acceleration step, box handled
//! by clipping inside the primal recovery
//! `x(mu) = clip(c - D1^T mu_1 - D2^T mu_2)`. The dual blocks take proximal
//! gradient steps (block soft-thresholding) with FISTA momentum and step
//! `1/L`, `L = 20 >= ||D1||^2 + ||D2||^2`.
//!
//! A final contraction toward the shot centroid removes the residual
//! constraint violation of the truncated dual iteration, so the output is
//! always feasible to 1e-8 even when the iteration limit is hit (the
//! `converged` flag still reports that honestly). The contraction is exact
//! for both difference families (they are linear in deviations from the
//! centroid) and keeps the shot inside the box (convexity).
//!
//! The projection never contributes to the loss gradient; optimizers call
//! it after every parameter update.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::geometry::{ConstraintBounds, Trajectory};

/// Worst-case constraint violations of a trajectory, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    pub max_box_violation: f64,
    pub max_speed_violation: f64,
    pub max_accel_violation: f64,
    pub feasible: bool,
}

impl FeasibilityReport {
    pub fn max_violation(&self) -> f64 {
        self.max_box_violation
            .max(self.max_speed_violation)
            .max(self.max_accel_violation)
    }
}

/// Iteration limits for the dual solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorOptions {
    pub max_iters: usize,
    /// Relative stall tolerance on dual-variable progress.
    pub rel_tol: f64,
}

impl Default for ProjectorOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            rel_tol: 1e-9,
        }
    }
}

/// Result of a projection: the feasible trajectory, whether the dual
/// iteration stalled below tolerance before the cap, and the largest
/// per-shot iteration count used.
#[derive(Debug, Clone)]
pub struct Projection {
    pub trajectory: Trajectory,
    pub converged: bool,
    pub iterations: usize,
}

/// Feasibility tolerance the projector postcondition guarantees.
pub const FEASIBILITY_TOL: f64 = 1e-8;

fn report_for(shots: &Array3<f64>, bounds: &ConstraintBounds, tol: f64) -> FeasibilityReport {
    let (nc, ns, _) = shots.dim();
    let mut max_box: f64 = 0.0;
    let mut max_speed: f64 = 0.0;
    let mut max_accel: f64 = 0.0;
    for i in 0..nc {
        for j in 0..ns {
            for d in 0..2 {
                max_box = max_box.max(shots[[i, j, d]].abs() - 1.0);
            }
        }
        for j in 0..ns - 1 {
            let dx = shots[[i, j + 1, 0]] - shots[[i, j, 0]];
            let dy = shots[[i, j + 1, 1]] - shots[[i, j, 1]];
            max_speed = max_speed.max(dx.hypot(dy) - bounds.speed);
        }
        for j in 0..ns.saturating_sub(2) {
            let ax = shots[[i, j + 2, 0]] - 2.0 * shots[[i, j + 1, 0]] + shots[[i, j, 0]];
            let ay = shots[[i, j + 2, 1]] - 2.0 * shots[[i, j + 1, 1]] + shots[[i, j, 1]];
            max_accel = max_accel.max(ax.hypot(ay) - bounds.accel);
        }
    }
    let max_box = max_box.max(0.0);
    let max_speed = max_speed.max(0.0);
    let max_accel = max_accel.max(0.0);
    FeasibilityReport {
        max_box_violation: max_box,
        max_speed_violation: max_speed,
        max_accel_violation: max_accel,
        feasible: max_box <= tol && max_speed <= tol && max_accel <= tol,
    }
}

/// Worst violations of the box/speed/acceleration families over all shots.
pub fn check_feasibility(
    traj: &Trajectory,
    bounds: &ConstraintBounds,
    tol: f64,
) -> FeasibilityReport {
    report_for(traj.shots(), bounds, tol)
}

/// Upper bound on `||D1||^2 + ||D2||^2` (first and second difference
/// operators): 4 + 16.
const DUAL_STEP_DENOM: f64 = 20.0;

/// Shrinks a dual block toward zero: the proximal map of `r * || . ||_2`.
#[inline]
fn block_shrink(v: [f64; 2], r: f64) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    if n <= r {
        [0.0, 0.0]
    } else {
        let s = 1.0 - r / n;
        [v[0] * s, v[1] * s]
    }
}

#[inline]
fn clip1(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Dual FISTA for one shot. `c` is the point to project; returns the
/// projected shot and whether the dual iteration stalled below `rel_tol`.
fn project_one_shot(
    c: &[[f64; 2]],
    bounds: &ConstraintBounds,
    opts: &ProjectorOptions,
) -> (Vec<[f64; 2]>, bool, usize) {
    let ns = c.len();
    let n1 = ns - 1;
    let n2 = ns.saturating_sub(2);
    let mut mu1 = vec![[0.0f64; 2]; n1];
    let mut mu2 = vec![[0.0f64; 2]; n2];
    let mut mu1_prev = mu1.clone();
    let mut mu2_prev = mu2.clone();
    let mut y1 = mu1.clone();
    let mut y2 = mu2.clone();
    let mut x = vec![[0.0f64; 2]; ns];
    let mut t = 1.0f64;
    let inv_l = 1.0 / DUAL_STEP_DENOM;
    let mut converged = false;
    let mut iters = 0;
    for it in 0..opts.max_iters {
        iters = it + 1;
        // primal recovery at the extrapolated dual point
        for j in 0..ns {
            let mut acc = [c[j][0], c[j][1]];
            // D1^T y1: row j gets -y1[j] (as start of step j) + y1[j-1]
            for d in 0..2 {
                if j < n1 {
                    acc[d] += y1[j][d];
                }
                if j >= 1 {
                    acc[d] -= y1[j - 1][d];
                }
                // D2^T y2: mu2[m] touches rows m (+1), m+1 (-2), m+2 (+1)
                if j < n2 {
                    acc[d] -= y2[j][d];
                }
                if j >= 1 && j - 1 < n2 {
                    acc[d] += 2.0 * y2[j - 1][d];
                }
                if j >= 2 && j - 2 < n2 {
                    acc[d] -= y2[j - 2][d];
                }
            }
            x[j] = [clip1(acc[0]), clip1(acc[1])];
        }
        // proximal dual ascent step per block
        let mut delta: f64 = 0.0;
        let mut norm: f64 = 1.0;
        for j in 0..n1 {
            let g = [x[j + 1][0] - x[j][0], x[j + 1][1] - x[j][1]];
            let v = [y1[j][0] + inv_l * g[0], y1[j][1] + inv_l * g[1]];
            let new = block_shrink(v, bounds.speed * inv_l);
            delta = delta
                .max((new[0] - mu1[j][0]).abs())
                .max((new[1] - mu1[j][1]).abs());
            norm = norm.max(new[0].abs()).max(new[1].abs());
            mu1_prev[j] = mu1[j];
            mu1[j] = new;
        }
        for j in 0..n2 {
            let g = [
                x[j + 2][0] - 2.0 * x[j + 1][0] + x[j][0],
                x[j + 2][1] - 2.0 * x[j + 1][1] + x[j][1],
            ];
            let v = [y2[j][0] + inv_l * g[0], y2[j][1] + inv_l * g[1]];
            let new = block_shrink(v, bounds.accel * inv_l);
            delta = delta
                .max((new[0] - mu2[j][0]).abs())
                .max((new[1] - mu2[j][1]).abs());
            norm = norm.max(new[0].abs()).max(new[1].abs());
            mu2_prev[j] = mu2[j];
            mu2[j] = new;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let w = (t - 1.0) / t_next;
        for j in 0..n1 {
            for d in 0..2 {
                y1[j][d] = mu1[j][d] + w * (mu1[j][d] - mu1_prev[j][d]);
            }
        }
        for j in 0..n2 {
            for d in 0..2 {
                y2[j][d] = mu2[j][d] + w * (mu2[j][d] - mu2_prev[j][d]);
            }
        }
        t = t_next;
        if delta <= opts.rel_tol * norm {
            converged = true;
            break;
        }
    }
    // final primal recovery at the converged dual point
    for j in 0..ns {
        let mut acc = [c[j][0], c[j][1]];
        for d in 0..2 {
            if j < n1 {
                acc[d] += mu1[j][d];
            }
            if j >= 1 {
                acc[d] -= mu1[j - 1][d];
            }
            if j < n2 {
                acc[d] -= mu2[j][d];
            }
            if j >= 1 && j - 1 < n2 {
                acc[d] += 2.0 * mu2[j - 1][d];
            }
            if j >= 2 && j - 2 < n2 {
                acc[d] -= mu2[j - 2][d];
            }
        }
        x[j] = [clip1(acc[0]), clip1(acc[1])];
    }
    polish(&mut x, bounds);
    (x, converged, iters)
}

/// Contracts the shot toward its centroid by the worst violation ratio.
/// Differences scale linearly under the contraction and the box is convex,
/// so the result is strictly feasible regardless of how far the dual
/// iteration got.
fn polish(x: &mut [[f64; 2]], bounds: &ConstraintBounds) {
    let ns = x.len();
    let mut ratio: f64 = 1.0;
    for j in 0..ns - 1 {
        let d = (x[j + 1][0] - x[j][0]).hypot(x[j + 1][1] - x[j][1]);
        ratio = ratio.max(d / bounds.speed);
    }
    for j in 0..ns.saturating_sub(2) {
        let a = (x[j + 2][0] - 2.0 * x[j + 1][0] + x[j][0])
            .hypot(x[j + 2][1] - 2.0 * x[j + 1][1] + x[j][1]);
        ratio = ratio.max(a / bounds.accel);
    }
    if ratio <= 1.0 {
        return;
    }
    let s = 1.0 / (ratio * (1.0 + 1e-12));
    let mut centroid = [0.0f64; 2];
    for p in x.iter() {
        centroid[0] += p[0];
        centroid[1] += p[1];
    }
    centroid[0] /= ns as f64;
    centroid[1] /= ns as f64;
    for p in x.iter_mut() {
        for d in 0..2 {
            p[d] = centroid[d] + s * (p[d] - centroid[d]);
        }
    }
}

/// Projects raw candidate shots (which may lie outside the box, as optimizer
/// iterates do) onto the feasible set, shot by shot.
pub fn project_shots(
    shots: &Array3<f64>,
    bounds: &ConstraintBounds,
    opts: &ProjectorOptions,
) -> Result<Projection> {
    let (nc, ns, two) = shots.dim();
    if two != 2 || nc == 0 || ns < 2 {
        return Err(Error::Shape(format!(
            "shots must be Nc x Ns x 2 with Nc >= 1, Ns >= 2, got {nc} x {ns} x {two}"
        )));
    }
    if !shots.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("projection input".into()));
    }
    if bounds.speed <= 0.0 || bounds.accel <= 0.0 {
        return Err(Error::Config("constraint bounds must be positive".into()));
    }
    // feasible inputs are fixed points; return them bit-identically
    let pre = report_for(shots, bounds, 1e-12);
    if pre.feasible {
        return Ok(Projection {
            trajectory: Trajectory::new(shots.clone())?,
            converged: true,
            iterations: 0,
        });
    }
    let mut out = Array3::zeros((nc, ns, 2));
    let mut all_converged = true;
    let mut max_iters_used = 0;
    let mut c = vec![[0.0f64; 2]; ns];
    for i in 0..nc {
        for j in 0..ns {
            c[j] = [shots[[i, j, 0]], shots[[i, j, 1]]];
        }
        let (x, conv, iters) = project_one_shot(&c, bounds, opts);
        all_converged &= conv;
        max_iters_used = max_iters_used.max(iters);
        for (j, p) in x.iter().enumerate() {
            out[[i, j, 0]] = p[0];
            out[[i, j, 1]] = p[1];
        }
    }
    debug_assert!(report_for(&out, bounds, FEASIBILITY_TOL).feasible);
    Ok(Projection {
        trajectory: Trajectory::new(out)?,
        converged: all_converged,
        iterations: max_iters_used,
    })
}

/// Projects an already-valid trajectory (a feasible one comes back
/// unchanged).
pub fn project(
    traj: &Trajectory,
    bounds: &ConstraintBounds,
    opts: &ProjectorOptions,
) -> Result<Projection> {
    project_shots(traj.shots(), bounds, opts)
}
