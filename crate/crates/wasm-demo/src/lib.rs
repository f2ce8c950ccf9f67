//! Browser bindings for the interactive trajectory demo.
//!
//! Three operations back the page: generate a radial starting trajectory,
//! project an edited trajectory onto the box/speed/acceleration-feasible
//! set, and report center sampling density. Coordinates cross the boundary
//! as flat `[kx0, ky0, kx1, ky1, ...]` arrays, shot-major.

use ktraj_core::{
    center_density, check_feasibility, project_shots, radial_init, ConstraintBounds,
    ProjectorOptions, Result, Trajectory, FEASIBILITY_TOL,
};
use ndarray::Array3;
use wasm_bindgen::prelude::*;

/// Coordinates are clamped into the [-1, 1] box on entry; speed and
/// acceleration are the constraints the page lets you break.
fn to_trajectory(coords: &[f64], num_shots: usize) -> Result<Trajectory> {
    if num_shots == 0 || coords.len() % (2 * num_shots) != 0 {
        return Err(ktraj_core::Error::Shape(format!(
            "{} coordinates do not form {num_shots} equal shots",
            coords.len()
        )));
    }
    let ns = coords.len() / (2 * num_shots);
    let clamped: Vec<f64> = coords.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let shots =
        Array3::from_shape_vec((num_shots, ns, 2), clamped).expect("length checked above");
    Trajectory::new(shots)
}

fn flatten(traj: &Trajectory) -> Vec<f64> {
    traj.shots().iter().copied().collect()
}

fn radial_inner(num_shots: usize, samples_per_shot: usize, span: f64) -> Result<Vec<f64>> {
    Ok(flatten(&radial_init(num_shots, samples_per_shot, span)?))
}

fn project_inner(
    coords: &[f64],
    num_shots: usize,
    speed: f64,
    accel: f64,
) -> Result<Vec<f64>> {
    let traj = to_trajectory(coords, num_shots)?;
    let bounds = ConstraintBounds { speed, accel };
    let proj = project_shots(traj.shots(), &bounds, &ProjectorOptions::default())?;
    Ok(flatten(&proj.trajectory))
}

fn violation_inner(coords: &[f64], num_shots: usize, speed: f64, accel: f64) -> Result<f64> {
    let traj = to_trajectory(coords, num_shots)?;
    let bounds = ConstraintBounds { speed, accel };
    Ok(check_feasibility(&traj, &bounds, FEASIBILITY_TOL).max_violation())
}

fn density_inner(coords: &[f64], num_shots: usize, q: usize, radius: f64) -> Result<f64> {
    center_density(&to_trajectory(coords, num_shots)?, q, radius)
}

/// Evenly rotated radial spokes through the k-space center.
#[wasm_bindgen]
pub fn radial_trajectory(
    num_shots: usize,
    samples_per_shot: usize,
    span: f64,
) -> std::result::Result<Vec<f64>, JsError> {
    Ok(radial_inner(num_shots, samples_per_shot, span)?)
}

/// Euclidean projection onto the feasible set for the given per-step
/// speed and acceleration bounds (plus the implicit [-1, 1] box).
#[wasm_bindgen]
pub fn project_trajectory(
    coords: &[f64],
    num_shots: usize,
    speed: f64,
    accel: f64,
) -> std::result::Result<Vec<f64>, JsError> {
    Ok(project_inner(coords, num_shots, speed, accel)?)
}

/// Worst constraint violation of the given trajectory; zero when feasible.
#[wasm_bindgen]
pub fn max_violation(
    coords: &[f64],
    num_shots: usize,
    speed: f64,
    accel: f64,
) -> std::result::Result<f64, JsError> {
    Ok(violation_inner(coords, num_shots, speed, accel)?)
}

/// Fraction of ADC samples (control points interpolated by `q`) within
/// `radius` of the k-space center.
#[wasm_bindgen]
pub fn center_fraction(
    coords: &[f64],
    num_shots: usize,
    q: usize,
    radius: f64,
) -> std::result::Result<f64, JsError> {
    Ok(density_inner(coords, num_shots, q, radius)?)
}
