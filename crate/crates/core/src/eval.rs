//! Retrospective evaluation: simulate acquisition along a trajectory,
//! reconstruct, and score against the ground truth, plus sampling-density
//! diagnostics and physical waveform export.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::density::pipe_weights_with_plan;
use crate::error::{Error, Result};
use crate::geometry::{
    constraint_bounds, ComplexImage, HardwareLimits, ImagingGeometry, Trajectory,
};
use crate::nufft::{NufftMethod, NufftPlan};
use crate::objective::{psnr_metric, ssim_metric};
use crate::projector::{check_feasibility, FEASIBILITY_TOL};
use crate::recon::Reconstructor;
use crate::sampling::adc_interpolate;

/// Fraction of interpolated readout samples within `radius` of the k-space
/// center (Euclidean norm in normalized coordinates).
pub fn center_density(traj: &Trajectory, q: usize, radius: f64) -> Result<f64> {
    if !radius.is_finite() {
        return Err(Error::Domain(format!("radius must be finite, got {radius}")));
    }
    let points = adc_interpolate(traj, q)?;
    let pts = points.points();
    let m = pts.dim().0;
    let inside = (0..m)
        .filter(|&i| pts[[i, 0]].hypot(pts[[i, 1]]) <= radius)
        .count();
    Ok(inside as f64 / m as f64)
}

/// Scores for one evaluated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub ssim: f64,
    pub psnr: f64,
}

/// Five-number-style aggregate (quartiles by linear interpolation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let t = p * (sorted.len() - 1) as f64;
    let lo = t.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = t - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn stats(values: &[f64]) -> Stats {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("metrics are finite"));
    Stats {
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        median: percentile(&sorted, 0.5),
        q1: percentile(&sorted, 0.25),
        q3: percentile(&sorted, 0.75),
    }
}

/// Per-image rows plus aggregates over the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub ssim: Stats,
    pub psnr: Stats,
}

/// Retrospective evaluation: for each reference image, simulate the
/// acquisition along the trajectory, reconstruct with the given
/// reconstructor on top of the density-compensated adjoint, and score.
pub fn evaluate(
    traj: &Trajectory,
    recon: &Reconstructor,
    images: &[ComplexImage],
    q: usize,
    pipe_iters: usize,
) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Config("evaluation needs at least one image".into()));
    }
    let n = images[0].side();
    if images.iter().any(|img| img.side() != n) {
        return Err(Error::Shape("evaluation images must share one side length".into()));
    }
    let points = adc_interpolate(traj, q)?;
    let plan = NufftPlan::new(&points, n, NufftMethod::Auto)?;
    let weights = pipe_weights_with_plan(&plan, pipe_iters)?;
    let mut rows = Vec::with_capacity(images.len());
    for (index, x) in images.iter().enumerate() {
        let y = plan.forward(x)?;
        let xdc = plan.adjoint(&weights.apply(&y)?)?;
        let xhat = recon.apply(&xdc);
        rows.push(EvalRow {
            index,
            ssim: ssim_metric(x, &xhat)?,
            psnr: psnr_metric(x, &xhat)?,
        });
    }
    let ssim: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
    let psnr: Vec<f64> = rows.iter().map(|r| r.psnr).collect();
    Ok(EvalReport {
        ssim: stats(&ssim),
        psnr: stats(&psnr),
        rows,
    })
}

/// Writes one CSV row per evaluated image.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = String::from("index,ssim,psnr\n");
    for r in &report.rows {
        text.push_str(&format!("{},{:.6},{:.4}\n", r.index, r.ssim, r.psnr));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Writes the aggregate statistics as JSON.
pub fn write_eval_json(path: &Path, report: &EvalReport) -> Result<()> {
    #[derive(Serialize)]
    struct Aggregate<'a> {
        count: usize,
        ssim: &'a Stats,
        psnr: &'a Stats,
    }
    let agg = Aggregate {
        count: report.rows.len(),
        ssim: &report.ssim,
        psnr: &report.psnr,
    };
    fs::write(path, serde_json::to_vec_pretty(&agg)?)?;
    Ok(())
}

/// Converts normalized control points to physical gradient waveforms
/// `G[n] = (kappa[n+1] - kappa[n]) / (gamma dt)` with `kappa = k * kmax`,
/// refusing trajectories that violate the hardware limits. The result is
/// `(Nc, Ns - 1, 2)` in T/m.
pub fn export_waveforms(
    traj: &Trajectory,
    limits: &HardwareLimits,
    geom: &ImagingGeometry,
) -> Result<Array3<f64>> {
    let bounds = constraint_bounds(limits, geom)?;
    let report = check_feasibility(traj, &bounds, FEASIBILITY_TOL);
    if !report.feasible {
        return Err(Error::Infeasible {
            box_violation: report.max_box_violation,
            speed_violation: report.max_speed_violation,
            accel_violation: report.max_accel_violation,
        });
    }
    let (nc, ns, _) = traj.shots().dim();
    let kmax = geom.kmax();
    let scale = kmax / (limits.gyromagnetic_ratio * limits.raster_time);
    let mut g = Array3::zeros((nc, ns - 1, 2));
    for i in 0..nc {
        for p in 0..ns - 1 {
            for d in 0..2 {
                g[[i, p, d]] = (traj.shots()[[i, p + 1, d]] - traj.shots()[[i, p, d]]) * scale;
            }
        }
    }
    Ok(g)
}

/// Writes waveforms as CSV with columns `shot,sample,gx,gy`.
pub fn write_waveforms_csv(path: &Path, waveforms: &Array3<f64>) -> Result<()> {
    let (nc, ng, two) = waveforms.dim();
    if two != 2 {
        return Err(Error::Shape("waveforms must be Nc x (Ns-1) x 2".into()));
    }
    let mut text = String::from("shot,sample,gx,gy\n");
    for i in 0..nc {
        for p in 0..ng {
            text.push_str(&format!(
                "{i},{p},{:.9e},{:.9e}\n",
                waveforms[[i, p, 0]],
                waveforms[[i, p, 1]]
            ));
        }
    }
    fs::write(path, text)?;
    Ok(())
}
