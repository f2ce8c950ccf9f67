//! `ktraj`: learn, inspect, project, and export hardware-feasible k-space
//! sampling trajectories.
//!
//! Subcommands wrap the library end to end: `optimize` trains a trajectory
//! (and optionally a denoiser) on an image dataset, `evaluate` scores a
//! trajectory retrospectively, `project` snaps a trajectory onto the
//! feasible set, `density` reports center sampling density, `phantom`
//! generates synthetic datasets, and `export` emits scanner gradient
//! waveforms.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ktraj_core::{
    center_density, check_feasibility, constraint_bounds, evaluate, export_waveforms,
    phantom_generate, project, read_dataset, read_denoiser, read_trajectory, run_scheme,
    write_dataset, write_denoiser, write_eval_csv, write_eval_json, write_log, write_trajectory,
    write_waveforms_csv, DenoiserParams, ProjectorOptions, Reconstructor, Scheme, TrainConfig,
    TrajectoryFile, DEFAULT_PIPE_ITERS, FEASIBILITY_TOL,
};

#[derive(Parser)]
#[command(name = "ktraj", version, about = "Hardware-feasible k-space trajectory learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a trajectory (and optionally a reconstructor) from a dataset.
    Optimize {
        /// JSON training configuration; unknown keys are rejected.
        #[arg(long)]
        config: PathBuf,
        /// Update scheme: joint, alternating, or hybrid.
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        /// Reconstructor used inside the training loss.
        #[arg(long, value_enum)]
        recon: ReconArg,
        /// Dataset directory (see `phantom`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the trajectory, checkpoint, and log.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the batch-sampling seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retrospectively evaluate a trajectory on a dataset.
    Evaluate {
        #[arg(long)]
        traj: PathBuf,
        /// Denoiser checkpoint; plain density-compensated adjoint if absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for eval.csv and eval.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Project a trajectory onto the hardware-feasible set.
    Project {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the fraction of ADC samples within a k-space radius.
    Density {
        #[arg(long)]
        traj: PathBuf,
        /// Radius in normalized k-space units (the full grid spans [-1, 1]).
        #[arg(long)]
        radius: f64,
    },
    /// Generate a complex phantom dataset.
    Phantom {
        /// Image side; at least 32.
        #[arg(long)]
        n: u32,
        #[arg(long)]
        count: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export gradient waveforms (T/m) for a feasible trajectory.
    Export {
        #[arg(long)]
        traj: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Jl,
    Ad,
    Hl,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReconArg {
    Dcadj,
    Denoiser,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Optimize {
            config,
            scheme,
            recon,
            data,
            out,
            seed,
        } => cmd_optimize(&config, scheme, recon, &data, &out, seed),
        Command::Evaluate {
            traj,
            params,
            data,
            out,
        } => cmd_evaluate(&traj, params.as_deref(), &data, &out),
        Command::Project { traj, out } => cmd_project(&traj, &out),
        Command::Density { traj, radius } => cmd_density(&traj, radius),
        Command::Phantom { n, count, seed, out } => cmd_phantom(n, count, seed, &out),
        Command::Export { traj, out } => cmd_export(&traj, &out),
    }
}

fn cmd_optimize(
    config: &std::path::Path,
    scheme: SchemeArg,
    recon: ReconArg,
    data: &std::path::Path,
    out: &std::path::Path,
    seed: Option<u64>,
) -> Result<()> {
    let text = fs::read_to_string(config)
        .with_context(|| format!("reading config {}", config.display()))?;
    let mut cfg = TrainConfig::from_json(&text)?;
    cfg.schedule.scheme = match scheme {
        SchemeArg::Jl => Scheme::Jl,
        SchemeArg::Ad => Scheme::Ad,
        SchemeArg::Hl => Scheme::Hl,
    };
    if let Some(s) = seed {
        cfg.schedule.seed = s;
    }
    let (images, meta) = read_dataset(data)?;
    if meta.n != cfg.geometry.matrix_size() {
        bail!(
            "dataset side {} does not match configured matrix size {}",
            meta.n,
            cfg.geometry.matrix_size()
        );
    }
    let recon = match recon {
        ReconArg::Dcadj => Reconstructor::DcpAdjoint,
        ReconArg::Denoiser => Reconstructor::Denoiser(DenoiserParams::init(cfg.schedule.seed)),
    };
    let outcome = run_scheme(&cfg, recon, &images)?;
    fs::create_dir_all(out)?;
    write_trajectory(
        &out.join("trajectory.ktrj"),
        &TrajectoryFile {
            trajectory: outcome.trajectory.clone(),
            geometry: cfg.geometry,
            limits: cfg.limits,
        },
    )?;
    if let Some(params) = &outcome.params {
        write_denoiser(&out.join("denoiser.bin"), params)?;
    }
    write_log(&out.join("train_log.jsonl"), &outcome.log)?;
    println!("steps: {}", outcome.log.len());
    println!(
        "validation loss: {:.6} -> {:.6}{}",
        outcome.initial_val_loss,
        outcome.best_val_loss,
        if outcome.stopped_early {
            " (stopped early)"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_evaluate(
    traj: &std::path::Path,
    params: Option<&std::path::Path>,
    data: &std::path::Path,
    out: &std::path::Path,
) -> Result<()> {
    let file = read_trajectory(traj)?;
    let recon = match params {
        Some(p) => Reconstructor::Denoiser(read_denoiser(p)?),
        None => Reconstructor::DcpAdjoint,
    };
    let (images, meta) = read_dataset(data)?;
    if meta.n != file.geometry.matrix_size() {
        bail!(
            "dataset side {} does not match the trajectory's matrix size {}",
            meta.n,
            file.geometry.matrix_size()
        );
    }
    let q = file.limits.interp_factor();
    let report = evaluate(&file.trajectory, &recon, &images, q, DEFAULT_PIPE_ITERS)?;
    fs::create_dir_all(out)?;
    write_eval_csv(&out.join("eval.csv"), &report)?;
    write_eval_json(&out.join("eval.json"), &report)?;
    println!(
        "ssim mean {:.4} median {:.4}",
        report.ssim.mean, report.ssim.median
    );
    println!(
        "psnr mean {:.2} median {:.2}",
        report.psnr.mean, report.psnr.median
    );
    Ok(())
}

fn cmd_project(traj: &std::path::Path, out: &std::path::Path) -> Result<()> {
    let file = read_trajectory(traj)?;
    let bounds = constraint_bounds(&file.limits, &file.geometry)?;
    let before = check_feasibility(&file.trajectory, &bounds, FEASIBILITY_TOL);
    let projected = project(&file.trajectory, &bounds, &ProjectorOptions::default())?;
    let after = check_feasibility(&projected.trajectory, &bounds, FEASIBILITY_TOL);
    write_trajectory(
        out,
        &TrajectoryFile {
            trajectory: projected.trajectory,
            geometry: file.geometry,
            limits: file.limits,
        },
    )?;
    println!(
        "max violation: {:.3e} -> {:.3e}",
        before.max_violation(),
        after.max_violation()
    );
    Ok(())
}

fn cmd_density(traj: &std::path::Path, radius: f64) -> Result<()> {
    let file = read_trajectory(traj)?;
    let q = file.limits.interp_factor();
    let fraction = center_density(&file.trajectory, q, radius)?;
    println!("{fraction:.6}");
    Ok(())
}

fn cmd_phantom(n: u32, count: u32, seed: u64, out: &std::path::Path) -> Result<()> {
    let images = phantom_generate(n as usize, count as usize, seed, true)?;
    fs::create_dir_all(out)?;
    write_dataset(out, &images, "phantom")?;
    println!("wrote {count} phantoms of side {n} to {}", out.display());
    Ok(())
}

fn cmd_export(traj: &std::path::Path, out: &std::path::Path) -> Result<()> {
    let file = read_trajectory(traj)?;
    let waveforms = export_waveforms(&file.trajectory, &file.limits, &file.geometry)?;
    write_waveforms_csv(out, &waveforms)?;
    println!(
        "wrote waveforms for {} shots to {}",
        waveforms.dim().0,
        out.display()
    );
    Ok(())
}
