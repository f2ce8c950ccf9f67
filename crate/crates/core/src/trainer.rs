//! Multi-resolution training loop coupling the sampling trajectory and the
//! reconstructor.
//!
//! The optimization variable is a decimated control-point trajectory that is
//! expanded to the full control grid and interpolated to readout rate before
//! every forward pass. Position gradients flow back through both the
//! measurement operator and its density-compensated adjoint (compensation
//! weights are held constant in the gradient and refreshed periodically),
//! then through the interpolation and expansion transposes onto the active
//! control points. Every trajectory update is followed by a projection onto
//! the hardware constraint set, so each logged iterate is feasible.
//!
//! Three update schemes are supported: joint descent on trajectory and
//! network every step, alternating descent (trajectory first with the plain
//! adjoint reconstruction, then the network at full resolution), and a
//! hybrid that alternates short blocks at coarse levels, long blocks near
//! full resolution, and goes fully joint at the finest level.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{pipe_weights_with_plan, DensityWeights, DEFAULT_PIPE_ITERS};
use crate::error::{Error, Result};
use crate::geometry::{
    constraint_bounds, radial_init_feasible, ComplexImage, ConstraintBounds, HardwareLimits,
    ImagingGeometry, Trajectory,
};
use crate::nufft::{NufftMethod, NufftPlan};
use crate::objective::{combined_loss, combined_loss_and_grad, LossWeights};
use crate::optim::{adam_step, radam_step, OptimState, DEFAULT_LR};
use crate::projector::{
    check_feasibility, project_shots, ProjectorOptions, FEASIBILITY_TOL,
};
use crate::recon::{dcp_adjoint_y_cotangent, DenoiserParams, Reconstructor};
use crate::sampling::{
    adc_interpolate, adc_interpolate_vjp, expand_to_full, expand_to_full_vjp, multires_decimate,
    multires_upsample,
};

/// Update scheme selecting how trajectory and network steps interleave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Joint learning: simultaneous trajectory and network updates.
    Jl,
    /// Alternating descent: trajectory first (plain adjoint recon), then
    /// the network at full resolution with the trajectory frozen.
    Ad,
    /// Hybrid learning: alternating-descent blocks coarse-to-fine
    /// (trajectory blocks keep the plain adjoint recon so an undertrained
    /// network never corrupts trajectory gradients), true joint
    /// optimization at full resolution.
    Hl,
}

/// What a single planned step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Trajectory,
    Network,
    Joint,
}

/// Multi-resolution schedule and optimization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Dyadic decimation levels, strictly decreasing and ending at 1.
    pub levels: Vec<usize>,
    /// Steps spent at each level (the alternating scheme's network phase
    /// at full resolution comes on top of these).
    pub steps_per_level: usize,
    pub scheme: Scheme,
    /// Alternation block length at coarse levels under the hybrid scheme.
    pub hl_block: usize,
    /// Early-stopping patience in steps without validation improvement.
    pub patience: usize,
    pub batch_size: usize,
    /// Seed for batch sampling.
    pub seed: u64,
    /// Validation cadence in steps.
    pub val_every: usize,
    /// Trajectory updates between density-compensation refreshes.
    pub dc_refresh: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            levels: vec![4, 2, 1],
            steps_per_level: 100,
            scheme: Scheme::Hl,
            hl_block: 20,
            patience: 100,
            batch_size: 8,
            seed: 0,
            val_every: 10,
            dc_refresh: 10,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("schedule needs at least one level".into()));
        }
        if *self.levels.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "levels must end at 1, got {:?}",
                self.levels
            )));
        }
        for &l in &self.levels {
            if !l.is_power_of_two() {
                return Err(Error::Config(format!(
                    "levels must be powers of two, got {l}"
                )));
            }
        }
        if self.levels.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "levels must be strictly decreasing, got {:?}",
                self.levels
            )));
        }
        let counts = [
            ("steps_per_level", self.steps_per_level),
            ("hl_block", self.hl_block),
            ("patience", self.patience),
            ("batch_size", self.batch_size),
            ("val_every", self.val_every),
            ("dc_refresh", self.dc_refresh),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        Ok(())
    }
}

fn default_num_shots() -> usize {
    8
}

fn default_samples_per_shot() -> usize {
    64
}

fn default_lr() -> f64 {
    DEFAULT_LR
}

fn default_pipe_iters() -> usize {
    DEFAULT_PIPE_ITERS
}

/// Full training configuration; the JSON config file deserializes into
/// this and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub geometry: ImagingGeometry,
    #[serde(default)]
    pub limits: HardwareLimits,
    #[serde(default = "default_num_shots")]
    pub num_shots: usize,
    #[serde(default = "default_samples_per_shot")]
    pub samples_per_shot: usize,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default = "default_lr")]
    pub lr_trajectory: f64,
    #[serde(default = "default_lr")]
    pub lr_network: f64,
    #[serde(default = "default_pipe_iters")]
    pub pipe_iters: usize,
}

impl TrainConfig {
    /// Parses and validates a JSON configuration.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.limits.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.num_shots < 1 {
            return Err(Error::Config("num_shots must be >= 1".into()));
        }
        if self.samples_per_shot < 2 {
            return Err(Error::Config("samples_per_shot must be >= 2".into()));
        }
        for &l in &self.schedule.levels {
            if self.samples_per_shot % l != 0 || self.samples_per_shot / l < 2 {
                return Err(Error::Config(format!(
                    "samples_per_shot {} not divisible into level {l} with >= 2 points",
                    self.samples_per_shot
                )));
            }
        }
        for (name, lr) in [
            ("lr_trajectory", self.lr_trajectory),
            ("lr_network", self.lr_network),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if self.pipe_iters < 1 {
            return Err(Error::Config("pipe_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// Settings consumed by the measurement pipeline.
    pub fn pipeline_settings(&self) -> PipelineSettings {
        PipelineSettings {
            ns_full: self.samples_per_shot,
            q: self.limits.interp_factor(),
            pipe_iters: self.pipe_iters,
        }
    }
}

/// One slot of the expanded schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedStep {
    /// Index into `schedule.levels`.
    pub level_idx: usize,
    pub phase: Phase,
    /// Evaluate the pipeline with the plain adjoint reconstruction even if
    /// a parametric reconstructor is attached (trajectory phases of the
    /// alternating and hybrid schemes; only joint steps couple trajectory
    /// gradients through the network).
    pub dcadj_recon: bool,
}

/// Expands a schedule into the exact step sequence. Without reconstructor
/// parameters, network steps are dropped and joint steps degrade to
/// trajectory steps.
pub fn phase_plan(schedule: &TrainSchedule, has_params: bool) -> Vec<PlannedStep> {
    let n_ds = schedule.steps_per_level;
    let mut plan = Vec::new();
    let push = |plan: &mut Vec<PlannedStep>, level_idx, phase, dcadj_recon, count| {
        for _ in 0..count {
            plan.push(PlannedStep {
                level_idx,
                phase,
                dcadj_recon,
            });
        }
    };
    match schedule.scheme {
        Scheme::Jl => {
            let phase = if has_params {
                Phase::Joint
            } else {
                Phase::Trajectory
            };
            for li in 0..schedule.levels.len() {
                push(&mut plan, li, phase, false, n_ds);
            }
        }
        Scheme::Ad => {
            for li in 0..schedule.levels.len() {
                push(&mut plan, li, Phase::Trajectory, true, n_ds);
            }
            if has_params {
                push(
                    &mut plan,
                    schedule.levels.len() - 1,
                    Phase::Network,
                    false,
                    n_ds,
                );
            }
        }
        Scheme::Hl => {
            for (li, &decim) in schedule.levels.iter().enumerate() {
                if decim > 2 {
                    // coarse levels: short alternating blocks, trajectory
                    // first, the last block truncated to fit
                    let mut placed = 0;
                    let mut traj_block = true;
                    while placed < n_ds {
                        let len = schedule.hl_block.min(n_ds - placed);
                        let (phase, dcadj) = if traj_block {
                            (Phase::Trajectory, true)
                        } else {
                            (Phase::Network, false)
                        };
                        push(&mut plan, li, phase, dcadj, len);
                        placed += len;
                        traj_block = !traj_block;
                    }
                } else if decim == 2 {
                    // near full resolution: one half-length block each
                    let k_steps = n_ds / 2;
                    push(&mut plan, li, Phase::Trajectory, true, k_steps);
                    push(&mut plan, li, Phase::Network, false, n_ds - k_steps);
                } else {
                    // full resolution: true joint optimization throughout
                    push(&mut plan, li, Phase::Joint, false, n_ds);
                }
            }
            if !has_params {
                plan = plan
                    .into_iter()
                    .filter_map(|ps| match ps.phase {
                        Phase::Network => None,
                        Phase::Joint => Some(PlannedStep {
                            phase: Phase::Trajectory,
                            ..ps
                        }),
                        Phase::Trajectory => Some(ps),
                    })
                    .collect();
            }
        }
    }
    plan
}

/// Shape of the measurement pipeline: control points are expanded to
/// `ns_full` per shot, interpolated by `q`, and density weights use
/// `pipe_iters` fixed-point iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineSettings {
    pub ns_full: usize,
    pub q: usize,
    pub pipe_iters: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Decimation factor of the active level.
    pub level: usize,
    pub phase: Phase,
    /// Mean batch loss before the update.
    pub loss: f64,
    /// Mean validation loss, present on validation steps.
    pub val_loss: Option<f64>,
    pub max_box_violation: f64,
    pub max_speed_violation: f64,
    pub max_accel_violation: f64,
    /// Wall time of the step; excluded from the determinism contract.
    pub wall_ms: f64,
}

/// Result of a training run: the best-validation snapshot plus the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation trajectory at full control resolution, feasible.
    pub trajectory: Trajectory,
    /// Best-validation reconstructor parameters, when the reconstructor
    /// has any.
    pub params: Option<DenoiserParams>,
    pub log: Vec<StepRecord>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn expanded_plan(k: &Trajectory, set: &PipelineSettings, n: usize) -> Result<NufftPlan> {
    let full = expand_to_full(k, set.ns_full)?;
    let points = adc_interpolate(&full, set.q)?;
    NufftPlan::new(&points, n, NufftMethod::Auto)
}

/// Density-compensation weights for the expanded and interpolated
/// trajectory; callers freeze these across a few optimizer steps.
pub fn pipeline_weights(k: &Trajectory, set: &PipelineSettings, n: usize) -> Result<DensityWeights> {
    let plan = expanded_plan(k, set, n)?;
    pipe_weights_with_plan(&plan, set.pipe_iters)
}

/// Mean pipeline loss over `images` for a given trajectory, optionally
/// reusing frozen density weights (recomputed from `k` when `None`).
pub fn pipeline_loss(
    k: &Trajectory,
    images: &[&ComplexImage],
    recon: &Reconstructor,
    loss_w: &LossWeights,
    set: &PipelineSettings,
    frozen_weights: Option<&DensityWeights>,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Config("loss needs at least one image".into()));
    }
    let n = images[0].side();
    let plan = expanded_plan(k, set, n)?;
    let weights = match frozen_weights {
        Some(w) => w.clone(),
        None => pipe_weights_with_plan(&plan, set.pipe_iters)?,
    };
    let mut total = 0.0;
    for x in images {
        let y = plan.forward(x)?;
        let xdc = plan.adjoint(&weights.apply(&y)?)?;
        total += combined_loss(x, &recon.apply(&xdc), loss_w)?;
    }
    Ok(total / images.len() as f64)
}

/// Mean pipeline loss and its gradient with respect to the decimated
/// control points, with density weights frozen (recomputed from `k` when
/// `None`). This is the raw gradient `trajectory_step` feeds the optimizer.
pub fn pipeline_grad(
    k: &Trajectory,
    images: &[&ComplexImage],
    recon: &Reconstructor,
    loss_w: &LossWeights,
    set: &PipelineSettings,
    frozen_weights: Option<&DensityWeights>,
) -> Result<(f64, Array3<f64>)> {
    if images.is_empty() {
        return Err(Error::Config("loss needs at least one image".into()));
    }
    let n = images[0].side();
    let plan = expanded_plan(k, set, n)?;
    let weights = match frozen_weights {
        Some(w) => w.clone(),
        None => pipe_weights_with_plan(&plan, set.pipe_iters)?,
    };
    let (loss, g_pos, _) = batch_eval(&plan, &weights, recon, images, loss_w, true, false)?;
    let g_k = pull_back_k_grad(
        &g_pos.expect("requested"),
        k.num_shots(),
        k.samples_per_shot(),
        set,
    )?;
    Ok((loss, g_k))
}

/// Per-item forward and backward pass. Returns the loss, the position
/// gradient over interpolated samples (when requested), and reconstructor
/// parameter gradients (when requested and present).
fn eval_item(
    plan: &NufftPlan,
    weights: &DensityWeights,
    recon: &Reconstructor,
    x: &ComplexImage,
    loss_w: &LossWeights,
    want_k: bool,
    want_theta: bool,
) -> Result<(f64, Option<Array2<f64>>, Option<DenoiserParams>)> {
    let y = plan.forward(x)?;
    let yw = weights.apply(&y)?;
    let xdc = plan.adjoint(&yw)?;
    let xhat = recon.apply(&xdc);
    let (loss, g_xhat) = combined_loss_and_grad(x, &xhat, loss_w)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("pipeline loss".into()));
    }
    let (g_xdc, g_theta) = recon.apply_backward(&xdc, &g_xhat);
    let g_pos = if want_k {
        // two position paths: through the adjoint operator applied to the
        // weighted data, and through the forward operator via the data
        // cotangent g_y = w . (F g_xdc)
        let mut g = plan.adjoint_position_vjp(&yw, &g_xdc)?;
        let g_y = dcp_adjoint_y_cotangent(&g_xdc, plan, weights)?;
        g += &plan.forward_position_vjp(x, &g_y)?;
        Some(g)
    } else {
        None
    };
    Ok((loss, g_pos, if want_theta { g_theta } else { None }))
}

/// Mean loss and gradients over a batch.
fn batch_eval(
    plan: &NufftPlan,
    weights: &DensityWeights,
    recon: &Reconstructor,
    batch: &[&ComplexImage],
    loss_w: &LossWeights,
    want_k: bool,
    want_theta: bool,
) -> Result<(f64, Option<Array2<f64>>, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Config("batch must not be empty".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut g_pos_sum: Option<Array2<f64>> = None;
    let mut g_theta_sum: Option<Vec<f64>> = None;
    for x in batch {
        let (loss, g_pos, g_theta) = eval_item(plan, weights, recon, x, loss_w, want_k, want_theta)?;
        loss_sum += loss;
        if let Some(g) = g_pos {
            match &mut g_pos_sum {
                Some(acc) => *acc += &g,
                None => g_pos_sum = Some(g),
            }
        }
        if let Some(g) = g_theta {
            let flat = g.to_flat();
            match &mut g_theta_sum {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&flat) {
                        *a += b;
                    }
                }
                None => g_theta_sum = Some(flat),
            }
        }
    }
    if let Some(acc) = &mut g_pos_sum {
        acc.mapv_inplace(|v| v * scale);
    }
    if let Some(acc) = &mut g_theta_sum {
        for v in acc.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss_sum * scale, g_pos_sum, g_theta_sum))
}

/// Pulls interpolated-sample position gradients back to the decimated
/// control points.
fn pull_back_k_grad(
    g_pos: &Array2<f64>,
    nc: usize,
    ns_level: usize,
    set: &PipelineSettings,
) -> Result<Array3<f64>> {
    let g_full = adc_interpolate_vjp(g_pos, nc, set.ns_full, set.q)?;
    expand_to_full_vjp(&g_full, ns_level)
}

/// One trajectory update: mean batch gradient through both position paths,
/// ADAM step, projection onto the constraint set. Returns the projected
/// trajectory and the pre-update batch loss. Density weights are computed
/// fresh here; the training loop refreshes them on its own cadence.
pub fn trajectory_step(
    k: &Trajectory,
    batch: &[&ComplexImage],
    recon: &Reconstructor,
    loss_w: &LossWeights,
    bounds: &ConstraintBounds,
    set: &PipelineSettings,
    state: &mut OptimState,
) -> Result<(Trajectory, f64)> {
    let (loss, g_k) = pipeline_grad(k, batch, recon, loss_w, set, None)?;
    let projected = apply_k_update(k, &g_k, bounds, state)?;
    Ok((projected, loss))
}

fn apply_k_update(
    k: &Trajectory,
    g_k: &Array3<f64>,
    bounds: &ConstraintBounds,
    state: &mut OptimState,
) -> Result<Trajectory> {
    let dim = k.shots().dim();
    let mut flat: Vec<f64> = k.shots().iter().copied().collect();
    let grads: Vec<f64> = g_k.iter().copied().collect();
    adam_step(state, &mut flat, &grads)?;
    let moved = Array3::from_shape_vec(dim, flat).expect("same element count");
    Ok(project_shots(&moved, bounds, &ProjectorOptions::default())?.trajectory)
}

fn apply_theta_update(
    recon: &mut Reconstructor,
    g_theta: &[f64],
    state: &mut OptimState,
) -> Result<()> {
    let params = recon
        .params()
        .ok_or_else(|| Error::Config("network step needs reconstructor parameters".into()))?;
    let mut flat = params.to_flat();
    radam_step(state, &mut flat, g_theta)?;
    recon.set_params(DenoiserParams::from_flat(&flat)?);
    Ok(())
}

fn level_bounds(full: &ConstraintBounds, ns_full: usize, ns_level: usize) -> ConstraintBounds {
    full.scaled((ns_full as f64 - 1.0) / (ns_level as f64 - 1.0))
}

fn snapshot_full(
    k: &Trajectory,
    ns_full: usize,
    bounds_full: &ConstraintBounds,
) -> Result<Trajectory> {
    let full = expand_to_full(k, ns_full)?;
    Ok(project_shots(full.shots(), bounds_full, &ProjectorOptions::default())?.trajectory)
}

/// Cached per-trajectory state: transform plan, frozen density weights,
/// and adjoint images for steps that do not move the trajectory.
struct PipelineCache {
    plan: Option<NufftPlan>,
    weights: Option<DensityWeights>,
    k_updates_since_refresh: usize,
    xdc: HashMap<usize, ComplexImage>,
}

impl PipelineCache {
    fn new() -> Self {
        Self {
            plan: None,
            weights: None,
            k_updates_since_refresh: 0,
            xdc: HashMap::new(),
        }
    }

    fn note_k_update(&mut self) {
        self.plan = None;
        self.xdc.clear();
        self.k_updates_since_refresh += 1;
    }

    fn force_refresh(&mut self) {
        self.plan = None;
        self.weights = None;
        self.xdc.clear();
    }

    fn ensure(
        &mut self,
        k: &Trajectory,
        set: &PipelineSettings,
        n: usize,
        dc_refresh: usize,
    ) -> Result<()> {
        if self.plan.is_none() {
            self.plan = Some(expanded_plan(k, set, n)?);
        }
        if self.weights.is_none() || self.k_updates_since_refresh >= dc_refresh {
            self.weights = Some(pipe_weights_with_plan(
                self.plan.as_ref().unwrap(),
                set.pipe_iters,
            )?);
            self.k_updates_since_refresh = 0;
            self.xdc.clear();
        }
        Ok(())
    }
}

fn cached_xdc<'a>(
    cache: &'a mut HashMap<usize, ComplexImage>,
    plan: &NufftPlan,
    weights: &DensityWeights,
    idx: usize,
    x: &ComplexImage,
) -> Result<&'a ComplexImage> {
    if !cache.contains_key(&idx) {
        let y = plan.forward(x)?;
        let xdc = plan.adjoint(&weights.apply(&y)?)?;
        cache.insert(idx, xdc);
    }
    Ok(&cache[&idx])
}

/// Runs the configured scheme over a dataset (split 90/10 into train and
/// validation) and returns the best-validation trajectory and parameters
/// with the full training log.
pub fn run_scheme(
    config: &TrainConfig,
    recon: Reconstructor,
    dataset: &[ComplexImage],
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 images (train + validation), got {}",
            dataset.len()
        )));
    }
    let n = config.geometry.matrix_size();
    for img in dataset {
        if img.side() != n {
            return Err(Error::Shape(format!(
                "dataset image side {} does not match geometry {n}",
                img.side()
            )));
        }
    }
    let train_count = (dataset.len() * 9 / 10).max(1);
    let (train, val) = dataset.split_at(train_count);
    let val_refs: Vec<(usize, &ComplexImage)> = val
        .iter()
        .enumerate()
        .map(|(i, x)| (train_count + i, x))
        .collect();

    let sched = &config.schedule;
    let set = config.pipeline_settings();
    let bounds_full = constraint_bounds(&config.limits, &config.geometry)?;
    let nc = config.num_shots;

    // radial warm start at full resolution, decimated to the first level
    let span = bounds_full.max_radial_span(set.ns_full);
    let k_init = radial_init_feasible(nc, set.ns_full, span, &bounds_full)?;
    let mut level_idx = 0;
    let mut k = multires_decimate(&k_init, sched.levels[0])?;
    let mut bounds = level_bounds(&bounds_full, set.ns_full, k.samples_per_shot());
    k = project_shots(k.shots(), &bounds, &ProjectorOptions::default())?.trajectory;

    let mut recon = recon;
    let plan = phase_plan(sched, recon.params().is_some());
    let mut traj_opt = OptimState::new(nc * k.samples_per_shot() * 2, config.lr_trajectory)?;
    let mut net_opt = match recon.params() {
        Some(p) => Some(OptimState::new(p.num_params(), config.lr_network)?),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut cache = PipelineCache::new();
    let mut log = Vec::with_capacity(plan.len());
    let plain_recon = Reconstructor::DcpAdjoint;

    cache.ensure(&k, &set, n, sched.dc_refresh)?;
    let initial_val_loss = {
        let plan_ref = cache.plan.as_ref().unwrap();
        let weights_ref = cache.weights.as_ref().unwrap();
        mean_val_loss(
            plan_ref,
            weights_ref,
            &recon,
            &val_refs,
            &config.loss,
            &mut cache.xdc,
        )?
    };
    let mut best_val_loss = initial_val_loss;
    let mut best_k = snapshot_full(&k, set.ns_full, &bounds_full)?;
    let mut best_params = recon.params().cloned();
    let mut steps_since_improvement = 0usize;
    let mut stopped_early = false;

    for (step, ps) in plan.iter().enumerate() {
        let started = Instant::now();
        if ps.level_idx != level_idx {
            let factor = sched.levels[level_idx] / sched.levels[ps.level_idx];
            k = multires_upsample(&k, factor)?;
            bounds = level_bounds(&bounds_full, set.ns_full, k.samples_per_shot());
            k = project_shots(k.shots(), &bounds, &ProjectorOptions::default())?.trajectory;
            traj_opt = OptimState::new(nc * k.samples_per_shot() * 2, config.lr_trajectory)?;
            cache.force_refresh();
            level_idx = ps.level_idx;
        }
        cache.ensure(&k, &set, n, sched.dc_refresh)?;

        let batch_idx: Vec<usize> = (0..sched.batch_size)
            .map(|_| rng.gen_range(0..train.len()))
            .collect();
        let step_recon = if ps.dcadj_recon { &plain_recon } else { &recon };

        let loss = match ps.phase {
            Phase::Trajectory | Phase::Joint => {
                let batch: Vec<&ComplexImage> = batch_idx.iter().map(|&i| &train[i]).collect();
                let want_theta = ps.phase == Phase::Joint;
                let (loss, g_pos, g_theta) = batch_eval(
                    cache.plan.as_ref().unwrap(),
                    cache.weights.as_ref().unwrap(),
                    step_recon,
                    &batch,
                    &config.loss,
                    true,
                    want_theta,
                )?;
                if let Some(g) = g_theta {
                    apply_theta_update(
                        &mut recon,
                        &g,
                        net_opt.as_mut().expect("joint step needs parameters"),
                    )?;
                }
                let g_k =
                    pull_back_k_grad(&g_pos.expect("requested"), nc, k.samples_per_shot(), &set)?;
                k = apply_k_update(&k, &g_k, &bounds, &mut traj_opt)?;
                cache.note_k_update();
                loss
            }
            Phase::Network => {
                let plan_ref = cache.plan.as_ref().unwrap();
                let weights_ref = cache.weights.as_ref().unwrap();
                let scale = 1.0 / batch_idx.len() as f64;
                let mut loss_sum = 0.0;
                let mut g_theta_sum: Option<Vec<f64>> = None;
                for &i in &batch_idx {
                    let xdc =
                        cached_xdc(&mut cache.xdc, plan_ref, weights_ref, i, &train[i])?.clone();
                    let xhat = step_recon.apply(&xdc);
                    let (loss, g_xhat) = combined_loss_and_grad(&train[i], &xhat, &config.loss)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFinite("pipeline loss".into()));
                    }
                    loss_sum += loss;
                    let (_, g_theta) = step_recon.apply_backward(&xdc, &g_xhat);
                    let flat = g_theta
                        .ok_or_else(|| {
                            Error::Config("network step needs reconstructor parameters".into())
                        })?
                        .to_flat();
                    match &mut g_theta_sum {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&flat) {
                                *a += b;
                            }
                        }
                        None => g_theta_sum = Some(flat),
                    }
                }
                let mut g = g_theta_sum.expect("batch is non-empty");
                for v in g.iter_mut() {
                    *v *= scale;
                }
                apply_theta_update(
                    &mut recon,
                    &g,
                    net_opt.as_mut().expect("network step needs parameters"),
                )?;
                loss_sum * scale
            }
        };

        steps_since_improvement += 1;
        let mut val_loss = None;
        if (step + 1) % sched.val_every == 0 {
            cache.ensure(&k, &set, n, sched.dc_refresh)?;
            let v = mean_val_loss(
                cache.plan.as_ref().unwrap(),
                cache.weights.as_ref().unwrap(),
                &recon,
                &val_refs,
                &config.loss,
                &mut cache.xdc,
            )?;
            if v < best_val_loss {
                best_val_loss = v;
                best_k = snapshot_full(&k, set.ns_full, &bounds_full)?;
                best_params = recon.params().cloned();
                steps_since_improvement = 0;
            }
            val_loss = Some(v);
        }

        let report = check_feasibility(&k, &bounds, FEASIBILITY_TOL);
        log.push(StepRecord {
            step,
            level: sched.levels[level_idx],
            phase: ps.phase,
            loss,
            val_loss,
            max_box_violation: report.max_box_violation,
            max_speed_violation: report.max_speed_violation,
            max_accel_violation: report.max_accel_violation,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        if steps_since_improvement >= sched.patience {
            stopped_early = true;
            break;
        }
    }

    // pick up improvement from trailing steps that fell between validations
    if !stopped_early && !log.last().is_some_and(|r| r.val_loss.is_some()) {
        cache.ensure(&k, &set, n, sched.dc_refresh)?;
        let v = mean_val_loss(
            cache.plan.as_ref().unwrap(),
            cache.weights.as_ref().unwrap(),
            &recon,
            &val_refs,
            &config.loss,
            &mut cache.xdc,
        )?;
        if v < best_val_loss {
            best_val_loss = v;
            best_k = snapshot_full(&k, set.ns_full, &bounds_full)?;
            best_params = recon.params().cloned();
        }
        if let Some(last) = log.last_mut() {
            last.val_loss = Some(v);
        }
    }

    Ok(TrainOutcome {
        trajectory: best_k,
        params: best_params,
        log,
        initial_val_loss,
        best_val_loss,
        stopped_early,
    })
}

fn mean_val_loss(
    plan: &NufftPlan,
    weights: &DensityWeights,
    recon: &Reconstructor,
    val: &[(usize, &ComplexImage)],
    loss_w: &LossWeights,
    cache: &mut HashMap<usize, ComplexImage>,
) -> Result<f64> {
    let mut total = 0.0;
    for &(idx, x) in val {
        let xdc = cached_xdc(cache, plan, weights, idx, x)?;
        total += combined_loss(x, &recon.apply(xdc), loss_w)?;
    }
    Ok(total / val.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::phantom_generate;
    use num_complex::Complex64;

    fn desk_schedule(scheme: Scheme) -> TrainSchedule {
        TrainSchedule {
            scheme,
            ..TrainSchedule::default()
        }
    }

    fn phase_counts(plan: &[PlannedStep], level_idx: usize) -> (usize, usize, usize) {
        let mut t = 0;
        let mut n = 0;
        let mut j = 0;
        for ps in plan.iter().filter(|ps| ps.level_idx == level_idx) {
            match ps.phase {
                Phase::Trajectory => t += 1,
                Phase::Network => n += 1,
                Phase::Joint => j += 1,
            }
        }
        (t, n, j)
    }

    #[test]
    fn schedule_default_is_desk_scale() {
        let s = TrainSchedule::default();
        assert_eq!(s.levels, vec![4, 2, 1]);
        assert_eq!(s.steps_per_level, 100);
        assert_eq!(s.scheme, Scheme::Hl);
        assert_eq!(s.hl_block, 20);
        assert_eq!(s.batch_size, 8);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn schedule_validation_rejects_bad_levels() {
        let base = TrainSchedule::default();
        for levels in [
            vec![],
            vec![4, 2],
            vec![2, 4, 1],
            vec![3, 1],
            vec![4, 4, 1],
        ] {
            let s = TrainSchedule {
                levels,
                ..base.clone()
            };
            assert!(s.validate().is_err(), "{:?}", s.levels);
        }
        let s = TrainSchedule {
            batch_size: 0,
            ..base
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn hl_plan_matches_block_table_at_desk_scale() {
        let plan = phase_plan(&desk_schedule(Scheme::Hl), true);
        assert_eq!(plan.len(), 300);
        // level 4: five alternating 20-step blocks starting with trajectory
        for (i, ps) in plan[..100].iter().enumerate() {
            assert_eq!(ps.level_idx, 0);
            let expect = if (i / 20) % 2 == 0 {
                Phase::Trajectory
            } else {
                Phase::Network
            };
            assert_eq!(ps.phase, expect, "step {i}");
        }
        // level 2: one 50-step block each
        assert_eq!(phase_counts(&plan, 1), (50, 50, 0));
        assert!(plan[100..150].iter().all(|p| p.phase == Phase::Trajectory));
        assert!(plan[150..200].iter().all(|p| p.phase == Phase::Network));
        // level 1: true joint optimization throughout
        assert_eq!(phase_counts(&plan, 2), (0, 0, 100));
        assert!(plan[200..300]
            .iter()
            .all(|p| p.phase == Phase::Joint && p.level_idx == 2));
        // trajectory blocks keep the plain adjoint; only joint steps
        // couple trajectory gradients through the network
        assert!(plan
            .iter()
            .all(|p| p.dcadj_recon == (p.phase == Phase::Trajectory)));
    }

    #[test]
    fn hl_plan_truncates_last_block_at_paper_scale() {
        let s = TrainSchedule {
            levels: vec![32, 16, 8, 4, 2, 1],
            steps_per_level: 250,
            ..desk_schedule(Scheme::Hl)
        };
        let plan = phase_plan(&s, true);
        // 250 = 6 * (20 + 20) + 10, so the truncated tail block is trajectory
        let (t, n, j) = phase_counts(&plan, 0);
        assert_eq!((t, n, j), (130, 120, 0));
        // level 2 splits 125/125; level 1 is joint throughout
        assert_eq!(phase_counts(&plan, 4), (125, 125, 0));
        assert_eq!(phase_counts(&plan, 5), (0, 0, 250));
        assert_eq!(plan.len(), 6 * 250);
    }

    #[test]
    fn ad_plan_is_trajectory_then_network() {
        let plan = phase_plan(&desk_schedule(Scheme::Ad), true);
        assert_eq!(plan.len(), 400);
        assert!(plan[..300]
            .iter()
            .all(|p| p.phase == Phase::Trajectory && p.dcadj_recon));
        assert!(plan[300..]
            .iter()
            .all(|p| p.phase == Phase::Network && p.level_idx == 2 && !p.dcadj_recon));

        let bare = phase_plan(&desk_schedule(Scheme::Ad), false);
        assert_eq!(bare.len(), 300);
        assert!(bare.iter().all(|p| p.phase == Phase::Trajectory));
    }

    #[test]
    fn jl_plan_is_joint_throughout() {
        let plan = phase_plan(&desk_schedule(Scheme::Jl), true);
        assert_eq!(plan.len(), 300);
        assert!(plan.iter().all(|p| p.phase == Phase::Joint));
        let bare = phase_plan(&desk_schedule(Scheme::Jl), false);
        assert!(bare.iter().all(|p| p.phase == Phase::Trajectory));
    }

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let cfg = TrainConfig::from_json(r#"{"geometry": {"n": 64, "fov": 0.23}}"#).unwrap();
        assert_eq!(cfg.num_shots, 8);
        assert_eq!(cfg.samples_per_shot, 64);
        assert_eq!(cfg.schedule, TrainSchedule::default());
        assert_eq!(cfg.lr_trajectory, 1e-3);
        assert_eq!(cfg.pipe_iters, 10);

        assert!(TrainConfig::from_json(r#"{"geometry": {"n": 64, "fov": 0.23}, "bogus": 1}"#)
            .is_err());
        assert!(TrainConfig::from_json(
            r#"{"geometry": {"n": 64, "fov": 0.23}, "schedule": {"warmup": 5}}"#
        )
        .is_err());
        // 6 control points cannot decimate by the default coarsest level 4
        assert!(TrainConfig::from_json(
            r#"{"geometry": {"n": 64, "fov": 0.23}, "samples_per_shot": 6}"#
        )
        .is_err());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = TrainConfig::from_json(
            r#"{
                "geometry": {"n": 32, "fov": 0.23},
                "num_shots": 2,
                "samples_per_shot": 8,
                "schedule": {"levels": [2, 1], "steps_per_level": 3, "scheme": "ad"},
                "lr_trajectory": 0.01
            }"#,
        )
        .unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = TrainConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
    }

    fn tiny_config(scheme: Scheme, steps: usize) -> TrainConfig {
        TrainConfig::from_json(&format!(
            r#"{{
                "geometry": {{"n": 32, "fov": 0.23}},
                "num_shots": 2,
                "samples_per_shot": 8,
                "schedule": {{
                    "levels": [2, 1],
                    "steps_per_level": {steps},
                    "scheme": "{}",
                    "batch_size": 2,
                    "val_every": 2,
                    "dc_refresh": 2,
                    "hl_block": 2
                }}
            }}"#,
            match scheme {
                Scheme::Jl => "jl",
                Scheme::Ad => "ad",
                Scheme::Hl => "hl",
            }
        ))
        .unwrap()
    }

    #[test]
    fn zero_batch_leaves_feasible_trajectory_fixed() {
        // an all-zero target makes every loss term and gradient exactly
        // zero, so the step reduces to projecting an already-feasible point
        let bounds = ConstraintBounds {
            speed: 0.3,
            accel: 0.1,
        };
        let k = crate::geometry::radial_init(2, 8, 0.5).unwrap();
        let set = PipelineSettings {
            ns_full: 8,
            q: 2,
            pipe_iters: 3,
        };
        let zero = ComplexImage::zeros(16);
        let batch = [&zero];
        let mut state = OptimState::new(2 * 8 * 2, 1e-3).unwrap();
        let (k2, loss) = trajectory_step(
            &k,
            &batch,
            &Reconstructor::DcpAdjoint,
            &LossWeights::default(),
            &bounds,
            &set,
            &mut state,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(k2.shots(), k.shots());
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn trajectory_gradient_matches_finite_differences() {
        // directional derivative of the full pipeline (frozen weights)
        // against central differences, at direct-transform sizes
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 16;
        let nc = 2;
        let ns = 4;
        let set = PipelineSettings {
            ns_full: 8,
            q: 2,
            pipe_iters: 4,
        };
        let mut img = ComplexImage::zeros(n);
        for v in img.data_mut().iter_mut() {
            *v = Complex64::new(rng.gen_range(-0.5..0.5) + 0.02, rng.gen_range(-0.5..0.5) + 0.015);
        }
        let mut shots = Array3::zeros((nc, ns, 2));
        for v in shots.iter_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
        let k = Trajectory::new(shots).unwrap();
        let mut dir = Array3::zeros((nc, ns, 2));
        for v in dir.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }

        let recon = Reconstructor::DcpAdjoint;
        let loss_w = LossWeights::default();
        let weights = pipeline_weights(&k, &set, n).unwrap();
        let plan = expanded_plan(&k, &set, n).unwrap();
        let (_, g_pos, _) =
            batch_eval(&plan, &weights, &recon, &[&img], &loss_w, true, false).unwrap();
        let g_k = pull_back_k_grad(&g_pos.unwrap(), nc, ns, &set).unwrap();
        let analytic: f64 = g_k.iter().zip(dir.iter()).map(|(g, d)| g * d).sum();

        let h = 1e-5;
        let eval = |sign: f64| {
            let moved = Trajectory::new(k.shots() + &(sign * h * &dir)).unwrap();
            pipeline_loss(&moved, &[&img], &recon, &loss_w, &set, Some(&weights)).unwrap()
        };
        let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
        assert!(
            rel <= 1e-2,
            "analytic {analytic:.3e} vs numeric {numeric:.3e} (rel {rel:.3e})"
        );
    }

    #[test]
    fn run_scheme_is_deterministic_and_feasible() {
        let cfg = tiny_config(Scheme::Jl, 3);
        let data = phantom_generate(32, 5, 11, true).unwrap();
        let run = || {
            run_scheme(
                &cfg,
                Reconstructor::Denoiser(DenoiserParams::init(3)),
                &data,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log.len(), 6);
        assert_eq!(a.log.len(), b.log.len());
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.step, rb.step);
            assert_eq!(ra.level, rb.level);
            assert_eq!(ra.phase, rb.phase);
            assert_eq!(ra.loss, rb.loss);
            assert_eq!(ra.val_loss, rb.val_loss);
            // wall_ms is excluded from the determinism contract
        }
        assert_eq!(a.trajectory.shots(), b.trajectory.shots());
        assert_eq!(
            a.params.as_ref().unwrap().to_flat(),
            b.params.as_ref().unwrap().to_flat()
        );

        // every logged iterate is feasible and the levels follow the plan
        for r in &a.log {
            assert!(r.max_box_violation <= FEASIBILITY_TOL);
            assert!(r.max_speed_violation <= FEASIBILITY_TOL);
            assert!(r.max_accel_violation <= FEASIBILITY_TOL);
        }
        let levels: Vec<usize> = a.log.iter().map(|r| r.level).collect();
        assert_eq!(levels, vec![2, 2, 2, 1, 1, 1]);

        // the returned snapshot lives at full resolution and is feasible
        assert_eq!(a.trajectory.samples_per_shot(), 8);
        let bounds = constraint_bounds(&cfg.limits, &cfg.geometry).unwrap();
        assert!(check_feasibility(&a.trajectory, &bounds, FEASIBILITY_TOL).feasible);
    }

    #[test]
    fn run_scheme_ad_without_params_returns_no_params() {
        let cfg = tiny_config(Scheme::Ad, 2);
        let data = phantom_generate(32, 4, 5, true).unwrap();
        let out = run_scheme(&cfg, Reconstructor::DcpAdjoint, &data).unwrap();
        assert!(out.params.is_none());
        assert_eq!(out.log.len(), 4);
        assert!(out
            .log
            .iter()
            .all(|r| matches!(r.phase, Phase::Trajectory)));
        assert!(out.best_val_loss <= out.initial_val_loss);
    }

    #[test]
    fn run_scheme_stops_early_on_flat_validation() {
        // all-zero images give exactly constant (zero) loss, so validation
        // never improves and patience trips immediately
        let mut cfg = tiny_config(Scheme::Jl, 50);
        cfg.schedule.val_every = 1;
        cfg.schedule.patience = 1;
        let data = vec![ComplexImage::zeros(32); 4];
        let out = run_scheme(&cfg, Reconstructor::DcpAdjoint, &data).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.initial_val_loss, 0.0);
        assert_eq!(out.best_val_loss, 0.0);
    }

    #[test]
    fn run_scheme_rejects_bad_datasets() {
        let cfg = tiny_config(Scheme::Jl, 2);
        assert!(run_scheme(&cfg, Reconstructor::DcpAdjoint, &[]).is_err());
        let one = phantom_generate(32, 1, 0, true).unwrap();
        assert!(run_scheme(&cfg, Reconstructor::DcpAdjoint, &one).is_err());
        let wrong = phantom_generate(64, 3, 0, true).unwrap();
        assert!(run_scheme(&cfg, Reconstructor::DcpAdjoint, &wrong).is_err());
    }

    #[test]
    fn hl_run_alternates_phases_in_log() {
        let cfg = tiny_config(Scheme::Hl, 4);
        let data = phantom_generate(32, 4, 9, true).unwrap();
        let out = run_scheme(
            &cfg,
            Reconstructor::Denoiser(DenoiserParams::init(1)),
            &data,
        )
        .unwrap();
        // level 2: 2 trajectory + 2 network; level 1: 4 joint
        let phases: Vec<Phase> = out.log.iter().map(|r| r.phase).collect();
        assert_eq!(
            phases,
            vec![
                Phase::Trajectory,
                Phase::Trajectory,
                Phase::Network,
                Phase::Network,
                Phase::Joint,
                Phase::Joint,
                Phase::Joint,
                Phase::Joint,
            ]
        );
    }
}
