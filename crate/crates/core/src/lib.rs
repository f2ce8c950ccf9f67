//! Learning hardware-feasible non-Cartesian MRI sampling trajectories
//! jointly with an image reconstructor.
//!
//! The pipeline: a multi-shot trajectory parameterized by control points is
//! interpolated to readout rate, pushed through a non-uniform Fourier
//! forward model onto a training image, reconstructed, and scored by a
//! perceptual loss. Gradients flow back to the control points, which are
//! projected onto the intersection of scanner box/speed/acceleration
//! constraints after every optimizer step. A multi-resolution schedule
//! refines the control grid from coarse to fine.

pub mod density;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod nufft;
pub mod objective;
pub mod optim;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod sampling;
pub mod trainer;

pub use density::{pipe_weights, pipe_weights_with_plan, DensityWeights, DEFAULT_PIPE_ITERS};
pub use error::{Error, Result};
pub use eval::{
    center_density, evaluate, export_waveforms, write_eval_csv, write_eval_json,
    write_waveforms_csv, EvalReport, EvalRow, Stats,
};
pub use geometry::{
    constraint_bounds, radial_init, radial_init_feasible, ComplexImage, ConstraintBounds,
    HardwareLimits, ImagingGeometry, KSpaceData, Trajectory,
};
pub use io::{
    read_dataset, read_denoiser, read_log, read_trajectory, write_dataset, write_denoiser,
    write_log, write_trajectory, DatasetMeta, TrajectoryFile,
};
pub use nufft::{
    nufft_adjoint, nufft_forward, nufft_position_vjp_adjoint, nufft_position_vjp_forward,
    NufftMethod, NufftPlan, SamplePointSet,
};
pub use objective::{
    combined_loss, combined_loss_and_grad, combined_loss_grad, ms_ssim, psnr_metric, ssim_metric,
    LossWeights, PSNR_CAP_DB,
};
pub use optim::{adam_step, radam_step, OptimState, DEFAULT_LR};
pub use phantom::phantom_generate;
pub use recon::{
    dcp_adjoint_recon, dcp_adjoint_recon_with_plan, dcp_adjoint_y_cotangent, denoiser_backward,
    denoiser_forward, Conv2d, DenoiserParams, Reconstructor,
};
pub use projector::{
    check_feasibility, project, project_shots, FeasibilityReport, Projection, ProjectorOptions,
    FEASIBILITY_TOL,
};
pub use sampling::{
    adc_interpolate, adc_interpolate_vjp, expand_to_full, expand_to_full_vjp, multires_decimate,
    multires_upsample,
};
pub use trainer::{
    phase_plan, pipeline_grad, pipeline_loss, pipeline_weights, run_scheme, trajectory_step,
    Phase, PipelineSettings, PlannedStep, Scheme, StepRecord, TrainConfig, TrainOutcome,
    TrainSchedule,
};
