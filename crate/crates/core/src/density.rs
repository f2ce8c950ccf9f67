//! Iterative density-compensation weights for arbitrary point sets.
//!
//! Non-Cartesian sampling visits some k-space regions more densely than
//! others; the weighted adjoint `F^H (w . y)` only approximates an inverse
//! when `w` undoes that density. The fixed-point scheme here starts from
//! uniform weights and repeatedly divides by the magnitude of the
//! gridded-then-degridded weights, `w <- w / |F F^H w|`, which converges to
//! weights making `F F^H w` flat.
//!
//! Position gradients of the weights are deliberately never computed: the
//! training loop treats compensation as a constant of the current
//! trajectory.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::nufft::{NufftMethod, NufftPlan, SamplePointSet};

const DENOM_FLOOR: f64 = 1e-10;

/// Default fixed iteration count; the scheme stabilizes in well under ten
/// sweeps for the point sets produced here.
pub const DEFAULT_PIPE_ITERS: usize = 10;

/// Per-sample nonnegative compensation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityWeights {
    weights: Vec<f64>,
}

impl DensityWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Shape("empty weight vector".into()));
        }
        if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::Domain(
                "density weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    /// Elementwise product `w . y`, the compensation step of the adjoint
    /// reconstruction.
    pub fn apply(&self, samples: &[Complex64]) -> Result<Vec<Complex64>> {
        if samples.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "expected {} samples, got {}",
                self.weights.len(),
                samples.len()
            )));
        }
        Ok(samples
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| s * *w)
            .collect())
    }
}

/// Fixed-point compensation weights for `points` against an `N x N` image
/// grid, using a fresh transform plan.
pub fn pipe_weights(points: &SamplePointSet, n: usize, iters: usize) -> Result<DensityWeights> {
    let plan = NufftPlan::new(points, n, NufftMethod::Auto)?;
    pipe_weights_with_plan(&plan, iters)
}

/// Same scheme reusing an existing plan, which the training loop prefers:
/// the plan for the current sample locations already exists there.
pub fn pipe_weights_with_plan(plan: &NufftPlan, iters: usize) -> Result<DensityWeights> {
    if iters < 1 {
        return Err(Error::Config("iteration count must be >= 1".into()));
    }
    let m = plan.num_samples();
    let mut w = vec![1.0f64; m];
    let mut wc = vec![Complex64::default(); m];
    for _ in 0..iters {
        for i in 0..m {
            wc[i] = Complex64::new(w[i], 0.0);
        }
        let img = plan.adjoint(&wc)?;
        let back = plan.forward(&img)?;
        for i in 0..m {
            w[i] /= back[i].norm().max(DENOM_FLOOR);
        }
    }
    DensityWeights::new(w)
}
