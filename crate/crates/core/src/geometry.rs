//! Imaging geometry, trajectory and hardware-limit types.
//!
//! All trajectory coordinates live in the normalized k-space square
//! `[-1, 1]^2`; physical units (T/m, seconds) enter only through
//! [`HardwareLimits`] when deriving per-step bounds or exporting waveforms.

use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Square field of view with an even matrix size.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagingGeometry {
    n: usize,
    fov: f64,
}

impl ImagingGeometry {
    pub fn new(n: usize, fov: f64) -> Result<Self> {
        if n == 0 || n % 2 != 0 {
            return Err(Error::Config(format!(
                "matrix size must be positive and even, got {n}"
            )));
        }
        if !(fov > 0.0) || !fov.is_finite() {
            return Err(Error::Config(format!("field of view must be > 0, got {fov}")));
        }
        Ok(Self { n, fov })
    }

    /// Re-checks the constructor invariants on a deserialized value.
    pub fn validate(&self) -> Result<()> {
        Self::new(self.n, self.fov).map(|_| ())
    }

    pub fn matrix_size(&self) -> usize {
        self.n
    }

    pub fn fov(&self) -> f64 {
        self.fov
    }

    /// Highest spatial frequency on the grid, `kmax = N / (2 fov)` in 1/m.
    pub fn kmax(&self) -> f64 {
        self.n as f64 / (2.0 * self.fov)
    }
}

/// A multi-shot sampling pattern: `num_shots x samples_per_shot` control
/// points in normalized k-space, the optimization variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    shots: Array3<f64>,
}

impl Trajectory {
    /// Wraps an `(Nc, Ns, 2)` coordinate array, validating the invariants
    /// `Nc >= 1`, `Ns >= 2` and all coordinates in `[-1, 1]`.
    pub fn new(shots: Array3<f64>) -> Result<Self> {
        let (nc, ns, d) = shots.dim();
        if d != 2 {
            return Err(Error::Shape(format!(
                "trajectory last axis must have length 2, got {d}"
            )));
        }
        if nc < 1 || ns < 2 {
            return Err(Error::Config(format!(
                "trajectory needs >= 1 shots of >= 2 samples, got {nc} x {ns}"
            )));
        }
        if !shots.iter().all(|&c| c.is_finite() && (-1.0..=1.0).contains(&c)) {
            return Err(Error::Domain(
                "trajectory coordinates must lie in [-1, 1]".into(),
            ));
        }
        Ok(Self { shots })
    }

    pub fn num_shots(&self) -> usize {
        self.shots.dim().0
    }

    pub fn samples_per_shot(&self) -> usize {
        self.shots.dim().1
    }

    pub fn shots(&self) -> &Array3<f64> {
        &self.shots
    }

    pub fn shot(&self, i: usize) -> ArrayView2<'_, f64> {
        self.shots.index_axis(ndarray::Axis(0), i)
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.shots
    }
}

/// Square complex-valued image.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    data: Array2<Complex64>,
}

impl ComplexImage {
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        let (h, w) = data.dim();
        if h != w || h == 0 {
            return Err(Error::Shape(format!("image must be square, got {h} x {w}")));
        }
        Ok(Self { data })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            data: Array2::zeros((n, n)),
        }
    }

    pub fn side(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.data
    }

    /// Per-pixel modulus.
    pub fn magnitude(&self) -> Array2<f64> {
        self.data.mapv(|z| z.norm())
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Per-interpolated-sample complex measurements, `Nc x (Ns * q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData {
    samples: Array2<Complex64>,
}

impl KSpaceData {
    pub fn new(samples: Array2<Complex64>) -> Self {
        Self { samples }
    }

    /// Reassembles shot-major flattened samples into `Nc x (Ns * q)`.
    pub fn from_flat(flat: &[Complex64], nc: usize) -> Result<Self> {
        if nc == 0 || flat.len() % nc != 0 {
            return Err(Error::Shape(format!(
                "cannot split {} samples into {nc} shots",
                flat.len()
            )));
        }
        let per_shot = flat.len() / nc;
        Ok(Self {
            samples: Array2::from_shape_vec((nc, per_shot), flat.to_vec())
                .expect("shape checked above"),
        })
    }

    pub fn samples(&self) -> &Array2<Complex64> {
        &self.samples
    }

    /// Shot-major flattened view (the canonical sample ordering).
    pub fn flat(&self) -> Vec<Complex64> {
        self.samples.iter().copied().collect()
    }
}

/// Scanner gradient-system limits plus the ADC timing that together induce
/// the normalized per-step constraint set.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareLimits {
    /// Maximum gradient amplitude, T/m.
    pub g_max: f64,
    /// Maximum slew rate, T/m/s.
    pub s_max: f64,
    /// Gradient raster time, s. Trajectory control points are one raster
    /// period apart.
    pub raster_time: f64,
    /// ADC dwell time, s.
    pub dwell_time: f64,
    /// Gyromagnetic ratio, Hz/T.
    pub gyromagnetic_ratio: f64,
}

impl Default for HardwareLimits {
    fn default() -> Self {
        Self {
            g_max: 0.04,
            s_max: 180.0,
            raster_time: 1e-5,
            dwell_time: 2e-6,
            gyromagnetic_ratio: 42.576e6,
        }
    }
}

impl HardwareLimits {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("g_max", self.g_max),
            ("s_max", self.s_max),
            ("raster_time", self.raster_time),
            ("dwell_time", self.dwell_time),
            ("gyromagnetic_ratio", self.gyromagnetic_ratio),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        let ratio = self.raster_time / self.dwell_time;
        if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) || ratio < 1.0 - 1e-9 {
            return Err(Error::Config(format!(
                "raster time must be an integer multiple of dwell time, got ratio {ratio}"
            )));
        }
        Ok(())
    }

    /// ADC interpolation factor `q = round(raster / dwell)`.
    pub fn interp_factor(&self) -> usize {
        (self.raster_time / self.dwell_time).round() as usize
    }
}

/// Per-step bounds in normalized units: consecutive control points may move
/// at most `speed` apart, and discrete curvature is capped at `accel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintBounds {
    pub speed: f64,
    pub accel: f64,
}

impl ConstraintBounds {
    /// Rescales the bounds to a coarser control-point grid whose points are
    /// `factor` raster periods apart (speed is linear in the time step,
    /// acceleration quadratic).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            speed: self.speed * factor,
            accel: self.accel * factor * factor,
        }
    }

    /// Largest radial-spoke span whose uniform steps respect the speed bound.
    pub fn max_radial_span(&self, ns: usize) -> f64 {
        (self.speed * (ns as f64 - 1.0) / 2.0).min(1.0)
    }
}

/// Normalized per-step bounds induced by the physical limits:
/// `speed = gamma * g_max * raster / kmax`, `accel = gamma * s_max * raster^2 / kmax`.
pub fn constraint_bounds(limits: &HardwareLimits, geom: &ImagingGeometry) -> Result<ConstraintBounds> {
    limits.validate()?;
    let kmax = geom.kmax();
    Ok(ConstraintBounds {
        speed: limits.gyromagnetic_ratio * limits.g_max * limits.raster_time / kmax,
        accel: limits.gyromagnetic_ratio * limits.s_max * limits.raster_time * limits.raster_time
            / kmax,
    })
}

/// `nc` evenly rotated straight spokes through the k-space center, each `ns`
/// uniformly spaced points from `-span * u_i` to `+span * u_i` at angle
/// `i * pi / nc`.
pub fn radial_init(nc: usize, ns: usize, span: f64) -> Result<Trajectory> {
    if nc < 1 || ns < 2 {
        return Err(Error::Config(format!(
            "radial init needs nc >= 1 and ns >= 2, got {nc} x {ns}"
        )));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::Config(format!("span must be in (0, 1], got {span}")));
    }
    let mut shots = Array3::zeros((nc, ns, 2));
    for i in 0..nc {
        let theta = i as f64 * std::f64::consts::PI / nc as f64;
        let (uy, ux) = theta.sin_cos();
        for p in 0..ns {
            // t sweeps [-1, 1] uniformly along the spoke
            let t = 2.0 * p as f64 / (ns as f64 - 1.0) - 1.0;
            shots[[i, p, 0]] = span * t * ux;
            shots[[i, p, 1]] = span * t * uy;
        }
    }
    Trajectory::new(shots)
}

/// [`radial_init`] that additionally rejects spans whose per-step travel
/// exceeds the speed bound.
pub fn radial_init_feasible(
    nc: usize,
    ns: usize,
    span: f64,
    bounds: &ConstraintBounds,
) -> Result<Trajectory> {
    let max = bounds.max_radial_span(ns);
    if span > max {
        return Err(Error::Config(format!(
            "radial span {span} infeasible: speed bound allows at most {max:.6}"
        )));
    }
    radial_init(nc, ns, span)
}
