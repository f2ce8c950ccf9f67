//! Non-uniform discrete Fourier operators for arbitrary sample locations,
//! with exact vector-Jacobian products with respect to those locations.
//!
//! Convention: for an `N x N` image on the integer pixel grid
//! `n in [-N/2, N/2)^2` and a normalized location `k in [-1, 1]^2`,
//!
//! ```text
//!     forward:  y_m   = sum_n x[n] * exp(-i * pi * k_m . n)
//!     adjoint:  x^[n] = sum_m z_m  * exp(+i * pi * k_m . n)
//! ```
//!
//! so the normalized square maps onto the full Nyquist band. Sums are
//! unnormalized; density compensation absorbs scaling.
//!
//! Large images go through Kaiser-Bessel gridding on a 2x oversampled FFT
//! grid (kernel width 6, Beatty beta); small images (`N <= 32`) use the
//! direct sum. Both satisfy the same accuracy contract against the direct
//! sum. All accumulations run in a fixed order (samples in index order,
//! kernel taps row-major), so results are deterministic.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::ComplexImage;

/// Flattened sample locations in the normalized k-space square.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePointSet {
    points: Array2<f64>,
}

impl SamplePointSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.dim().1 != 2 {
            return Err(Error::Shape(format!(
                "sample points must be M x 2, got M x {}",
                points.dim().1
            )));
        }
        if points.dim().0 == 0 {
            return Err(Error::Shape("empty sample point set".into()));
        }
        if !points
            .iter()
            .all(|&c| c.is_finite() && (-1.0..=1.0).contains(&c))
        {
            return Err(Error::Domain(
                "sample points must lie in [-1, 1]^2".into(),
            ));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }
}

/// Which evaluation path a plan uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NufftMethod {
    /// Direct sum for `N <= 32`, gridding above.
    #[default]
    Auto,
    Direct,
    Gridded,
}

const KERNEL_WIDTH: usize = 6;
const OVERSAMPLING: f64 = 2.0;

/// Beatty et al. choice of the Kaiser-Bessel shape parameter for a given
/// width and oversampling.
fn kaiser_beta(width: usize, oversampling: f64) -> f64 {
    let w = width as f64;
    PI * ((w / oversampling).powi(2) * (oversampling - 0.5).powi(2) - 0.8).sqrt()
}

/// Modified Bessel function of the first kind, order zero (power series;
/// plenty accurate for the argument range beta <= 20 used here).
fn bessel_i0(x: f64) -> f64 {
    let y = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= y / ((k * k) as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

/// Spreading kernel `psi(u) = I0(beta * sqrt(1 - (2u/w)^2))` on `|u| <= w/2`.
fn kb_kernel(u: f64, width: f64, beta: f64) -> f64 {
    let t = 2.0 * u / width;
    let arg = 1.0 - t * t;
    if arg <= 0.0 {
        return 0.0;
    }
    bessel_i0(beta * arg.sqrt())
}

/// Continuous Fourier transform of the spreading kernel,
/// `psihat(xi) = w * sinh(sqrt(beta^2 - (pi w xi)^2)) / sqrt(...)`.
fn kb_kernel_ft(xi: f64, width: f64, beta: f64) -> f64 {
    let p = PI * width * xi;
    let arg2 = beta * beta - p * p;
    if arg2 > 1e-16 {
        let s = arg2.sqrt();
        width * s.sinh() / s
    } else if arg2 < -1e-16 {
        let s = (-arg2).sqrt();
        width * s.sin() / s
    } else {
        width
    }
}

/// Kernel taps of one sample along one axis: wrapped grid indices and
/// kernel weights for the 6 nearest oversampled-grid frequencies.
#[derive(Debug, Clone)]
struct AxisTaps {
    idx: [usize; KERNEL_WIDTH],
    w: [f64; KERNEL_WIDTH],
}

fn axis_taps(nu: f64, grid: usize, width: f64, beta: f64) -> AxisTaps {
    let j0 = nu.floor() as i64 - (KERNEL_WIDTH as i64 / 2 - 1);
    let mut idx = [0usize; KERNEL_WIDTH];
    let mut w = [0f64; KERNEL_WIDTH];
    let g = grid as i64;
    for t in 0..KERNEL_WIDTH {
        let j = j0 + t as i64;
        idx[t] = (j.rem_euclid(g)) as usize;
        w[t] = kb_kernel(j as f64 - nu, width, beta);
    }
    AxisTaps { idx, w }
}

enum PlanKind {
    Direct,
    Gridded {
        grid: usize,
        taps: Vec<(AxisTaps, AxisTaps)>, // (x-axis, y-axis) per sample
        apod: Vec<f64>,                  // 1 / psihat((p - N/2) / grid), length N
        fft_fwd: Arc<dyn Fft<f64>>,
        fft_inv: Arc<dyn Fft<f64>>,
    },
}

/// Precomputed transform for a fixed point set and image size. Reusable
/// across forward/adjoint/VJP applications, which is what makes a training
/// step cheap: the kernel taps are evaluated once per trajectory update.
pub struct NufftPlan {
    n: usize,
    points: Array2<f64>,
    kind: PlanKind,
}

impl NufftPlan {
    pub fn new(points: &SamplePointSet, n: usize, method: NufftMethod) -> Result<Self> {
        if n == 0 || n % 2 != 0 {
            return Err(Error::Config(format!(
                "image side must be positive and even, got {n}"
            )));
        }
        let use_direct = match method {
            NufftMethod::Direct => true,
            NufftMethod::Gridded => false,
            NufftMethod::Auto => n <= 32,
        };
        let kind = if use_direct {
            PlanKind::Direct
        } else {
            let grid = (OVERSAMPLING * n as f64).round() as usize;
            let width = KERNEL_WIDTH as f64;
            let beta = kaiser_beta(KERNEL_WIDTH, OVERSAMPLING);
            let taps = points
                .points()
                .rows()
                .into_iter()
                .map(|p| {
                    // continuous oversampled-grid frequency: nu = k * N
                    let nx = p[0] * n as f64;
                    let ny = p[1] * n as f64;
                    (
                        axis_taps(nx, grid, width, beta),
                        axis_taps(ny, grid, width, beta),
                    )
                })
                .collect();
            let half = n as f64 / 2.0;
            let apod = (0..n)
                .map(|p| 1.0 / kb_kernel_ft((p as f64 - half) / grid as f64, width, beta))
                .collect();
            let mut planner = FftPlanner::new();
            PlanKind::Gridded {
                grid,
                taps,
                apod,
                fft_fwd: planner.plan_fft_forward(grid),
                fft_inv: planner.plan_fft_inverse(grid),
            }
        };
        Ok(Self {
            n,
            points: points.points().clone(),
            kind,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.points.dim().0
    }

    pub fn image_side(&self) -> usize {
        self.n
    }

    /// `y_m = sum_n x[n] exp(-i pi k_m . n)`.
    pub fn forward(&self, image: &ComplexImage) -> Result<Vec<Complex64>> {
        self.check_image(image)?;
        match &self.kind {
            PlanKind::Direct => Ok(self.forward_direct(image.data())),
            PlanKind::Gridded { .. } => Ok(self.forward_gridded(image.data())),
        }
    }

    /// `x^[n] = sum_m z_m exp(+i pi k_m . n)`; the exact adjoint of
    /// [`NufftPlan::forward`] as a linear map.
    pub fn adjoint(&self, samples: &[Complex64]) -> Result<ComplexImage> {
        self.check_samples(samples)?;
        let data = match &self.kind {
            PlanKind::Direct => self.adjoint_direct(samples),
            PlanKind::Gridded { .. } => self.adjoint_gridded(samples),
        };
        ComplexImage::new(data)
    }

    /// Gradients of a real loss with respect to the sample locations through
    /// the forward transform: entry `(m, d)` is
    /// `Re[conj(cot_m) * d(Fx)_m / dk_m^d]`, computed with one extra forward
    /// transform per axis on the coordinate-weighted image.
    pub fn forward_position_vjp(
        &self,
        image: &ComplexImage,
        cotangent: &[Complex64],
    ) -> Result<Array2<f64>> {
        self.check_image(image)?;
        self.check_samples(cotangent)?;
        let m = self.num_samples();
        let mut grads = Array2::zeros((m, 2));
        for (d, weighted) in [self.coord_weighted(image, 0), self.coord_weighted(image, 1)]
            .into_iter()
            .enumerate()
        {
            let f = self.forward(&weighted)?;
            for i in 0..m {
                // d y_m / d k^d = -i pi (F(r^d . x))_m
                grads[[i, d]] = PI * (cotangent[i].conj() * f[i]).im;
            }
        }
        Ok(grads)
    }

    /// Same for the adjoint path: entry `(m, d)` is
    /// `Re[conj(cot)[n] * d(F^H z)[n] / dk_m^d]` summed over pixels, i.e.
    /// `Re[+i pi z_m conj((F(r^d . cot))_m)]`.
    pub fn adjoint_position_vjp(
        &self,
        samples: &[Complex64],
        cotangent: &ComplexImage,
    ) -> Result<Array2<f64>> {
        self.check_samples(samples)?;
        self.check_image(cotangent)?;
        let m = self.num_samples();
        let mut grads = Array2::zeros((m, 2));
        for (d, weighted) in [
            self.coord_weighted(cotangent, 0),
            self.coord_weighted(cotangent, 1),
        ]
        .into_iter()
        .enumerate()
        {
            let f = self.forward(&weighted)?;
            for i in 0..m {
                grads[[i, d]] = -PI * (samples[i] * f[i].conj()).im;
            }
        }
        Ok(grads)
    }

    fn check_image(&self, image: &ComplexImage) -> Result<()> {
        if image.side() != self.n {
            return Err(Error::Shape(format!(
                "plan built for {0} x {0} images, got {1} x {1}",
                self.n,
                image.side()
            )));
        }
        Ok(())
    }

    fn check_samples(&self, samples: &[Complex64]) -> Result<()> {
        if samples.len() != self.num_samples() {
            return Err(Error::Shape(format!(
                "expected {} samples, got {}",
                self.num_samples(),
                samples.len()
            )));
        }
        Ok(())
    }

    /// Image multiplied by the pixel-coordinate map along `axis`
    /// (0 = x = column - N/2, 1 = y = row - N/2).
    fn coord_weighted(&self, image: &ComplexImage, axis: usize) -> ComplexImage {
        let n = self.n;
        let half = n as f64 / 2.0;
        let mut out = Array2::zeros((n, n));
        for r in 0..n {
            for c in 0..n {
                let coord = if axis == 0 {
                    c as f64 - half
                } else {
                    r as f64 - half
                };
                out[[r, c]] = image.data()[[r, c]] * coord;
            }
        }
        ComplexImage::new(out).expect("square by construction")
    }

    fn forward_direct(&self, x: &Array2<Complex64>) -> Vec<Complex64> {
        let n = self.n;
        let half = n as f64 / 2.0;
        let m = self.num_samples();
        let mut out = Vec::with_capacity(m);
        let mut col_phase = vec![Complex64::default(); n];
        let mut row_phase = vec![Complex64::default(); n];
        for i in 0..m {
            let kx = self.points[[i, 0]];
            let ky = self.points[[i, 1]];
            for c in 0..n {
                col_phase[c] = Complex64::from_polar(1.0, -PI * kx * (c as f64 - half));
            }
            for r in 0..n {
                row_phase[r] = Complex64::from_polar(1.0, -PI * ky * (r as f64 - half));
            }
            let mut acc = Complex64::default();
            for r in 0..n {
                let mut row_acc = Complex64::default();
                for c in 0..n {
                    row_acc += x[[r, c]] * col_phase[c];
                }
                acc += row_acc * row_phase[r];
            }
            out.push(acc);
        }
        out
    }

    fn adjoint_direct(&self, z: &[Complex64]) -> Array2<Complex64> {
        let n = self.n;
        let half = n as f64 / 2.0;
        let mut out: Array2<Complex64> = Array2::zeros((n, n));
        let mut col_phase = vec![Complex64::default(); n];
        let mut row_phase = vec![Complex64::default(); n];
        for (i, &zi) in z.iter().enumerate() {
            let kx = self.points[[i, 0]];
            let ky = self.points[[i, 1]];
            for c in 0..n {
                col_phase[c] = Complex64::from_polar(1.0, PI * kx * (c as f64 - half));
            }
            for r in 0..n {
                row_phase[r] = Complex64::from_polar(1.0, PI * ky * (r as f64 - half));
            }
            for r in 0..n {
                let zr = zi * row_phase[r];
                for c in 0..n {
                    out[[r, c]] += zr * col_phase[c];
                }
            }
        }
        out
    }

    fn forward_gridded(&self, x: &Array2<Complex64>) -> Vec<Complex64> {
        let PlanKind::Gridded {
            grid,
            taps,
            apod,
            fft_fwd,
            ..
        } = &self.kind
        else {
            unreachable!()
        };
        let n = self.n;
        let g = *grid;
        // deapodize and embed at wrapped indices (pixel n at index n mod grid)
        let mut buf: Vec<Complex64> = vec![Complex64::default(); g * g];
        for r in 0..n {
            let ar = wrap_index(r, n, g);
            for c in 0..n {
                let ac = wrap_index(c, n, g);
                buf[ar * g + ac] = x[[r, c]] * (apod[r] * apod[c]);
            }
        }
        fft2_inplace(&mut buf, g, fft_fwd);
        // interpolate at each sample
        let mut out = Vec::with_capacity(taps.len());
        for (tx, ty) in taps {
            let mut acc = Complex64::default();
            for (iy, wy) in ty.idx.iter().zip(ty.w.iter()) {
                let row = &buf[iy * g..(iy + 1) * g];
                let mut row_acc = Complex64::default();
                for (ix, wx) in tx.idx.iter().zip(tx.w.iter()) {
                    row_acc += row[*ix] * *wx;
                }
                acc += row_acc * *wy;
            }
            out.push(acc);
        }
        out
    }

    fn adjoint_gridded(&self, z: &[Complex64]) -> Array2<Complex64> {
        let PlanKind::Gridded {
            grid,
            taps,
            apod,
            fft_inv,
            ..
        } = &self.kind
        else {
            unreachable!()
        };
        let n = self.n;
        let g = *grid;
        let mut buf: Vec<Complex64> = vec![Complex64::default(); g * g];
        for ((tx, ty), &zi) in taps.iter().zip(z.iter()) {
            for (iy, wy) in ty.idx.iter().zip(ty.w.iter()) {
                let zy = zi * *wy;
                let row = &mut buf[iy * g..(iy + 1) * g];
                for (ix, wx) in tx.idx.iter().zip(tx.w.iter()) {
                    row[*ix] += zy * *wx;
                }
            }
        }
        fft2_inplace(&mut buf, g, fft_inv);
        let mut out: Array2<Complex64> = Array2::zeros((n, n));
        for r in 0..n {
            let ar = wrap_index(r, n, g);
            for c in 0..n {
                let ac = wrap_index(c, n, g);
                out[[r, c]] = buf[ar * g + ac] * (apod[r] * apod[c]);
            }
        }
        out
    }
}

/// Index of pixel `p` (of an image with side `n`, centered coordinates
/// `p - n/2`) on the length-`g` periodic grid.
fn wrap_index(p: usize, n: usize, g: usize) -> usize {
    let coord = p as i64 - n as i64 / 2;
    coord.rem_euclid(g as i64) as usize
}

/// Unnormalized 2D FFT over a row-major `g x g` buffer.
fn fft2_inplace(buf: &mut [Complex64], g: usize, fft: &Arc<dyn Fft<f64>>) {
    for row in buf.chunks_exact_mut(g) {
        fft.process(row);
    }
    let mut col = vec![Complex64::default(); g];
    for c in 0..g {
        for r in 0..g {
            col[r] = buf[r * g + c];
        }
        fft.process(&mut col);
        for r in 0..g {
            buf[r * g + c] = col[r];
        }
    }
}

/// One-shot forward transform (`Auto` plan).
pub fn nufft_forward(image: &ComplexImage, points: &SamplePointSet) -> Result<Vec<Complex64>> {
    NufftPlan::new(points, image.side(), NufftMethod::Auto)?.forward(image)
}

/// One-shot adjoint transform (`Auto` plan).
pub fn nufft_adjoint(
    samples: &[Complex64],
    points: &SamplePointSet,
    n: usize,
) -> Result<ComplexImage> {
    NufftPlan::new(points, n, NufftMethod::Auto)?.adjoint(samples)
}

/// One-shot positional VJP of the forward transform.
pub fn nufft_position_vjp_forward(
    image: &ComplexImage,
    points: &SamplePointSet,
    cotangent: &[Complex64],
) -> Result<Array2<f64>> {
    NufftPlan::new(points, image.side(), NufftMethod::Auto)?.forward_position_vjp(image, cotangent)
}

/// One-shot positional VJP of the adjoint transform.
pub fn nufft_position_vjp_adjoint(
    samples: &[Complex64],
    points: &SamplePointSet,
    cotangent: &ComplexImage,
) -> Result<Array2<f64>> {
    NufftPlan::new(points, cotangent.side(), NufftMethod::Auto)?
        .adjoint_position_vjp(samples, cotangent)
}
