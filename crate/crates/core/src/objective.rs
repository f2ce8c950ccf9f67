//! Training loss and evaluation metrics.
//!
//! The loss blends three terms on the reconstruction error,
//!
//! ```text
//!     L = alpha * (1 - MS-SSIM(|x|, |xhat|))
//!       + (1 - alpha) * ||x - xhat||_1 / N^2
//!       + ((1 - alpha)^2 / 2) * ||x - xhat||_2 / N^2
//! ```
//!
//! with `alpha = 0.998` by default. The norms run over the complex
//! difference; MS-SSIM compares magnitude images. Both norms are divided by
//! the pixel count so the blend stays balanced across image sizes. The
//! Euclidean term is deliberately not squared.
//!
//! Gradients with respect to the complex reconstruction are analytic. The
//! complex cotangent `g` follows the convention `dL = sum Re(conj(g) dz)`,
//! matching the Fourier-operator cotangents, and the MS-SSIM part is
//! backpropagated by hand through windows, variance maps, and the dyadic
//! pooling pyramid.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::ComplexImage;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
/// Standard five-scale exponents; truncated prefixes are renormalized.
const SCALE_EXPONENTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const TERM_FLOOR: f64 = 1e-12;
const MAG_GUARD: f64 = 1e-12;
/// Sentinel for infinite peak signal-to-noise ratio.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Blend weight of the structural term.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "loss weight alpha must be in [0, 1], got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    /// Re-checks the constructor invariant on a deserialized value.
    pub fn validate(&self) -> Result<()> {
        Self::new(self.alpha).map(|_| ())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.998 }
    }
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (t, v) in g.iter_mut().enumerate() {
        let d = t as f64 - mid;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
        sum += *v;
    }
    for v in g.iter_mut() {
        *v /= sum;
    }
    g
}

/// Valid-mode separable window correlation: `(h - 10) x (w - 10)` output.
fn conv_valid(img: &Array2<f64>, g: &[f64; WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut rows = Array2::zeros((h, w - WINDOW + 1));
    for r in 0..h {
        for c in 0..w - WINDOW + 1 {
            let mut acc = 0.0;
            for t in 0..WINDOW {
                acc += g[t] * img[[r, c + t]];
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((h - WINDOW + 1, w - WINDOW + 1));
    for r in 0..h - WINDOW + 1 {
        for c in 0..w - WINDOW + 1 {
            let mut acc = 0.0;
            for t in 0..WINDOW {
                acc += g[t] * rows[[r + t, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Exact adjoint of [`conv_valid`]: scatters window-position gradients back
/// onto the `(h, w)` input grid.
fn conv_valid_adjoint(grad: &Array2<f64>, g: &[f64; WINDOW], dims: (usize, usize)) -> Array2<f64> {
    let (h, w) = dims;
    let (gh, gw) = grad.dim();
    let mut cols: Array2<f64> = Array2::zeros((h, gw));
    for r in 0..gh {
        for c in 0..gw {
            let v = grad[[r, c]];
            for t in 0..WINDOW {
                cols[[r + t, c]] += g[t] * v;
            }
        }
    }
    let mut out: Array2<f64> = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..gw {
            let v = cols[[r, c]];
            for t in 0..WINDOW {
                out[[r, c + t]] += g[t] * v;
            }
        }
    }
    out
}

/// 2x2 mean pooling with floor dimensions (odd trailing row/column drops).
fn pool2(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = 0.25
                * (img[[2 * r, 2 * c]]
                    + img[[2 * r + 1, 2 * c]]
                    + img[[2 * r, 2 * c + 1]]
                    + img[[2 * r + 1, 2 * c + 1]]);
        }
    }
    out
}

fn pool2_adjoint(grad: &Array2<f64>, dims: (usize, usize)) -> Array2<f64> {
    let (oh, ow) = grad.dim();
    let mut out = Array2::zeros(dims);
    for r in 0..oh {
        for c in 0..ow {
            let v = 0.25 * grad[[r, c]];
            out[[2 * r, 2 * c]] += v;
            out[[2 * r + 1, 2 * c]] += v;
            out[[2 * r, 2 * c + 1]] += v;
            out[[2 * r + 1, 2 * c + 1]] += v;
        }
    }
    out
}

/// Number of dyadic scales for an `N x N` image.
fn num_scales(n: usize) -> Result<usize> {
    let s = ((n as f64 / 8.0).log2().floor() as i64).min(5);
    if s < 1 {
        return Err(Error::Shape(format!(
            "image side {n} too small for the multi-scale window pyramid (need >= 16)"
        )));
    }
    Ok(s as usize)
}

/// Everything the backward pass needs from one scale.
struct ScaleTrace {
    a: Array2<f64>,
    b: Array2<f64>,
    mu_a: Array2<f64>,
    mu_b: Array2<f64>,
    sa2: Array2<f64>,
    sb2: Array2<f64>,
    sab: Array2<f64>,
    cs_mean: f64,
    /// luminance mean, on the coarsest scale only
    lum_mean: Option<f64>,
}

struct MsSsimTrace {
    scales: Vec<ScaleTrace>,
    weights: Vec<f64>,
    c1: f64,
    c2: f64,
    value: f64,
}

/// Forward multi-scale pass over magnitude images; keeps per-scale maps.
fn ms_ssim_forward(a0: &Array2<f64>, b0: &Array2<f64>, data_range: f64) -> Result<MsSsimTrace> {
    let n = a0.dim().0;
    let ns = num_scales(n)?;
    let wsum: f64 = SCALE_EXPONENTS[..ns].iter().sum();
    let weights: Vec<f64> = SCALE_EXPONENTS[..ns].iter().map(|w| w / wsum).collect();
    let l = data_range.max(MAG_GUARD);
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let g = gaussian_window();
    let mut a = a0.clone();
    let mut b = b0.clone();
    let mut scales = Vec::with_capacity(ns);
    let mut value = 1.0;
    for s in 0..ns {
        if a.dim().0 < WINDOW || a.dim().1 < WINDOW {
            return Err(Error::Shape(format!(
                "scale {s} image {:?} smaller than the {WINDOW}x{WINDOW} window",
                a.dim()
            )));
        }
        let mu_a = conv_valid(&a, &g);
        let mu_b = conv_valid(&b, &g);
        let mu_aa = conv_valid(&(&a * &a), &g);
        let mu_bb = conv_valid(&(&b * &b), &g);
        let mu_ab = conv_valid(&(&a * &b), &g);
        let sa2 = &mu_aa - &(&mu_a * &mu_a);
        let sb2 = &mu_bb - &(&mu_b * &mu_b);
        let sab = &mu_ab - &(&mu_a * &mu_b);
        let count = (sa2.dim().0 * sa2.dim().1) as f64;
        let mut cs_sum = 0.0;
        for (i, sab_v) in sab.iter().enumerate() {
            let sa2_v = sa2.as_slice().unwrap()[i];
            let sb2_v = sb2.as_slice().unwrap()[i];
            cs_sum += (2.0 * sab_v + c2) / (sa2_v + sb2_v + c2);
        }
        let cs_mean = (cs_sum / count).max(TERM_FLOOR);
        value *= cs_mean.powf(weights[s]);
        let lum_mean = if s == ns - 1 {
            let mut lum_sum = 0.0;
            for (ma, mb) in mu_a.iter().zip(mu_b.iter()) {
                lum_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            }
            let lm = (lum_sum / count).max(TERM_FLOOR);
            value *= lm.powf(weights[s]);
            Some(lm)
        } else {
            None
        };
        scales.push(ScaleTrace {
            a: a.clone(),
            b: b.clone(),
            mu_a,
            mu_b,
            sa2,
            sb2,
            sab,
            cs_mean,
            lum_mean,
        });
        if s + 1 < ns {
            a = pool2(&a);
            b = pool2(&b);
        }
    }
    Ok(MsSsimTrace {
        scales,
        weights,
        c1,
        c2,
        value,
    })
}

/// Reverse pass: gradient of the multi-scale value with respect to the
/// finest-scale second argument.
fn ms_ssim_backward(trace: &MsSsimTrace) -> Array2<f64> {
    let g = gaussian_window();
    let ns = trace.scales.len();
    // gradient flowing into b at the scale being processed
    let mut gb: Option<Array2<f64>> = None;
    for s in (0..ns).rev() {
        let sc = &trace.scales[s];
        let (gh, gw) = sc.mu_a.dim();
        let count = (gh * gw) as f64;
        // chain through value = prod term^w: d value / d term = value * w / term
        let d_cs = if sc.cs_mean > TERM_FLOOR {
            trace.value * trace.weights[s] / sc.cs_mean / count
        } else {
            0.0
        };
        let mut g_mu_b = Array2::zeros((gh, gw));
        let mut g_mu_bb = Array2::zeros((gh, gw));
        let mut g_mu_ab = Array2::zeros((gh, gw));
        for r in 0..gh {
            for c in 0..gw {
                let a_num = 2.0 * sc.sab[[r, c]] + trace.c2;
                let b_den = sc.sa2[[r, c]] + sc.sb2[[r, c]] + trace.c2;
                let d_sab = d_cs * 2.0 / b_den;
                let d_sb2 = d_cs * (-a_num / (b_den * b_den));
                // sab = mu_ab - mu_a mu_b; sb2 = mu_bb - mu_b^2
                g_mu_ab[[r, c]] += d_sab;
                g_mu_bb[[r, c]] += d_sb2;
                g_mu_b[[r, c]] +=
                    d_sab * (-sc.mu_a[[r, c]]) + d_sb2 * (-2.0 * sc.mu_b[[r, c]]);
            }
        }
        if let Some(lm) = sc.lum_mean {
            let d_l = if lm > TERM_FLOOR {
                trace.value * trace.weights[s] / lm / count
            } else {
                0.0
            };
            for r in 0..gh {
                for c in 0..gw {
                    let (ma, mb) = (sc.mu_a[[r, c]], sc.mu_b[[r, c]]);
                    let p = 2.0 * ma * mb + trace.c1;
                    let q = ma * ma + mb * mb + trace.c1;
                    g_mu_b[[r, c]] += d_l * (2.0 * ma * q - 2.0 * mb * p) / (q * q);
                }
            }
        }
        // pull window means back to the pixel grid of this scale
        let dims = sc.b.dim();
        let mut g_b = conv_valid_adjoint(&g_mu_b, &g, dims);
        let back_bb = conv_valid_adjoint(&g_mu_bb, &g, dims);
        let back_ab = conv_valid_adjoint(&g_mu_ab, &g, dims);
        for r in 0..dims.0 {
            for c in 0..dims.1 {
                g_b[[r, c]] +=
                    back_bb[[r, c]] * 2.0 * sc.b[[r, c]] + back_ab[[r, c]] * sc.a[[r, c]];
            }
        }
        // plus whatever the coarser scale sent down through the pooling
        if let Some(coarser) = gb {
            g_b = &g_b + &pool2_adjoint(&coarser, dims);
        }
        gb = Some(g_b);
    }
    gb.expect("at least one scale")
}

fn check_same_shape(x: &ComplexImage, xhat: &ComplexImage) -> Result<()> {
    if x.side() != xhat.side() {
        return Err(Error::Shape(format!(
            "image sizes differ: {} vs {}",
            x.side(),
            xhat.side()
        )));
    }
    Ok(())
}

/// Multi-scale structural similarity of the magnitude images, in `[0, 1]`.
/// The data range is taken from the reference `x`.
pub fn ms_ssim(x: &ComplexImage, xhat: &ComplexImage) -> Result<f64> {
    check_same_shape(x, xhat)?;
    let a = x.magnitude();
    let b = xhat.magnitude();
    let range = x.max_magnitude();
    Ok(ms_ssim_forward(&a, &b, range)?.value.clamp(0.0, 1.0))
}

/// `L = alpha (1 - S) + (1-alpha) l1/N^2 + ((1-alpha)^2/2) l2/N^2`.
pub fn combined_loss(x: &ComplexImage, xhat: &ComplexImage, w: &LossWeights) -> Result<f64> {
    let (loss, _) = loss_terms(x, xhat, w, false)?;
    Ok(loss)
}

/// Cotangent of [`combined_loss`] with respect to the complex
/// reconstruction `xhat` (`dL = sum Re(conj(g) dxhat)`).
pub fn combined_loss_grad(
    x: &ComplexImage,
    xhat: &ComplexImage,
    w: &LossWeights,
) -> Result<ComplexImage> {
    let (_, grad) = loss_terms(x, xhat, w, true)?;
    Ok(grad.expect("gradient requested"))
}

/// Loss and cotangent in one evaluation; the training loop's entry point.
pub fn combined_loss_and_grad(
    x: &ComplexImage,
    xhat: &ComplexImage,
    w: &LossWeights,
) -> Result<(f64, ComplexImage)> {
    let (loss, grad) = loss_terms(x, xhat, w, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn loss_terms(
    x: &ComplexImage,
    xhat: &ComplexImage,
    w: &LossWeights,
    want_grad: bool,
) -> Result<(f64, Option<ComplexImage>)> {
    check_same_shape(x, xhat)?;
    let n = x.side();
    let pix = (n * n) as f64;
    let alpha = w.alpha();
    let abar = 1.0 - alpha;

    let mut l1 = 0.0;
    let mut l2_sq = 0.0;
    for (xv, xh) in x.data().iter().zip(xhat.data().iter()) {
        let d = xv - xh;
        l1 += d.norm();
        l2_sq += d.norm_sqr();
    }
    let l2 = l2_sq.sqrt();

    // the structural term only exists when weighted in
    let ms = if alpha > 0.0 {
        Some(ms_ssim_forward(
            &x.magnitude(),
            &xhat.magnitude(),
            x.max_magnitude(),
        )?)
    } else {
        None
    };
    let s_val = ms.as_ref().map(|t| t.value.clamp(0.0, 1.0)).unwrap_or(0.0);
    let loss = alpha * (1.0 - s_val) + abar * l1 / pix + 0.5 * abar * abar * l2 / pix;
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grad: Array2<Complex64> = Array2::zeros((n, n));
    let l1_coef = abar / pix;
    let l2_coef = 0.5 * abar * abar / (pix * l2.max(1e-12));
    for ((gv, xv), xh) in grad.iter_mut().zip(x.data().iter()).zip(xhat.data().iter()) {
        let d = xv - xh;
        let dn = d.norm();
        // d|d|/dxhat = -d/|d|; d||d||_2/dxhat = -d/||d||_2
        if dn > 1e-12 {
            *gv -= (l1_coef / dn) * d;
        }
        *gv -= l2_coef * d;
    }
    if let Some(trace) = &ms {
        let g_mag = ms_ssim_backward(trace);
        // L term is alpha (1 - S); chain |z| -> z
        for ((gv, gm), z) in grad.iter_mut().zip(g_mag.iter()).zip(xhat.data().iter()) {
            let zn = z.norm();
            if zn > MAG_GUARD {
                *gv += (-alpha * gm / zn) * z;
            }
        }
    }
    Ok((loss, Some(ComplexImage::new(grad)?)))
}

/// Single-scale structural similarity of the magnitudes (window means and
/// luminance combined at full resolution).
pub fn ssim_metric(x: &ComplexImage, xhat: &ComplexImage) -> Result<f64> {
    check_same_shape(x, xhat)?;
    let n = x.side();
    if n < WINDOW {
        return Err(Error::Shape(format!(
            "image side {n} smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    let a = x.magnitude();
    let b = xhat.magnitude();
    let l = x.max_magnitude().max(MAG_GUARD);
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let g = gaussian_window();
    let mu_a = conv_valid(&a, &g);
    let mu_b = conv_valid(&b, &g);
    let mu_aa = conv_valid(&(&a * &a), &g);
    let mu_bb = conv_valid(&(&b * &b), &g);
    let mu_ab = conv_valid(&(&a * &b), &g);
    let mut sum = 0.0;
    let count = (mu_a.dim().0 * mu_a.dim().1) as f64;
    for i in 0..mu_a.len() {
        let ma = mu_a.as_slice().unwrap()[i];
        let mb = mu_b.as_slice().unwrap()[i];
        let sa2 = mu_aa.as_slice().unwrap()[i] - ma * ma;
        let sb2 = mu_bb.as_slice().unwrap()[i] - mb * mb;
        let sab = mu_ab.as_slice().unwrap()[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * sab + c2))
            / ((ma * ma + mb * mb + c1) * (sa2 + sb2 + c2));
    }
    Ok(sum / count)
}

/// `20 log10(L / RMSE)` over magnitudes, capped at [`PSNR_CAP_DB`].
pub fn psnr_metric(x: &ComplexImage, xhat: &ComplexImage) -> Result<f64> {
    check_same_shape(x, xhat)?;
    let l = x.max_magnitude().max(MAG_GUARD);
    let mut mse = 0.0;
    for (xv, xh) in x.data().iter().zip(xhat.data().iter()) {
        let d = xv.norm() - xh.norm();
        mse += d * d;
    }
    mse /= (x.side() * x.side()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (l / mse.sqrt()).log10()).min(PSNR_CAP_DB))
}
