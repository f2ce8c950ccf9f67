//! Synthetic complex-valued test images: Shepp-Logan-style ellipse
//! phantoms with randomized geometry and a smooth random phase map.
//!
//! Each phantom perturbs the classic ellipse table (centers, axes, angles,
//! intensities) so a dataset has anatomical variety, normalizes magnitudes
//! to `[0, 1]`, and optionally multiplies in a low-frequency phase so the
//! images are genuinely complex the way scanner data is. Generation is
//! bitwise deterministic for a given seed.

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::ComplexImage;

/// (cx, cy, half axis a, half axis b, angle degrees, additive intensity)
const BASE_ELLIPSES: [(f64, f64, f64, f64, f64, f64); 10] = [
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
];

struct Ellipse {
    cx: f64,
    cy: f64,
    inv_a2: f64,
    inv_b2: f64,
    cos_t: f64,
    sin_t: f64,
    value: f64,
}

fn randomized_ellipses(rng: &mut impl Rng) -> Vec<Ellipse> {
    BASE_ELLIPSES
        .iter()
        .map(|&(cx, cy, a, b, angle, value)| {
            let cx = cx + rng.gen_range(-0.05..0.05);
            let cy = cy + rng.gen_range(-0.05..0.05);
            let a = a * rng.gen_range(0.9..1.1);
            let b = b * rng.gen_range(0.9..1.1);
            let theta = (angle + rng.gen_range(-5.0..5.0)).to_radians();
            let value = value * rng.gen_range(0.9..1.1);
            Ellipse {
                cx,
                cy,
                inv_a2: 1.0 / (a * a),
                inv_b2: 1.0 / (b * b),
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                value,
            }
        })
        .collect()
}

/// Smooth phase: a handful of low-frequency plane waves.
struct PhaseMap {
    terms: Vec<(f64, f64, f64, f64)>, // (amplitude, ux, uy, offset)
}

impl PhaseMap {
    fn random(rng: &mut impl Rng) -> Self {
        let terms = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.0..0.5),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        Self { terms }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(a, ux, uy, off)| a * (PI * (ux * x + uy * y) + off).sin())
            .sum()
    }
}

/// Generates `count` randomized phantoms of side `n`. With
/// `with_phase = false` the images are purely real (zero imaginary part).
pub fn phantom_generate(
    n: usize,
    count: usize,
    seed: u64,
    with_phase: bool,
) -> Result<Vec<ComplexImage>> {
    if n < 32 {
        return Err(Error::Config(format!(
            "phantom side must be >= 32, got {n}"
        )));
    }
    if n % 2 != 0 {
        return Err(Error::Config(format!("phantom side must be even, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let ellipses = randomized_ellipses(&mut rng);
        let phase = PhaseMap::random(&mut rng);
        let half = n as f64 / 2.0;
        let mut mag = Array2::zeros((n, n));
        let mut max_val: f64 = 0.0;
        for r in 0..n {
            for c in 0..n {
                let x = (c as f64 - half) / half;
                let y = (r as f64 - half) / half;
                let mut v: f64 = 0.0;
                for e in &ellipses {
                    let dx = x - e.cx;
                    let dy = y - e.cy;
                    let xr = dx * e.cos_t + dy * e.sin_t;
                    let yr = -dx * e.sin_t + dy * e.cos_t;
                    if xr * xr * e.inv_a2 + yr * yr * e.inv_b2 <= 1.0 {
                        v += e.value;
                    }
                }
                let v = v.max(0.0);
                max_val = max_val.max(v);
                mag[[r, c]] = v;
            }
        }
        let scale = if max_val > 0.0 { 1.0 / max_val } else { 1.0 };
        let data = Array2::from_shape_fn((n, n), |(r, c)| {
            let m = mag[[r, c]] * scale;
            if with_phase {
                let x = (c as f64 - half) / half;
                let y = (r as f64 - half) / half;
                Complex64::from_polar(m, phase.at(x, y))
            } else {
                Complex64::new(m, 0.0)
            }
        });
        out.push(ComplexImage::new(data)?);
    }
    Ok(out)
}
