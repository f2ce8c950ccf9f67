//! Reconstruction operators: the parameter-free density-compensated
//! adjoint, and a small trainable residual denoiser stacked on top of it.
//!
//! The adjoint reconstruction is `xdc = F^H (w . y)`. The denoiser treats
//! the complex image as two real channels and applies
//! `conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv3x3` with a residual skip,
//! channel widths 2 -> 16 -> 16 -> 2. The final layer starts at zero, so
//! the denoiser is exactly the identity at initialization and training
//! begins from the plain adjoint reconstruction.
//!
//! Both operators expose exact cotangents: through the adjoint
//! reconstruction, `g_y = w . (F g_x)`; through the denoiser, hand-derived
//! reverse passes for convolution, ReLU, and the skip connection.

use ndarray::{Array1, Array3, Array4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::DensityWeights;
use crate::error::{Error, Result};
use crate::geometry::ComplexImage;
use crate::nufft::{NufftMethod, NufftPlan, SamplePointSet};

const KSIZE: usize = 3;
pub const HIDDEN_CHANNELS: usize = 16;

/// One same-padded 3x3 convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels, 3, 3)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    fn zeros(out_ch: usize, in_ch: usize) -> Self {
        Self {
            weight: Array4::zeros((out_ch, in_ch, KSIZE, KSIZE)),
            bias: Array1::zeros(out_ch),
        }
    }

    /// Kaiming-uniform weights for a ReLU layer, zero biases.
    fn kaiming(out_ch: usize, in_ch: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_ch * KSIZE * KSIZE) as f64).sqrt();
        let weight =
            Array4::from_shape_fn((out_ch, in_ch, KSIZE, KSIZE), |_| {
                rng.gen_range(-bound..bound)
            });
        Self {
            weight,
            bias: Array1::zeros(out_ch),
        }
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `out[o, r, c] = b[o] + sum_{i, dy, dx} w[o, i, dy, dx] in[i, r+dy-1, c+dx-1]`
    /// with zeros outside the image.
    fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (in_ch, h, w) = input.dim();
        let out_ch = self.weight.dim().0;
        debug_assert_eq!(in_ch, self.weight.dim().1);
        let mut out = Array3::zeros((out_ch, h, w));
        for o in 0..out_ch {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = self.bias[o];
                    for i in 0..in_ch {
                        for dy in 0..KSIZE {
                            let rr = r as isize + dy as isize - 1;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            for dx in 0..KSIZE {
                                let cc = c as isize + dx as isize - 1;
                                if cc < 0 || cc >= w as isize {
                                    continue;
                                }
                                acc += self.weight[[o, i, dy, dx]]
                                    * input[[i, rr as usize, cc as usize]];
                            }
                        }
                    }
                    out[[o, r, c]] = acc;
                }
            }
        }
        out
    }

    /// Reverse pass: gradients for weights, biases, and the layer input.
    fn backward(
        &self,
        input: &Array3<f64>,
        grad_out: &Array3<f64>,
    ) -> (Conv2d, Array3<f64>) {
        let (in_ch, h, w) = input.dim();
        let out_ch = self.weight.dim().0;
        let mut gw = Conv2d::zeros(out_ch, in_ch);
        let mut gin = Array3::zeros((in_ch, h, w));
        for o in 0..out_ch {
            for r in 0..h {
                for c in 0..w {
                    let g = grad_out[[o, r, c]];
                    if g == 0.0 {
                        continue;
                    }
                    gw.bias[o] += g;
                    for i in 0..in_ch {
                        for dy in 0..KSIZE {
                            let rr = r as isize + dy as isize - 1;
                            if rr < 0 || rr >= h as isize {
                                continue;
                            }
                            for dx in 0..KSIZE {
                                let cc = c as isize + dx as isize - 1;
                                if cc < 0 || cc >= w as isize {
                                    continue;
                                }
                                gw.weight[[o, i, dy, dx]]
                                    += g * input[[i, rr as usize, cc as usize]];
                                gin[[i, rr as usize, cc as usize]]
                                    += g * self.weight[[o, i, dy, dx]];
                            }
                        }
                    }
                }
            }
        }
        (gw, gin)
    }
}

/// Full parameter block of the residual denoiser. The same struct carries
/// gradients, which share its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
}

impl DenoiserParams {
    /// Hidden layers Kaiming-initialized, final layer zero: the map starts
    /// as the identity.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            conv1: Conv2d::kaiming(HIDDEN_CHANNELS, 2, &mut rng),
            conv2: Conv2d::kaiming(HIDDEN_CHANNELS, HIDDEN_CHANNELS, &mut rng),
            conv3: Conv2d::zeros(2, HIDDEN_CHANNELS),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: Conv2d::zeros(self.conv1.weight.dim().0, self.conv1.weight.dim().1),
            conv2: Conv2d::zeros(self.conv2.weight.dim().0, self.conv2.weight.dim().1),
            conv3: Conv2d::zeros(self.conv3.weight.dim().0, self.conv3.weight.dim().1),
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params() + self.conv2.num_params() + self.conv3.num_params()
    }

    /// Canonical flat layout: conv1 weights, conv1 biases, conv2 weights,
    /// conv2 biases, conv3 weights, conv3 biases (row-major each).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for layer in [&self.conv1, &self.conv2, &self.conv3] {
            v.extend(layer.weight.iter());
            v.extend(layer.bias.iter());
        }
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let mut out = DenoiserParams::init(0).zeros_like();
        if flat.len() != out.num_params() {
            return Err(Error::Shape(format!(
                "expected {} denoiser parameters, got {}",
                out.num_params(),
                flat.len()
            )));
        }
        if !flat.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("denoiser parameters".into()));
        }
        let mut pos = 0;
        for layer in [&mut out.conv1, &mut out.conv2, &mut out.conv3] {
            for wv in layer.weight.iter_mut() {
                *wv = flat[pos];
                pos += 1;
            }
            for bv in layer.bias.iter_mut() {
                *bv = flat[pos];
                pos += 1;
            }
        }
        Ok(out)
    }

    /// Layer shapes, for the checkpoint sidecar.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize, usize)> {
        [&self.conv1, &self.conv2, &self.conv3]
            .iter()
            .map(|l| l.weight.dim())
            .collect()
    }
}

fn split_channels(image: &ComplexImage) -> Array3<f64> {
    let n = image.side();
    let mut out = Array3::zeros((2, n, n));
    for r in 0..n {
        for c in 0..n {
            out[[0, r, c]] = image.data()[[r, c]].re;
            out[[1, r, c]] = image.data()[[r, c]].im;
        }
    }
    out
}

fn merge_channels(chans: &Array3<f64>) -> ComplexImage {
    let n = chans.dim().1;
    let mut data = ndarray::Array2::zeros((n, n));
    for r in 0..n {
        for c in 0..n {
            data[[r, c]] = Complex64::new(chans[[0, r, c]], chans[[1, r, c]]);
        }
    }
    ComplexImage::new(data).expect("square by construction")
}

fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// `output = input + conv3(relu(conv2(relu(conv1(input)))))` over the two
/// real channels.
pub fn denoiser_forward(params: &DenoiserParams, image: &ComplexImage) -> ComplexImage {
    let input = split_channels(image);
    let h1 = relu(&params.conv1.forward(&input));
    let h2 = relu(&params.conv2.forward(&h1));
    let h3 = params.conv3.forward(&h2);
    merge_channels(&(&input + &h3))
}

/// Exact reverse-mode pass. Returns the parameter gradients and the
/// cotangent with respect to the input image (conventions as elsewhere:
/// `dL = sum Re(conj(g) dz)`).
pub fn denoiser_backward(
    params: &DenoiserParams,
    image: &ComplexImage,
    cotangent: &ComplexImage,
) -> (DenoiserParams, ComplexImage) {
    let input = split_channels(image);
    let pre1 = params.conv1.forward(&input);
    let h1 = relu(&pre1);
    let pre2 = params.conv2.forward(&h1);
    let h2 = relu(&pre2);

    let g_out = split_channels(cotangent);
    // residual skip: input gradient starts as the output cotangent
    let (gw3, g_h2) = params.conv3.backward(&h2, &g_out);
    let g_pre2 = ndarray::Zip::from(&g_h2)
        .and(&pre2)
        .map_collect(|&g, &p| if p > 0.0 { g } else { 0.0 });
    let (gw2, g_h1) = params.conv2.backward(&h1, &g_pre2);
    let g_pre1 = ndarray::Zip::from(&g_h1)
        .and(&pre1)
        .map_collect(|&g, &p| if p > 0.0 { g } else { 0.0 });
    let (gw1, g_stack_in) = params.conv1.backward(&input, &g_pre1);
    let g_input = &g_stack_in + &g_out;
    (
        DenoiserParams {
            conv1: gw1,
            conv2: gw2,
            conv3: gw3,
        },
        merge_channels(&g_input),
    )
}

/// Density-compensated adjoint reconstruction `F^H (w . y)` reusing an
/// existing transform plan.
pub fn dcp_adjoint_recon_with_plan(
    y: &[Complex64],
    plan: &NufftPlan,
    weights: &DensityWeights,
) -> Result<ComplexImage> {
    plan.adjoint(&weights.apply(y)?)
}

/// One-shot variant building its own plan.
pub fn dcp_adjoint_recon(
    y: &[Complex64],
    points: &SamplePointSet,
    weights: &DensityWeights,
    n: usize,
) -> Result<ComplexImage> {
    let plan = NufftPlan::new(points, n, NufftMethod::Auto)?;
    dcp_adjoint_recon_with_plan(y, &plan, weights)
}

/// Cotangent of the adjoint reconstruction with respect to the
/// measurements: `g_y = w . (F g_x)`.
pub fn dcp_adjoint_y_cotangent(
    image_cotangent: &ComplexImage,
    plan: &NufftPlan,
    weights: &DensityWeights,
) -> Result<Vec<Complex64>> {
    weights.apply(&plan.forward(image_cotangent)?)
}

/// The reconstructor family: all variants map a density-compensated
/// adjoint image to the final image and expose exact cotangents with
/// respect to that image and (when present) their parameters.
#[derive(Debug, Clone)]
pub enum Reconstructor {
    /// `xhat = xdc` (empty parameter block).
    DcpAdjoint,
    /// `xhat = denoise(xdc)`.
    Denoiser(DenoiserParams),
}

impl Reconstructor {
    pub fn apply(&self, xdc: &ComplexImage) -> ComplexImage {
        match self {
            Reconstructor::DcpAdjoint => xdc.clone(),
            Reconstructor::Denoiser(p) => denoiser_forward(p, xdc),
        }
    }

    /// Cotangent w.r.t. the adjoint image, plus parameter gradients when
    /// the variant has parameters.
    pub fn apply_backward(
        &self,
        xdc: &ComplexImage,
        cotangent: &ComplexImage,
    ) -> (ComplexImage, Option<DenoiserParams>) {
        match self {
            Reconstructor::DcpAdjoint => (cotangent.clone(), None),
            Reconstructor::Denoiser(p) => {
                let (gp, gx) = denoiser_backward(p, xdc, cotangent);
                (gx, Some(gp))
            }
        }
    }

    pub fn params(&self) -> Option<&DenoiserParams> {
        match self {
            Reconstructor::DcpAdjoint => None,
            Reconstructor::Denoiser(p) => Some(p),
        }
    }

    pub fn set_params(&mut self, params: DenoiserParams) {
        *self = Reconstructor::Denoiser(params);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::pipe_weights;
    use ndarray::Array2;

    fn random_image(n: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexImage::new(Array2::from_shape_fn((n, n), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        }))
        .unwrap()
    }

    fn random_points(m: usize, seed: u64) -> SamplePointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SamplePointSet::new(Array2::from_shape_fn((m, 2), |_| rng.gen_range(-1.0..1.0)))
            .unwrap()
    }

    #[test]
    fn zero_measurements_give_zero_image() {
        let pts = random_points(10, 1);
        let w = pipe_weights(&pts, 8, 3).unwrap();
        let y = vec![Complex64::default(); 10];
        let img = dcp_adjoint_recon(&y, &pts, &w, 8).unwrap();
        assert!(img.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn dcp_equals_weighted_adjoint() {
        let pts = random_points(12, 2);
        let w = pipe_weights(&pts, 8, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<Complex64> = (0..12)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let img = dcp_adjoint_recon(&y, &pts, &w, 8).unwrap();
        let direct = crate::nufft::nufft_adjoint(&w.apply(&y).unwrap(), &pts, 8).unwrap();
        for (a, b) in img.data().iter().zip(direct.data().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn y_cotangent_matches_finite_differences() {
        let n = 8;
        let m = 6;
        let pts = random_points(m, 4);
        let w = pipe_weights(&pts, n, 3).unwrap();
        let plan = NufftPlan::new(&pts, n, NufftMethod::Auto).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<Complex64> = (0..m)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let cot = random_image(n, 6);
        let g = dcp_adjoint_y_cotangent(&cot, &plan, &w).unwrap();
        let loss = |y: &[Complex64]| -> f64 {
            let img = dcp_adjoint_recon_with_plan(y, &plan, &w).unwrap();
            img.data()
                .iter()
                .zip(cot.data().iter())
                .map(|(a, c)| (c.conj() * a).re)
                .sum()
        };
        let h = 1e-6;
        for i in 0..m {
            for part in 0..2 {
                let delta = if part == 0 {
                    Complex64::new(h, 0.0)
                } else {
                    Complex64::new(0.0, h)
                };
                let mut plus = y.clone();
                plus[i] += delta;
                let mut minus = y.clone();
                minus[i] -= delta;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = if part == 0 { g[i].re } else { g[i].im };
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                    "sample {i} part {part}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn parameter_count_and_flat_roundtrip() {
        let p = DenoiserParams::init(7);
        assert_eq!(p.num_params(), 2914);
        let flat = p.to_flat();
        let q = DenoiserParams::from_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(DenoiserParams::from_flat(&flat[1..]).is_err());
    }

    #[test]
    fn identity_at_initialization() {
        let p = DenoiserParams::init(11);
        let img = random_image(10, 8);
        let out = denoiser_forward(&p, &img);
        for (a, b) in out.data().iter().zip(img.data().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_input_zero_biases_gives_zero() {
        let p = DenoiserParams::init(13); // biases start at zero
        let img = ComplexImage::zeros(9);
        let out = denoiser_forward(&p, &img);
        assert!(out.data().iter().all(|v| v.norm() == 0.0));
    }

    /// Independent convolution oracle: iterates input positions and
    /// scatters, the opposite loop order of the implementation.
    fn conv_oracle(layer: &Conv2d, input: &Array3<f64>) -> Array3<f64> {
        let (in_ch, h, w) = input.dim();
        let out_ch = layer.weight.dim().0;
        let mut out = Array3::zeros((out_ch, h, w));
        for o in 0..out_ch {
            for r in 0..h {
                for c in 0..w {
                    out[[o, r, c]] = layer.bias[o];
                }
            }
        }
        for i in 0..in_ch {
            for r in 0..h {
                for c in 0..w {
                    let v = input[[i, r, c]];
                    for o in 0..out_ch {
                        for dy in 0..KSIZE {
                            for dx in 0..KSIZE {
                                let tr = r as isize - (dy as isize - 1);
                                let tc = c as isize - (dx as isize - 1);
                                if tr >= 0 && tr < h as isize && tc >= 0 && tc < w as isize {
                                    out[[o, tr as usize, tc as usize]] +=
                                        layer.weight[[o, i, dy, dx]] * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_convolution_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = DenoiserParams::init(17);
        // give the final layer real content so the whole stack is exercised
        p.conv3 = Conv2d::kaiming(2, HIDDEN_CHANNELS, &mut rng);
        for b in p.conv1.bias.iter_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
        let img = random_image(7, 18);
        let input = split_channels(&img);
        let h1 = relu(&conv_oracle(&p.conv1, &input));
        let h2 = relu(&conv_oracle(&p.conv2, &h1));
        let h3 = conv_oracle(&p.conv3, &h2);
        let expected = merge_channels(&(&input + &h3));
        let got = denoiser_forward(&p, &img);
        for (a, b) in got.data().iter().zip(expected.data().iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn backward_zero_cotangent_gives_zero() {
        let p = DenoiserParams::init(19);
        let img = random_image(8, 20);
        let (gp, gx) = denoiser_backward(&p, &img, &ComplexImage::zeros(8));
        assert!(gp.to_flat().iter().all(|v| *v == 0.0));
        assert!(gx.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = DenoiserParams::init(23);
        p.conv3 = Conv2d::kaiming(2, HIDDEN_CHANNELS, &mut rng);
        let img = random_image(6, 24);
        let cot = random_image(6, 25);
        let loss = |params: &DenoiserParams, image: &ComplexImage| -> f64 {
            let out = denoiser_forward(params, image);
            out.data()
                .iter()
                .zip(cot.data().iter())
                .map(|(a, c)| (c.conj() * a).re)
                .sum()
        };
        let (gp, gx) = denoiser_backward(&p, &img, &cot);
        let h = 1e-6;

        // parameter gradients on a random subset
        let flat = p.to_flat();
        let gflat = gp.to_flat();
        let mut num = 0.0;
        let mut den = 0.0;
        for _ in 0..80 {
            let idx = rng.gen_range(0..flat.len());
            let mut plus = flat.clone();
            plus[idx] += h;
            let mut minus = flat.clone();
            minus[idx] -= h;
            let fd = (loss(&DenoiserParams::from_flat(&plus).unwrap(), &img)
                - loss(&DenoiserParams::from_flat(&minus).unwrap(), &img))
                / (2.0 * h);
            num += (fd - gflat[idx]).abs();
            den += fd.abs();
        }
        assert!(num / den.max(1e-12) < 1e-3, "param fd mismatch {}", num / den);

        // input gradients across all pixels
        num = 0.0;
        den = 0.0;
        for r in 0..6 {
            for c in 0..6 {
                for part in 0..2 {
                    let delta = if part == 0 {
                        Complex64::new(h, 0.0)
                    } else {
                        Complex64::new(0.0, h)
                    };
                    let mut plus = img.data().clone();
                    plus[[r, c]] += delta;
                    let mut minus = img.data().clone();
                    minus[[r, c]] -= delta;
                    let fd = (loss(&p, &ComplexImage::new(plus).unwrap())
                        - loss(&p, &ComplexImage::new(minus).unwrap()))
                        / (2.0 * h);
                    let an = if part == 0 {
                        gx.data()[[r, c]].re
                    } else {
                        gx.data()[[r, c]].im
                    };
                    num += (fd - an).abs();
                    den += fd.abs();
                }
            }
        }
        assert!(num / den.max(1e-12) < 1e-3, "input fd mismatch {}", num / den);
    }

    #[test]
    fn reconstructor_interface_contract() {
        let xdc = random_image(8, 31);
        let cot = random_image(8, 32);
        let plain = Reconstructor::DcpAdjoint;
        assert!(plain.params().is_none());
        let out = plain.apply(&xdc);
        for (a, b) in out.data().iter().zip(xdc.data().iter()) {
            assert_eq!(a, b);
        }
        let (gx, gp) = plain.apply_backward(&xdc, &cot);
        assert!(gp.is_none());
        for (a, b) in gx.data().iter().zip(cot.data().iter()) {
            assert_eq!(a, b);
        }
        let den = Reconstructor::Denoiser(DenoiserParams::init(33));
        assert!(den.params().is_some());
        let (_, gp) = den.apply_backward(&xdc, &cot);
        assert_eq!(gp.unwrap().num_params(), 2914);
    }
}
