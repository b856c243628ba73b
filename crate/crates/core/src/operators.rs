//! Linear degradation operators `A`, their pseudo-inverses `A†`, and the
//! null-space fidelity update shared by every sampler.
//!
//! Images are `[C, H, W]` tensors. Operators never clamp: intermediate
//! states of a sampler are unbounded and clamping only happens at export.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{fft2, real_to_complex};
use crate::tensor::Tensor;

/// Normalized, truncated 2-D Gaussian of odd `size` and standard deviation
/// `sigma_b`, centred on the middle pixel.
pub fn make_gaussian_kernel(size: usize, sigma_b: f64) -> Result<Tensor> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::param(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma_b > 0.0) || !sigma_b.is_finite() {
        return Err(Error::param(format!("blur sigma must be positive, got {sigma_b}")));
    }
    let r = (size / 2) as f64;
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - r;
            let dx = j as f64 - r;
            data.push((-(dx * dx + dy * dy) / (2.0 * sigma_b * sigma_b)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Tensor::new(vec![size, size], data)
}

/// Kernel size used when none is given: `min(61, 2·ceil(3σ)+1)`, further
/// shrunk to the largest odd extent that fits an `h × w` image.
pub fn default_kernel_size(sigma_b: f64, h: usize, w: usize) -> usize {
    let wanted = (2.0 * (3.0 * sigma_b).ceil() + 1.0) as usize;
    let mut size = wanted.min(61);
    let fit = h.min(w);
    if size > fit {
        size = if fit % 2 == 1 { fit } else { fit - 1 };
    }
    size.max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    /// Per-pixel channel mean, repeated into every channel.
    Colorization,
    /// Circular convolution with `kernel`; Wiener pseudo-inverse.
    Blur { kernel: Tensor, wiener_lambda: f64 },
    /// 4×4 average pooling; nearest-neighbour pseudo-inverse.
    SuperRes4,
    /// Identity. `noise_sigma` is used only when synthesizing measurements.
    Denoise { noise_sigma: f64 },
    /// Keeps entries where `mask` is 1 and zeroes the rest. `A = A† = A²`.
    Mask { mask: Vec<bool> },
}

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::Colorization => "colorization",
            OperatorKind::Blur { .. } => "blur",
            OperatorKind::SuperRes4 => "superres4",
            OperatorKind::Denoise { .. } => "denoise",
            OperatorKind::Mask { .. } => "mask",
        }
    }
}

/// A linear map `A` with its pseudo-inverse, fixed to concrete tensor shapes.
#[derive(Clone)]
pub struct DegradationOperator {
    kind: OperatorKind,
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    /// Kernel spectrum for `Blur`, one `h × w` plane shared by all channels.
    spectrum: Option<Vec<Complex64>>,
}

impl fmt::Debug for DegradationOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DegradationOperator")
            .field("kind", &self.kind.name())
            .field("input_dims", &self.input_dims)
            .field("output_dims", &self.output_dims)
            .finish()
    }
}

fn image_dims(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match *dims {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::shape(format!("expected image dims [C, H, W], got {dims:?}"))),
    }
}

impl DegradationOperator {
    pub fn colorization(dims: &[usize]) -> Result<Self> {
        image_dims(dims)?;
        Ok(Self {
            kind: OperatorKind::Colorization,
            input_dims: dims.to_vec(),
            output_dims: dims.to_vec(),
            spectrum: None,
        })
    }

    pub fn super_res4(dims: &[usize]) -> Result<Self> {
        let (c, h, w) = image_dims(dims)?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "super-resolution needs H and W divisible by 4, got {h}×{w}"
            )));
        }
        Ok(Self {
            kind: OperatorKind::SuperRes4,
            input_dims: dims.to_vec(),
            output_dims: vec![c, h / 4, w / 4],
            spectrum: None,
        })
    }

    pub fn denoise(dims: &[usize], noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma >= 0.0) {
            return Err(Error::param(format!("noise sigma must be ≥ 0, got {noise_sigma}")));
        }
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("invalid dims {dims:?}")));
        }
        Ok(Self {
            kind: OperatorKind::Denoise { noise_sigma },
            input_dims: dims.to_vec(),
            output_dims: dims.to_vec(),
            spectrum: None,
        })
    }

    pub fn mask(dims: &[usize], mask: Vec<bool>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if mask.len() != n || n == 0 {
            return Err(Error::shape(format!(
                "mask has {} entries for dims {dims:?}",
                mask.len()
            )));
        }
        Ok(Self {
            kind: OperatorKind::Mask { mask },
            input_dims: dims.to_vec(),
            output_dims: dims.to_vec(),
            spectrum: None,
        })
    }

    pub fn blur(dims: &[usize], kernel: Tensor, wiener_lambda: f64) -> Result<Self> {
        let (_, h, w) = image_dims(dims)?;
        let (kh, kw) = match *kernel.dims() {
            [kh, kw] => (kh, kw),
            ref other => return Err(Error::shape(format!("kernel must be 2-D, got {other:?}"))),
        };
        if kh % 2 == 0 || kw % 2 == 0 || kh > h || kw > w {
            return Err(Error::param(format!(
                "kernel {kh}×{kw} must be odd and fit the {h}×{w} image"
            )));
        }
        if kernel.data().iter().any(|&v| v < 0.0) || (kernel.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::param("blur kernel must be nonnegative and sum to 1"));
        }
        if !(wiener_lambda > 0.0) {
            return Err(Error::param(format!(
                "Wiener regularization must be positive, got {wiener_lambda}"
            )));
        }
        // Place the kernel centre at the origin, wrapping circularly.
        let mut plane = vec![0.0; h * w];
        let (cy, cx) = (kh / 2, kw / 2);
        for i in 0..kh {
            for j in 0..kw {
                let y = (i + h - cy) % h;
                let x = (j + w - cx) % w;
                plane[y * w + x] += kernel.data()[i * kw + j];
            }
        }
        let mut spec = real_to_complex(&plane);
        fft2(&mut spec, h, w, false);
        Ok(Self {
            kind: OperatorKind::Blur {
                kernel,
                wiener_lambda,
            },
            input_dims: dims.to_vec(),
            output_dims: dims.to_vec(),
            spectrum: Some(spec),
        })
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }

    /// Whether `A A† A == A` holds exactly (everything except blur).
    pub fn has_exact_pinv(&self) -> bool {
        !matches!(self.kind, OperatorKind::Blur { .. })
    }

    /// Kernel spectrum `H` for blur operators.
    pub fn kernel_spectrum(&self) -> Option<&[Complex64]> {
        self.spectrum.as_deref()
    }

    /// `y = A x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_dims(&self.input_dims, "apply")?;
        match &self.kind {
            OperatorKind::Colorization => Ok(channel_mean_replicated(x)),
            OperatorKind::Denoise { .. } => Ok(x.clone()),
            OperatorKind::Mask { mask } => Ok(apply_mask(x, mask)),
            OperatorKind::SuperRes4 => Ok(avg_pool4(x)),
            OperatorKind::Blur { .. } => Ok(self.filter(x, |h| h)),
        }
    }

    /// `A† y`.
    pub fn apply_pinv(&self, y: &Tensor) -> Result<Tensor> {
        y.expect_dims(&self.output_dims, "apply_pinv")?;
        match &self.kind {
            OperatorKind::Colorization => Ok(channel_mean_replicated(y)),
            OperatorKind::Denoise { .. } => Ok(y.clone()),
            OperatorKind::Mask { mask } => Ok(apply_mask(y, mask)),
            OperatorKind::SuperRes4 => Ok(replicate4(y)),
            OperatorKind::Blur { wiener_lambda, .. } => {
                let lam = *wiener_lambda;
                Ok(self.filter(y, |h| h.conj() / (h.norm_sqr() + lam)))
            }
        }
    }

    /// Adjoint `A*` for blur (correlation with the kernel); used by checks.
    pub fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        y.expect_dims(&self.output_dims, "apply_adjoint")?;
        match &self.kind {
            OperatorKind::Blur { .. } => Ok(self.filter(y, |h| h.conj())),
            OperatorKind::SuperRes4 => Ok(replicate4(y).scale(1.0 / 16.0)),
            _ => self.apply(y),
        }
    }

    /// Multiply every channel's spectrum by `gain(H)`.
    fn filter(&self, x: &Tensor, gain: impl Fn(Complex64) -> Complex64) -> Tensor {
        let spec = self.spectrum.as_ref().expect("blur operator carries a spectrum");
        let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let mut out = Tensor::zeros(x.dims());
        for ch in 0..c {
            let mut buf = real_to_complex(x.channel(ch));
            fft2(&mut buf, h, w, false);
            for (b, &hk) in buf.iter_mut().zip(spec) {
                *b *= gain(hk);
            }
            fft2(&mut buf, h, w, true);
            for (o, b) in out.channel_mut(ch).iter_mut().zip(&buf) {
                *o = b.re;
            }
        }
        out
    }
}

fn channel_mean_replicated(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let plane = h * w;
    let mut mean = vec![0.0; plane];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(x.channel(ch)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let mut out = Tensor::zeros(x.dims());
    for ch in 0..c {
        out.channel_mut(ch).copy_from_slice(&mean);
    }
    out
}

fn apply_mask(x: &Tensor, mask: &[bool]) -> Tensor {
    let mut out = x.clone();
    for (v, &keep) in out.data_mut().iter_mut().zip(mask) {
        if !keep {
            *v = 0.0;
        }
    }
    out
}

fn avg_pool4(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (lh, lw) = (h / 4, w / 4);
    let mut out = Tensor::zeros(&[c, lh, lw]);
    let data = out.data_mut();
    for ch in 0..c {
        for u in 0..lh {
            for v in 0..lw {
                // Pairwise sums, so a constant block averages back exactly.
                let row = |i: usize| {
                    let at = |j: usize| x.at3(ch, 4 * u + i, 4 * v + j);
                    (at(0) + at(1)) + (at(2) + at(3))
                };
                let s = (row(0) + row(1)) + (row(2) + row(3));
                data[(ch * lh + u) * lw + v] = s / 16.0;
            }
        }
    }
    out
}

fn replicate4(y: &Tensor) -> Tensor {
    let (c, lh, lw) = (y.dims()[0], y.dims()[1], y.dims()[2]);
    let (h, w) = (lh * 4, lw * 4);
    let mut out = Tensor::zeros(&[c, h, w]);
    let data = out.data_mut();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                data[(ch * h + i) * w + j] = y.at3(ch, i / 4, j / 4);
            }
        }
    }
    out
}

/// Strength and optional injected noise for one fidelity update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityUpdateConfig {
    pub lambda_strength: f64,
    pub injected_noise_sigma: f64,
}

impl FidelityUpdateConfig {
    pub fn new(lambda_strength: f64, injected_noise_sigma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda_strength) {
            return Err(Error::param(format!("λ must lie in [0, 1], got {lambda_strength}")));
        }
        if !(injected_noise_sigma >= 0.0) {
            return Err(Error::param(format!(
                "injected noise sigma must be ≥ 0, got {injected_noise_sigma}"
            )));
        }
        Ok(Self {
            lambda_strength,
            injected_noise_sigma,
        })
    }

    pub fn full() -> Self {
        Self {
            lambda_strength: 1.0,
            injected_noise_sigma: 0.0,
        }
    }
}

/// `A†y + λ (x − A†A x) + ξ`, with `ξ ~ N(0, η²I)` drawn only when `η > 0`.
pub fn fidelity_update<R: Rng + ?Sized>(
    x: &Tensor,
    y: &Tensor,
    op: &DegradationOperator,
    cfg: FidelityUpdateConfig,
    rng: &mut R,
) -> Result<Tensor> {
    x.expect_dims(op.input_dims(), "fidelity_update x")?;
    y.expect_dims(op.output_dims(), "fidelity_update y")?;
    let range = op.apply_pinv(y)?;
    let projected = op.apply_pinv(&op.apply(x)?)?;
    let lam = cfg.lambda_strength;
    let mut out = range;
    for ((o, &xv), &pv) in out.data_mut().iter_mut().zip(x.data()).zip(projected.data()) {
        *o += lam * (xv - pv);
    }
    if cfg.injected_noise_sigma > 0.0 {
        let eta = cfg.injected_noise_sigma;
        for o in out.data_mut() {
            *o += eta * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}
