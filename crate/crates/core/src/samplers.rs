//! Restoration procedures built on the flow and diffusion primitives.
//!
//! * [`restore_flowsteer`]: Euler sampling in latent space with a sparse,
//!   scheduled fidelity update applied in pixel space.
//! * [`restore_ideal_flow`]: a full fidelity update at every step, routed
//!   through the clean-image estimate and projected back.
//! * [`restore_ddnm`]: the diffusion-side null-space baseline.
//! * [`generate_unconditioned`]: plain sampling, no measurement.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::flow::{denoise_estimate, euler_step, project_back, GmmTarget, TimeGrid, VelocityField};
use crate::metrics::psnr;
use crate::operators::{fidelity_update, DegradationOperator, FidelityUpdateConfig};
use crate::schedules::{a_t_coeff, adaptive_lambda_gamma, DiffusionSchedule, LambdaSchedule};
use crate::tensor::Tensor;

/// Default `ε` for the clean-image estimate.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct RestorationTask {
    pub operator: DegradationOperator,
    pub measurement: Tensor,
    pub ground_truth: Option<Tensor>,
    pub seed: u64,
}

impl RestorationTask {
    pub fn new(operator: DegradationOperator, measurement: Tensor) -> Result<Self> {
        measurement.expect_dims(operator.output_dims(), "measurement")?;
        Ok(Self {
            operator,
            measurement,
            ground_truth: None,
            seed: 0,
        })
    }

    pub fn with_ground_truth(mut self, truth: Tensor) -> Result<Self> {
        truth.expect_dims(self.operator.input_dims(), "ground truth")?;
        self.ground_truth = Some(truth);
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// How the fidelity update is applied at a conditioned step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Update the current state directly.
    #[default]
    Direct,
    /// Estimate the clean image, update it, and project back to `t`.
    ViaX0,
}

#[derive(Debug, Clone)]
pub struct FlowSteerConfig {
    pub grid: TimeGrid,
    pub schedule: LambdaSchedule,
    pub codec: LatentCodec,
    pub eta_eff: f64,
    pub projection_mode: ProjectionMode,
    pub eps: f64,
}

impl FlowSteerConfig {
    pub fn new(grid: TimeGrid, schedule: LambdaSchedule, codec: LatentCodec) -> Self {
        Self {
            grid,
            schedule,
            codec,
            eta_eff: 0.0,
            projection_mode: ProjectionMode::Direct,
            eps: DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.n_steps() != self.grid.n_steps() {
            return Err(Error::config(format!(
                "schedule has {} steps but the grid has {}",
                self.schedule.n_steps(),
                self.grid.n_steps()
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.eta_eff >= 0.0) {
            return Err(Error::config(format!("eta_eff must be ≥ 0, got {}", self.eta_eff)));
        }
        Ok(())
    }
}

/// State of one reconstruction step, recorded after any update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    /// 1-based step index counted from the start of reconstruction.
    pub step: usize,
    /// Time the state sits at after this step.
    pub t: f64,
    pub lambda: f64,
    pub conditioned: bool,
    pub residual_l2: f64,
    pub residual_linf: f64,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
    /// Pixel-space state right after the last conditioned update.
    pub last_conditioned: Option<Tensor>,
}

fn residual(op: &DegradationOperator, x: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
    let r = op.apply(x)?.sub(y)?;
    Ok((r.norm_l2(), r.norm_linf()))
}

/// Reports numerical failures by reconstruction step rather than grid index.
fn renumber(e: Error, k: usize) -> Error {
    match e {
        Error::Numerical { msg, .. } => Error::Numerical { step: k, msg },
        other => other,
    }
}

fn check_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            step,
            msg: "state became non-finite".into(),
        })
    }
}

/// Scheduled fidelity conditioning of a flow sampler.
///
/// Starts from `z ~ N(0, I)` at `t = 1`. Each step takes one Euler step in
/// latent space; when `λ_k > 0` the state is decoded, pulled onto the
/// measurement with [`fidelity_update`] and re-encoded. Steps with `λ_k = 0`
/// never leave latent space. Returns the decoded terminal state and the
/// per-step trace.
pub fn restore_flowsteer<V, R>(
    v: &V,
    task: &RestorationTask,
    cfg: &FlowSteerConfig,
    rng: &mut R,
) -> Result<(Tensor, Trace)>
where
    V: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let op = &task.operator;
    if cfg.codec.pixel_dims() != op.input_dims() {
        return Err(Error::config(format!(
            "codec pixel dims {:?} do not match operator input {:?}",
            cfg.codec.pixel_dims(),
            op.input_dims()
        )));
    }
    let y = &task.measurement;
    let n = cfg.grid.n_steps();
    let mut z = Tensor::randn(cfg.codec.latent_dims(), rng);
    // Only the projection ablation needs the initial draw in pixel space.
    let eta_pixels = match cfg.projection_mode {
        ProjectionMode::ViaX0 => Some(cfg.codec.decode(&z)?),
        ProjectionMode::Direct => None,
    };
    let mut trace = Trace::default();
    for k in 1..=n {
        let i = n - k + 1;
        euler_step(v, &mut z, &cfg.grid, i).map_err(|e| renumber(e, k))?;
        check_finite(&z, k)?;
        let t = cfg.grid.t(i - 1);
        let lam = cfg.schedule.at_step(k);
        let conditioned = lam > 0.0;
        if conditioned {
            let x = cfg.codec.decode_noisy(&z, rng)?;
            let update = FidelityUpdateConfig::new(lam, cfg.eta_eff)?;
            let x = match (&eta_pixels, cfg.projection_mode) {
                (Some(eta), ProjectionMode::ViaX0) => {
                    let x0 = denoise_estimate(&x, t, eta, cfg.eps)?;
                    let x0_bar = fidelity_update(&x0, y, op, update, rng)?;
                    project_back(&x0_bar, t, eta)?
                }
                _ => fidelity_update(&x, y, op, update, rng)?,
            };
            check_finite(&x, k)?;
            z = cfg.codec.encode(&x)?;
            trace.last_conditioned = Some(x);
        }
        let x_view = cfg.codec.decode(&z)?;
        let (l2, linf) = residual(op, &x_view, y)?;
        let psnr_now = match &task.ground_truth {
            Some(gt) => Some(psnr(&x_view, gt, 1.0)?),
            None => None,
        };
        trace.steps.push(TraceStep {
            step: k,
            t,
            lambda: lam,
            conditioned,
            residual_l2: l2,
            residual_linf: linf,
            psnr: psnr_now,
        });
    }
    let out = cfg.codec.decode_noisy(&z, rng)?;
    Ok((out, trace))
}

/// Plain Euler generation from `N(0, I)` followed by a decode.
pub fn generate_unconditioned<V, R>(v: &V, grid: &TimeGrid, codec: &LatentCodec, rng: &mut R) -> Result<Tensor>
where
    V: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let mut z = Tensor::randn(codec.latent_dims(), rng);
    let n = grid.n_steps();
    for k in 1..=n {
        euler_step(v, &mut z, grid, n - k + 1).map_err(|e| renumber(e, k))?;
        check_finite(&z, k)?;
    }
    codec.decode_noisy(&z, rng)
}

/// Full-strength fidelity update at every step through the clean-image
/// estimate: denoise with `η`, project onto the measurement, project back.
///
/// `η` is the initial noise draw unless `resample_eta` is set, in which case
/// a fresh draw is used at every step.
pub fn restore_ideal_flow<V, R>(
    v: &V,
    task: &RestorationTask,
    grid: &TimeGrid,
    eps: f64,
    resample_eta: bool,
    rng: &mut R,
) -> Result<Tensor>
where
    V: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    let op = &task.operator;
    let y = &task.measurement;
    let n = grid.n_steps();
    let mut eta = Tensor::randn(op.input_dims(), rng);
    let mut x = eta.clone();
    for k in 1..=n {
        let i = n - k + 1;
        euler_step(v, &mut x, grid, i).map_err(|e| renumber(e, k))?;
        let t = grid.t(i - 1);
        if resample_eta {
            eta = Tensor::randn(op.input_dims(), rng);
        }
        let x0 = denoise_estimate(&x, t, &eta, eps)?;
        let x0_bar = fidelity_update(&x0, y, op, FidelityUpdateConfig::full(), rng)?;
        x = project_back(&x0_bar, t, &eta)?;
        check_finite(&x, k)?;
    }
    Ok(x)
}

/// Closed-form posterior-mean denoiser for a mixture prior under the
/// variance-preserving corruption `x_t = sqrt(ᾱ) x_0 + sqrt(1 − ᾱ) ε`.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    pub prior: GmmTarget,
}

impl AnalyticDenoiser {
    pub fn new(prior: GmmTarget) -> Self {
        Self { prior }
    }

    /// `E[x_0 | x_t]` at noise level `ᾱ`.
    pub fn posterior_mean(&self, x_t: &Tensor, alpha_bar: f64) -> Result<Tensor> {
        x_t.expect_dims(self.prior.dims(), "denoiser input")?;
        let scale = alpha_bar.sqrt();
        let var: Vec<f64> = self
            .prior
            .stdevs()
            .iter()
            .map(|s| alpha_bar * s * s + (1.0 - alpha_bar))
            .collect();
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::Singularity("zero predictive variance in denoiser".into()));
        }
        let resp = self.prior.responsibilities(x_t, scale, &var);
        let mut out = Tensor::zeros(x_t.dims());
        for (((r, mu), s), v) in resp.iter().zip(self.prior.means()).zip(self.prior.stdevs()).zip(&var) {
            if *r == 0.0 {
                continue;
            }
            let gain = scale * s * s / v;
            for ((o, &m), &x) in out.data_mut().iter_mut().zip(mu.data()).zip(x_t.data()) {
                *o += r * (m + gain * (x - scale * m));
            }
        }
        Ok(out)
    }

    /// Noise prediction consistent with [`posterior_mean`](Self::posterior_mean).
    pub fn predict_noise(&self, x_t: &Tensor, alpha_bar: f64) -> Result<Tensor> {
        let x0 = self.posterior_mean(x_t, alpha_bar)?;
        let s = (1.0 - alpha_bar).sqrt();
        let c = alpha_bar.sqrt();
        x_t.zip_with(&x0, |x, m| (x - c * m) / s)
    }
}

/// Diffusion-path restoration alternating denoising with the null-space
/// fidelity update.
///
/// The update is written as `x̂_0 = x_{0|t} − λ_t A†(A x_{0|t} − y)`; the
/// plain variant uses `λ_t = 1`, which equals `A†y + (I − A†A) x_{0|t}`
/// for a linear pseudo-inverse. The noise-robust variant damps `λ_t` and
/// swaps `σ_t` for `γ_t`.
pub fn restore_ddnm<R: Rng + ?Sized>(
    denoiser: &AnalyticDenoiser,
    task: &RestorationTask,
    s: &DiffusionSchedule,
    use_noise_robust: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let op = &task.operator;
    if denoiser.prior.dims() != op.input_dims() {
        return Err(Error::config(format!(
            "prior dims {:?} do not match operator input {:?}",
            denoiser.prior.dims(),
            op.input_dims()
        )));
    }
    let y = &task.measurement;
    let steps = s.steps();
    let mut x = Tensor::randn(op.input_dims(), rng);
    for t in (1..=steps).rev() {
        let ab = s.alpha_bar(t);
        let eps_hat = denoiser.predict_noise(&x, ab)?;
        let x0 = Tensor::lincomb(1.0, &x, -(1.0 - ab).sqrt(), &eps_hat)?.scale(1.0 / ab.sqrt());
        let a_t = a_t_coeff(s, t);
        let (lam, noise_scale) = if use_noise_robust {
            let step = adaptive_lambda_gamma(s.sigma(t), a_t, s.sigma_y());
            (step.lambda_t, step.gamma_t)
        } else {
            (1.0, s.sigma(t))
        };
        let correction = op.apply_pinv(&op.apply(&x0)?.sub(y)?)?;
        let x0_hat = Tensor::lincomb(1.0, &x0, -lam, &correction)?;
        let mut next = Tensor::lincomb(a_t, &x0_hat, s.x_t_coeff(t), &x)?;
        for v in next.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += noise_scale * e;
        }
        check_finite(&next, t)?;
        x = next;
    }
    Ok(x)
}
