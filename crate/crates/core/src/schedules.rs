//! Conditioning schedules.
//!
//! Step indices count sampler iterations from the start of reconstruction:
//! step 1 is the first (noisiest) step and step `N` is the last, which lands
//! on `t = 0`. Step `k` moves the state from `t_{N−k+1}` to `t_{N−k}` and its
//! fidelity update, if any, acts on the state at `t_{N−k}`. In terms of the
//! descending loop variable `i = N, …, 1` used when writing the sampler as
//! `x_{t_{i−1}} = x_{t_i} + …`, step `k` is iteration `i = N − k + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step conditioning strengths `λ_1 … λ_N`, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LambdaSchedule {
    values: Vec<f64>,
}

impl LambdaSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("schedule must have at least one step"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("schedule value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn zeros(n_steps: usize) -> Result<Self> {
        Self::new(vec![0.0; n_steps])
    }

    pub fn n_steps(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `λ_k` for the 1-based step `k`.
    pub fn at_step(&self, k: usize) -> f64 {
        self.values[k - 1]
    }

    /// Number of steps with `λ > 0`.
    pub fn active_steps(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

impl TryFrom<Vec<f64>> for LambdaSchedule {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<LambdaSchedule> for Vec<f64> {
    fn from(s: LambdaSchedule) -> Self {
        s.values
    }
}

/// Step index for a fraction of `N`, e.g. `0.5` for `0.5N`.
///
/// Rounds to nearest; an exact half goes to the lower index. The result is
/// clamped into `[1, N]`.
pub fn fraction_to_step(fraction: f64, n_steps: usize) -> usize {
    let x = fraction * n_steps as f64;
    let lo = x.floor();
    let k = if x - lo > 0.5 { lo + 1.0 } else { lo };
    (k.max(1.0) as usize).min(n_steps)
}

/// `λ_i = h` for `i_start ≤ i ≤ i_stop`, else 0.
pub fn rect_schedule(n_steps: usize, i_start: usize, i_stop: usize, h: f64) -> Result<LambdaSchedule> {
    if n_steps == 0 {
        return Err(Error::param("schedule must have at least one step"));
    }
    if !(1 <= i_start && i_start <= i_stop && i_stop <= n_steps) {
        return Err(Error::param(format!(
            "rectangular window needs 1 ≤ start ≤ stop ≤ N, got ({i_start}, {i_stop}, {n_steps})"
        )));
    }
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::param(format!("window height must lie in (0, 1], got {h}")));
    }
    let values = (1..=n_steps)
        .map(|i| if (i_start..=i_stop).contains(&i) { h } else { 0.0 })
        .collect();
    LambdaSchedule::new(values)
}

/// Two-level window: `h1` on `[i_start, i_step)`, `h2` on `[i_step, i_end]`,
/// then the last `final_pad` steps forced to zero.
///
/// Out-of-order or out-of-range indices are reordered and clamped rather
/// than rejected. If padding wipes out every nonzero entry, the step right
/// before the padding is set to 1.
pub fn two_step_schedule(
    n_steps: usize,
    i_start: usize,
    i_step: usize,
    i_end: usize,
    h1: f64,
    h2: f64,
    final_pad: usize,
) -> Result<LambdaSchedule> {
    if n_steps == 0 {
        return Err(Error::param("schedule must have at least one step"));
    }
    if !(0.0..=1.0).contains(&h1) || !(0.0..=1.0).contains(&h2) {
        return Err(Error::param(format!("levels must lie in [0, 1], got ({h1}, {h2})")));
    }
    let n = n_steps as i64;
    // Zero-based, end-exclusive.
    let i0 = i_start as i64 - 1;
    let i1 = i_step as i64 - 1;
    let i2 = i_end as i64;
    let (a, b) = (i0.min(i1), i0.max(i1));
    let (b, c) = (b.min(i2), b.max(i2));
    let a = a.clamp(0, n) as usize;
    let b = b.clamp(0, n) as usize;
    let c = c.clamp(0, n) as usize;

    let mut lam = vec![0.0; n_steps];
    if a < b {
        lam[a..b].iter_mut().for_each(|v| *v = h1);
    }
    if b < c {
        lam[b..c].iter_mut().for_each(|v| *v = h2);
    }
    if final_pad > 0 && final_pad < n_steps {
        lam[n_steps - final_pad..].iter_mut().for_each(|v| *v = 0.0);
    }
    let peak = lam.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak <= 0.0 && final_pad < n_steps {
        lam[n_steps - final_pad - 1] = 1.0;
    } else {
        let norm = peak.max(1.0);
        lam.iter_mut().for_each(|v| *v /= norm);
    }
    LambdaSchedule::new(lam)
}

/// Named schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulePreset {
    /// One window over 50%–90% of the steps at full strength.
    General,
    Colorization,
    Superres,
    Deblur,
    Denoise,
    /// `λ ≡ 0`.
    None,
    /// `λ ≡ 1`.
    Always,
}

impl SchedulePreset {
    pub const ALL: [SchedulePreset; 7] = [
        SchedulePreset::General,
        SchedulePreset::Colorization,
        SchedulePreset::Superres,
        SchedulePreset::Deblur,
        SchedulePreset::Denoise,
        SchedulePreset::None,
        SchedulePreset::Always,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulePreset::General => "general",
            SchedulePreset::Colorization => "colorization",
            SchedulePreset::Superres => "superres",
            SchedulePreset::Deblur => "deblur",
            SchedulePreset::Denoise => "denoise",
            SchedulePreset::None => "none",
            SchedulePreset::Always => "always",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::config(format!("unknown schedule preset '{name}'")))
    }

    /// Two-step parameters `(start, step, end, h1, h2)` as fractions of `N`.
    fn two_step_fractions(self) -> Option<(f64, f64, f64, f64, f64)> {
        match self {
            SchedulePreset::Colorization => Some((0.4, 0.5, 0.95, 1.0, 0.3)),
            SchedulePreset::Superres => Some((0.5, 0.7, 0.85, 1.0, 0.5)),
            SchedulePreset::Deblur => Some((0.7, 0.8, 0.9, 1.0, 0.3)),
            SchedulePreset::Denoise => Some((0.5, 0.75, 0.95, 1.0, 0.5)),
            _ => None,
        }
    }

    pub fn build(self, n_steps: usize) -> Result<LambdaSchedule> {
        match self {
            SchedulePreset::General => rect_schedule(
                n_steps,
                fraction_to_step(0.5, n_steps),
                fraction_to_step(0.9, n_steps),
                1.0,
            ),
            SchedulePreset::None => LambdaSchedule::zeros(n_steps),
            SchedulePreset::Always => rect_schedule(n_steps, 1, n_steps, 1.0),
            p => {
                let (s, m, e, h1, h2) = p.two_step_fractions().expect("two-step preset");
                two_step_schedule(
                    n_steps,
                    fraction_to_step(s, n_steps),
                    fraction_to_step(m, n_steps),
                    fraction_to_step(e, n_steps),
                    h1,
                    h2,
                    DEFAULT_FINAL_PAD,
                )
            }
        }
    }
}

/// Final padding used by the two-step presets.
pub const DEFAULT_FINAL_PAD: usize = 1;

/// DDPM-style noise schedule for the diffusion baseline, indexed `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    sigma_y: f64,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior standard deviation `σ_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Coefficient on `x_t` in the posterior mean.
    pub fn x_t_coeff(&self, t: usize) -> f64 {
        self.alpha(t).sqrt() * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// Linearly spaced `β` from `beta_first` to `beta_last` over `T` steps.
pub fn ddpm_schedule(steps: usize, beta_first: f64, beta_last: f64, sigma_y: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::param(format!("diffusion schedule needs T ≥ 2, got {steps}")));
    }
    if !(0.0 < beta_first && beta_first <= beta_last && beta_last < 1.0) {
        return Err(Error::param(format!(
            "need 0 < β_first ≤ β_last < 1, got ({beta_first}, {beta_last})"
        )));
    }
    if !(sigma_y >= 0.0) {
        return Err(Error::param(format!("σ_y must be ≥ 0, got {sigma_y}")));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_first + (beta_last - beta_first) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    let sigmas = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            (betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])).sqrt()
        })
        .collect();
    Ok(DiffusionSchedule {
        betas,
        alpha_bars,
        sigmas,
        sigma_y,
    })
}

/// Standard linear schedule `1e-4 … 0.02` defined for 1000 steps, rescaled
/// by `1000 / T` so shorter chains still end near pure noise.
pub fn ddpm_linear_for_steps(steps: usize, sigma_y: f64) -> Result<DiffusionSchedule> {
    let scale = 1000.0 / steps as f64;
    ddpm_schedule(steps, 1e-4 * scale, (0.02 * scale).min(0.999), sigma_y)
}

/// `a_t = sqrt(ᾱ_{t−1})·β_t / (1 − ᾱ_t)`.
pub fn a_t_coeff(s: &DiffusionSchedule, t: usize) -> f64 {
    s.alpha_bar(t - 1).sqrt() * s.beta(t) / (1.0 - s.alpha_bar(t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseRobustStep {
    pub a_t: f64,
    pub lambda_t: f64,
    pub gamma_t: f64,
}

/// Damped fidelity strength and matching noise scale for a noisy
/// measurement: `λ_t = min(1, σ_t / (a_t σ_y))`,
/// `γ_t = sqrt(max(0, σ_t² − a_t² λ_t² σ_y²))`.
///
/// With `σ_t = 0` and `σ_y > 0` both collapse to zero: no correction at all.
pub fn adaptive_lambda_gamma(sigma_t: f64, a_t: f64, sigma_y: f64) -> NoiseRobustStep {
    let scale = a_t * sigma_y;
    let (lambda_t, gamma_t) = if sigma_t >= scale {
        (1.0, (sigma_t * sigma_t - scale * scale).max(0.0).sqrt())
    } else {
        (sigma_t / scale, 0.0)
    };
    NoiseRobustStep {
        a_t,
        lambda_t,
        gamma_t,
    }
}
