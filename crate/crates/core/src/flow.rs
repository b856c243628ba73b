//! Rectified-flow primitives.
//!
//! Convention used throughout the crate: `t = 0` is the clean end and
//! `t = 1` the Gaussian noise end, `x_t = (1 − t)·x_0 + t·x_1`, and the
//! target velocity is `x_1 − x_0`. Generation therefore integrates from
//! `t = 1` down to `t = 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest time at which inversion evaluates a velocity field. Point-mass
/// targets have a `1/t` singularity at the clean end.
pub const INVERSION_T_MIN: f64 = 1e-6;

/// Anything that maps `(state, time)` to a velocity of the same shape.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self(x, t)
    }
}

/// The field that is zero everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl VelocityField for ZeroField {
    fn velocity(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(Tensor::zeros(x.dims()))
    }
}

/// Increasing time grid `0 = t_0 < … < t_N = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// `t_i = i / N`.
    pub fn uniform(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::param("time grid needs at least one step"));
        }
        let mut times: Vec<f64> = (0..=n_steps).map(|i| i as f64 / n_steps as f64).collect();
        times[n_steps] = 1.0;
        Ok(Self { times })
    }

    pub fn custom(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::param("time grid needs at least one step"));
        }
        if times[0] != 0.0 || times[times.len() - 1] != 1.0 {
            return Err(Error::param("time grid must start at 0 and end at 1"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("time grid must be strictly increasing"));
        }
        Ok(Self { times })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// `t_i` for `i ∈ 0..=N`.
    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(times: Vec<f64>) -> Result<Self> {
        Self::custom(times)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.times
    }
}

/// Isotropic Gaussian mixture standing in for the clean distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmTarget {
    weights: Vec<f64>,
    means: Vec<Tensor>,
    stdevs: Vec<f64>,
}

impl GmmTarget {
    pub fn new(weights: Vec<f64>, means: Vec<Tensor>, stdevs: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != stdevs.len() {
            return Err(Error::param("mixture needs matching, non-empty weights/means/stdevs"));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::param("mixture weights must be nonnegative and sum to 1"));
        }
        if stdevs.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::param("mixture stdevs must be ≥ 0"));
        }
        let dims = means[0].dims();
        if means.iter().any(|m| m.dims() != dims) {
            return Err(Error::shape("mixture means must share dims"));
        }
        Ok(Self {
            weights,
            means,
            stdevs,
        })
    }

    /// Single isotropic Gaussian `N(mean, stdev² I)`.
    pub fn single(mean: Tensor, stdev: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![stdev])
    }

    pub fn dims(&self) -> &[usize] {
        self.means[0].dims()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Tensor] {
        &self.means
    }

    pub fn stdevs(&self) -> &[f64] {
        &self.stdevs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let noise = Tensor::randn(self.dims(), rng);
        Tensor::lincomb(1.0, &self.means[k], self.stdevs[k], &noise).expect("same dims")
    }

    /// Mixture mean, per coordinate.
    pub fn mean(&self) -> Tensor {
        let mut m = Tensor::zeros(self.dims());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m.axpy(*w, mu).expect("same dims");
        }
        m
    }

    /// Mixture variance, per coordinate.
    pub fn variance(&self) -> Tensor {
        let mean = self.mean();
        let mut v = Tensor::zeros(self.dims());
        for ((w, mu), s) in self.weights.iter().zip(&self.means).zip(&self.stdevs) {
            for ((vi, &mi), &m) in v.data_mut().iter_mut().zip(mu.data()).zip(mean.data()) {
                *vi += w * (s * s + (mi - m) * (mi - m));
            }
        }
        v
    }

    /// Responsibilities `r_k ∝ w_k N(x; c_k·μ_k, s_k² I)` from log-weights,
    /// normalized with log-sum-exp.
    pub(crate) fn responsibilities(&self, x: &Tensor, scale: f64, var: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(var)
            .map(|((&w, mu), &s2)| {
                if w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let r2: f64 = x
                    .data()
                    .iter()
                    .zip(mu.data())
                    .map(|(&xi, &mi)| (xi - scale * mi).powi(2))
                    .sum();
                w.ln() - 0.5 * d * s2.ln() - r2 / (2.0 * s2)
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Per-component conditional means `(E[x_0 | x_t, k], E[x_1 | x_t, k])`
    /// and responsibilities under the rectified-flow interpolation.
    pub fn flow_posterior(&self, x: &Tensor, t: f64) -> Result<(Vec<f64>, Vec<(Tensor, Tensor)>)> {
        x.expect_dims(self.dims(), "gmm_velocity")?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::param(format!("t must lie in [0, 1], got {t}")));
        }
        let a = 1.0 - t;
        let var: Vec<f64> = self.stdevs.iter().map(|s| a * a * s * s + t * t).collect();
        if var.iter().any(|&s2| s2 <= 0.0) {
            return Err(Error::Singularity(
                "t = 0 with a zero-variance mixture component".into(),
            ));
        }
        let resp = self.responsibilities(x, a, &var);
        let conds = self
            .means
            .iter()
            .zip(&self.stdevs)
            .zip(&var)
            .map(|((mu, &s), &s2)| {
                let mut e0 = mu.clone();
                let mut e1 = Tensor::zeros(x.dims());
                let g0 = a * s * s / s2;
                let g1 = t / s2;
                for ((e0i, e1i), (&xi, &mi)) in e0
                    .data_mut()
                    .iter_mut()
                    .zip(e1.data_mut())
                    .zip(x.data().iter().zip(mu.data()))
                {
                    let r = xi - a * mi;
                    *e0i += g0 * r;
                    *e1i = g1 * r;
                }
                (e0, e1)
            })
            .collect();
        Ok((resp, conds))
    }
}

/// Exact marginal velocity `E[x_1 − x_0 | x_t = x]` for a mixture target.
pub fn gmm_velocity(x: &Tensor, t: f64, target: &GmmTarget) -> Result<Tensor> {
    let (resp, conds) = target.flow_posterior(x, t)?;
    let mut v = Tensor::zeros(x.dims());
    for (r, (e0, e1)) in resp.iter().zip(&conds) {
        if *r == 0.0 {
            continue;
        }
        for ((vi, &a), &b) in v.data_mut().iter_mut().zip(e1.data()).zip(e0.data()) {
            *vi += r * (a - b);
        }
    }
    Ok(v)
}

impl VelocityField for GmmTarget {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        gmm_velocity(x, t, self)
    }
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::param(format!("t must lie in [0, 1], got {t}")));
    }
    if t == 0.0 {
        x0.expect_dims(x1.dims(), "interpolate")?;
        return Ok(x0.clone());
    }
    if t == 1.0 {
        x0.expect_dims(x1.dims(), "interpolate")?;
        return Ok(x1.clone());
    }
    Tensor::lincomb(1.0 - t, x0, t, x1)
}

fn checked_velocity<V: VelocityField + ?Sized>(
    v: &V,
    x: &Tensor,
    t: f64,
    step: usize,
) -> Result<Tensor> {
    let vel = v.velocity(x, t)?;
    x.expect_dims(vel.dims(), "velocity")?;
    if !vel.is_finite() {
        return Err(Error::Numerical {
            step,
            msg: format!("non-finite velocity at t = {t}"),
        });
    }
    Ok(vel)
}

/// One generation step from `t_i` to `t_{i−1}`:
/// `x ← x + (t_{i−1} − t_i)·v(x, t_i)`.
pub fn euler_step<V: VelocityField + ?Sized>(
    v: &V,
    x: &mut Tensor,
    grid: &TimeGrid,
    i: usize,
) -> Result<()> {
    let (t_from, t_to) = (grid.t(i), grid.t(i - 1));
    let vel = checked_velocity(v, x, t_from, i)?;
    x.axpy(t_to - t_from, &vel)
}

/// Integrates from the noise end to the clean end and returns
/// `[x_{t_N}, …, x_{t_0}]`.
pub fn euler_generate<V: VelocityField + ?Sized>(
    v: &V,
    x_start: &Tensor,
    grid: &TimeGrid,
) -> Result<Vec<Tensor>> {
    let n = grid.n_steps();
    let mut traj = Vec::with_capacity(n + 1);
    let mut x = x_start.clone();
    traj.push(x.clone());
    for i in (1..=n).rev() {
        euler_step(v, &mut x, grid, i)?;
        traj.push(x.clone());
    }
    Ok(traj)
}

/// Integrates from the clean end to the noise end and returns
/// `[x_{t_0}, …, x_{t_N}]`.
pub fn euler_invert<V: VelocityField + ?Sized>(
    v: &V,
    x_clean: &Tensor,
    grid: &TimeGrid,
) -> Result<Vec<Tensor>> {
    let n = grid.n_steps();
    let mut traj = Vec::with_capacity(n + 1);
    let mut x = x_clean.clone();
    traj.push(x.clone());
    for i in 0..n {
        let (t_from, t_to) = (grid.t(i), grid.t(i + 1));
        let vel = checked_velocity(v, &x, t_from.max(INVERSION_T_MIN), i)?;
        x.axpy(t_to - t_from, &vel)?;
        traj.push(x.clone());
    }
    Ok(traj)
}

/// Clean-image estimate from an interpolated state:
/// `x_t / ((1 − t) + ε) − t·η / ((1 − t) + ε)`.
pub fn denoise_estimate(x_t: &Tensor, t: f64, eta: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::param(format!("eps must be positive, got {eps}")));
    }
    let d = (1.0 - t) + eps;
    x_t.zip_with(eta, |x, e| x / d - t * e / d)
}

/// `(1 − t)·x̄_0 + t·η`.
pub fn project_back(x0_bar: &Tensor, t: f64, eta: &Tensor) -> Result<Tensor> {
    interpolate(x0_bar, eta, t)
}

/// Draws a noise sample and returns its terminal state under `v`.
pub fn sample_terminal<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    v: &V,
    dims: &[usize],
    grid: &TimeGrid,
    rng: &mut R,
) -> Result<Tensor> {
    let start = Tensor::randn(dims, rng);
    let traj = euler_generate(v, &start, grid)?;
    Ok(traj.into_iter().last().expect("non-empty trajectory"))
}
