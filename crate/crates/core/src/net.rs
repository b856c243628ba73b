//! A small fully connected velocity network trained with the rectified-flow
//! regression objective.
//!
//! Input is the flattened state concatenated with sinusoidal time features
//! `[sin(2^j π t), cos(2^j π t)]` for `j < F/2`; hidden layers use `tanh`;
//! the output layer is linear. Weights are drawn from
//! `U(−1/sqrt(fan_in), 1/sqrt(fan_in))` and biases start at zero.
//!
//! A linear skip adds `g(t)·x` to the output, with the scalar gain
//! `g(t) = (s·φ(t) + s_0) / sqrt(D)` read off the same time features `φ`
//! (`D` is the data dimension). It starts at zero, so a fresh net is a plain
//! MLP.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `out × in`.
    w: Array2<f64>,
    b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    data_dim: usize,
    time_features: usize,
    layers: Vec<Layer>,
    /// Skip gain weights over the time features, then its bias.
    skip: Array1<f64>,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone)]
struct Grads {
    layers: Vec<(Array2<f64>, Array1<f64>)>,
    skip: Array1<f64>,
}

/// Activations kept from a forward pass for backpropagation.
struct Tape {
    /// Input to each layer; `inputs[0]` is the feature matrix.
    inputs: Vec<Array2<f64>>,
    /// Skip basis per batch row.
    basis: Array2<f64>,
    output: Array2<f64>,
}

impl VelocityNet {
    pub fn new(data_dim: usize, hidden: &[usize], time_features: usize, seed: u64) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::param("velocity net needs at least one hidden layer"));
        }
        if data_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::param("layer widths must be positive"));
        }
        if time_features == 0 || time_features % 2 != 0 {
            return Err(Error::param(format!(
                "time feature count must be positive and even, got {time_features}"
            )));
        }
        let mut rng = rng_from_seed(seed);
        let mut widths = vec![data_dim + time_features];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let layers = widths
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..bound));
                Layer {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            data_dim,
            time_features,
            layers,
            skip: Array1::zeros(time_features + 1),
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn time_features(&self) -> usize {
        self.time_features
    }

    /// Layer widths from input features to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut out = vec![self.layers[0].w.ncols()];
        out.extend(self.layers.iter().map(|l| l.w.nrows()));
        out
    }

    pub fn hidden(&self) -> Vec<usize> {
        let w = self.widths();
        w[1..w.len() - 1].to_vec()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum::<usize>() + self.skip.len()
    }

    /// All parameters flattened: per layer, `W` row-major then `b`; the
    /// skip weights and bias come last.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out.extend(self.skip.iter());
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("parameters must be finite"));
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| *v = *it.next().expect("length checked"));
            l.b.iter_mut().for_each(|v| *v = *it.next().expect("length checked"));
        }
        self.skip.iter_mut().for_each(|v| *v = *it.next().expect("length checked"));
        Ok(())
    }

    /// Rebuild from widths and flattened parameters.
    pub fn from_parts(widths: &[usize], time_features: usize, params: &[f64]) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::param("need input, ≥1 hidden, and output widths"));
        }
        let data_dim = *widths.last().expect("non-empty");
        if widths[0] != data_dim + time_features {
            return Err(Error::shape(format!(
                "input width {} != data dim {data_dim} + time features {time_features}",
                widths[0]
            )));
        }
        let mut net = Self::new(data_dim, &widths[1..widths.len() - 1], time_features, 0)?;
        net.set_params(params)?;
        Ok(net)
    }

    fn time_embedding(&self, t: f64, row: &mut [f64]) {
        for j in 0..self.time_features / 2 {
            let arg = (1u64 << j) as f64 * std::f64::consts::PI * t;
            row[2 * j] = arg.sin();
            row[2 * j + 1] = arg.cos();
        }
    }

    /// Feature matrix for a batch of flattened states and times.
    fn features(&self, xs: &Array2<f64>, ts: &[f64]) -> Array2<f64> {
        let (bsz, d) = xs.dim();
        let mut feats = Array2::zeros((bsz, d + self.time_features));
        for (r, (mut row, x)) in feats.outer_iter_mut().zip(xs.outer_iter()).enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            for (dst, &src) in row[..d].iter_mut().zip(x.iter()) {
                *dst = src;
            }
            self.time_embedding(ts[r], &mut row[d..]);
        }
        feats
    }

    /// Skip gain basis `[φ(t), 1] / sqrt(D)` per batch row.
    fn skip_basis(&self, feats: &Array2<f64>) -> Array2<f64> {
        let (d, f) = (self.data_dim, self.time_features);
        let scale = 1.0 / (d as f64).sqrt();
        let mut basis = Array2::from_elem((feats.nrows(), f + 1), scale);
        basis
            .slice_mut(ndarray::s![.., ..f])
            .zip_mut_with(&feats.slice(ndarray::s![.., d..]), |b, &phi| *b = phi * scale);
        basis
    }

    fn forward_tape(&self, feats: Array2<f64>) -> Tape {
        let d = self.data_dim;
        let basis = self.skip_basis(&feats);
        let gains = basis.dot(&self.skip);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = feats;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&l.w.t());
            z += &l.b;
            inputs.push(h);
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            h = z;
        }
        for ((mut out, feat), &g) in h.outer_iter_mut().zip(inputs[0].outer_iter()).zip(&gains) {
            out.zip_mut_with(&feat.slice(ndarray::s![..d]), |o, &x| *o += g * x);
        }
        Tape { inputs, basis, output: h }
    }

    /// Gradients of `loss = mean_b ‖out_b − target_b‖²` given the tape.
    fn backward(&self, tape: &Tape, target: &Array2<f64>) -> Grads {
        let bsz = target.nrows() as f64;
        let mut delta = (&tape.output - target) * (2.0 / bsz);
        let d = self.data_dim;
        let mut skip = Array1::zeros(self.skip.len());
        for ((drow, feat), psi) in delta.outer_iter().zip(tape.inputs[0].outer_iter()).zip(tape.basis.outer_iter()) {
            let dg = drow.dot(&feat.slice(ndarray::s![..d]));
            skip.scaled_add(dg, &psi);
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &tape.inputs[i];
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            layers.push((gw, gb));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].w);
                // `input` is tanh output of the previous layer.
                back.zip_mut_with(input, |d, &a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        layers.reverse();
        Grads { layers, skip }
    }

    /// Batched forward pass over rows of `xs`.
    pub fn forward_batch(&self, xs: &Array2<f64>, ts: &[f64]) -> Array2<f64> {
        self.forward_tape(self.features(xs, ts)).output
    }

    /// Velocity for one flattened state.
    pub fn forward(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        if x.len() != self.data_dim {
            return Err(Error::shape(format!(
                "net expects {} values, got {}",
                self.data_dim,
                x.len()
            )));
        }
        if !x.is_finite() || !t.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                msg: "non-finite input to velocity net".into(),
            });
        }
        let xs = Array2::from_shape_vec((1, self.data_dim), x.data().to_vec()).expect("length checked");
        let out = self.forward_batch(&xs, &[t]);
        Tensor::new(x.dims().to_vec(), out.into_raw_vec_and_offset().0)
    }

    /// Batch loss and parameter gradient for explicit `(x_t, t, target)`.
    fn loss_and_grads(&self, xt: &Array2<f64>, ts: &[f64], target: &Array2<f64>) -> (f64, Grads) {
        let tape = self.forward_tape(self.features(xt, ts));
        let diff = &tape.output - target;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / target.nrows() as f64;
        let grads = self.backward(&tape, target);
        (loss, grads)
    }

    fn loss_only(&self, xt: &Array2<f64>, ts: &[f64], target: &Array2<f64>) -> f64 {
        let out = self.forward_batch(xt, ts);
        let diff = &out - target;
        diff.iter().map(|v| v * v).sum::<f64>() / target.nrows() as f64
    }

    fn flat_grads(g: &Grads) -> Vec<f64> {
        let mut out = Vec::new();
        for (gw, gb) in &g.layers {
            out.extend(gw.iter());
            out.extend(gb.iter());
        }
        out.extend(g.skip.iter());
        out
    }
}

impl VelocityField for VelocityNet {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.forward(x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: Optimizer::Momentum { beta: 0.9 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::param("steps and batch size must be ≥ 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param(format!(
                "learning rate must be finite and ≥ 0, got {}",
                self.learning_rate
            )));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::param(format!("momentum must lie in [0, 1), got {beta}")));
            }
        }
        Ok(())
    }
}

/// Source of clean training samples `x_0`.
pub trait DataSource {
    /// One flattened sample of `data_dim` values.
    fn sample(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64>;
}

impl<F> DataSource for F
where
    F: FnMut(&mut dyn rand::RngCore) -> Vec<f64>,
{
    fn sample(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self(rng)
    }
}

/// Draws uniformly from a fixed list of samples.
pub struct SliceSource<'a>(pub &'a [Tensor]);

impl DataSource for SliceSource<'_> {
    fn sample(&mut self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let i = rng.gen_range(0..self.0.len());
        self.0[i].data().to_vec()
    }
}

/// Builds `(x_t, t, x_1 − x_0)` for a batch.
fn draw_batch(
    data_dim: usize,
    batch: usize,
    source: &mut dyn DataSource,
    rng: &mut dyn rand::RngCore,
) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>)> {
    let mut xt = Array2::zeros((batch, data_dim));
    let mut target = Array2::zeros((batch, data_dim));
    let mut ts = Vec::with_capacity(batch);
    for b in 0..batch {
        let x0 = source.sample(rng);
        if x0.len() != data_dim {
            return Err(Error::shape(format!(
                "data source produced {} values, net expects {data_dim}",
                x0.len()
            )));
        }
        let t: f64 = rng.gen_range(0.0..1.0);
        ts.push(t);
        for (j, &x0j) in x0.iter().enumerate() {
            let x1: f64 = rng.sample(StandardNormal);
            xt[[b, j]] = (1.0 - t) * x0j + t * x1;
            target[[b, j]] = x1 - x0j;
        }
    }
    Ok((xt, ts, target))
}

/// Trains `net` in place and returns the per-step batch loss.
pub fn train(net: &mut VelocityNet, source: &mut dyn DataSource, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut velocity: Vec<(Array2<f64>, Array1<f64>)> = net
        .layers
        .iter()
        .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.len())))
        .collect();
    let mut skip_velocity = Array1::zeros(net.skip.len());
    let beta = match cfg.optimizer {
        Optimizer::Sgd => 0.0,
        Optimizer::Momentum { beta } => beta,
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (xt, ts, target) = draw_batch(net.data_dim, cfg.batch_size, source, &mut rng)?;
        let (loss, grads) = net.loss_and_grads(&xt, &ts, &target);
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        losses.push(loss);
        for ((layer, (vw, vb)), (gw, gb)) in net.layers.iter_mut().zip(&mut velocity).zip(&grads.layers) {
            vw.zip_mut_with(gw, |v, &g| *v = beta * *v + g);
            vb.zip_mut_with(gb, |v, &g| *v = beta * *v + g);
            layer.w.scaled_add(-cfg.learning_rate, vw);
            layer.b.scaled_add(-cfg.learning_rate, vb);
        }
        skip_velocity.zip_mut_with(&grads.skip, |v, &g| *v = beta * *v + g);
        net.skip.scaled_add(-cfg.learning_rate, &skip_velocity);
    }
    Ok(losses)
}

/// Compares backprop gradients of the batch regression loss against central
/// finite differences (step `1e-5`) on `n_params` randomly chosen
/// parameters. `x0` holds one flattened sample per row; the noise draws are
/// fixed by `seed`. Returns the largest relative error
/// `|g − g_fd| / max(|g|, |g_fd|, 1e-8)`.
pub fn grad_check(net: &VelocityNet, x0: &[Vec<f64>], t: f64, seed: u64, n_params: usize) -> Result<f64> {
    let d = net.data_dim;
    let mut rng = rng_from_seed(seed);
    let bsz = x0.len();
    let mut xt = Array2::zeros((bsz, d));
    let mut target = Array2::zeros((bsz, d));
    for (b, row) in x0.iter().enumerate() {
        if row.len() != d {
            return Err(Error::shape("grad_check sample has the wrong length"));
        }
        for (j, &v) in row.iter().enumerate() {
            let x1: f64 = rng.sample(StandardNormal);
            xt[[b, j]] = (1.0 - t) * v + t * x1;
            target[[b, j]] = x1 - v;
        }
    }
    let ts = vec![t; bsz];
    let (_, grads) = net.loss_and_grads(&xt, &ts, &target);
    let analytic = VelocityNet::flat_grads(&grads);
    let base = net.params();
    let mut probe = net.clone();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..n_params {
        let k = rng.gen_range(0..base.len());
        let mut p = base.clone();
        p[k] = base[k] + h;
        probe.set_params(&p)?;
        let up = probe.loss_only(&xt, &ts, &target);
        p[k] = base[k] - h;
        probe.set_params(&p)?;
        let down = probe.loss_only(&xt, &ts, &target);
        let fd = (up - down) / (2.0 * h);
        let a = analytic[k];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Mean of `losses` over consecutive windows of `window` steps.
pub fn windowed_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_mass(mu: [f64; 2]) -> impl FnMut(&mut dyn rand::RngCore) -> Vec<f64> {
        move |_rng: &mut dyn rand::RngCore| mu.to_vec()
    }

    #[test]
    fn init_is_seeded() {
        let a = VelocityNet::new(2, &[64, 64], 8, 7).unwrap();
        let b = VelocityNet::new(2, &[64, 64], 8, 7).unwrap();
        let c = VelocityNet::new(2, &[64, 64], 8, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        assert_eq!(a.widths(), vec![10, 64, 64, 2]);
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(VelocityNet::new(2, &[], 8, 0).is_err());
        assert!(VelocityNet::new(2, &[4], 3, 0).is_err());
        assert!(VelocityNet::new(0, &[4], 2, 0).is_err());
    }

    #[test]
    fn forward_is_pure_and_finite() {
        let net = VelocityNet::new(3, &[16], 4, 1).unwrap();
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let a = net.forward(&x, 0.4).unwrap();
        let b = net.forward(&x, 0.4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), x.dims());
        assert!(a.is_finite());
        assert!(net.forward(&Tensor::from_vec(vec![f64::NAN, 0.0, 0.0]), 0.1).is_err());
        assert!(net.forward(&Tensor::from_vec(vec![0.0; 2]), 0.1).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let net = VelocityNet::new(2, &[8, 8], 4, 3).unwrap();
        let xs = Array2::from_shape_vec((2, 2), vec![0.1, 0.2, -0.5, 0.9]).unwrap();
        let out = net.forward_batch(&xs, &[0.2, 0.7]);
        let single = net.forward(&Tensor::from_vec(vec![-0.5, 0.9]), 0.7).unwrap();
        assert!((out[[1, 0]] - single.data()[0]).abs() < 1e-14);
        assert!((out[[1, 1]] - single.data()[1]).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = VelocityNet::new(3, &[12, 10], 6, 5).unwrap();
        let x0 = vec![vec![0.2, -0.4, 1.0], vec![-1.1, 0.3, 0.5], vec![0.0, 0.8, -0.2]];
        let err = grad_check(&net, &x0, 0.35, 9, 60).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
        assert_eq!(err, grad_check(&net, &x0, 0.35, 9, 60).unwrap());
    }

    #[test]
    fn zero_batch_output_bias_gradient_follows_chain_rule() {
        // Zero state and zero target: dL/db_out = 2·mean(out), with out the
        // network output at x = 0.
        let net = VelocityNet::new(2, &[5], 2, 4).unwrap();
        let xt = Array2::zeros((1, 2));
        let target = Array2::zeros((1, 2));
        let (_, grads) = net.loss_and_grads(&xt, &[0.5], &target);
        let out = net.forward_batch(&xt, &[0.5]);
        let gb = &grads.layers.last().unwrap().1;
        for j in 0..2 {
            assert!((gb[j] - 2.0 * out[[0, j]]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut net = VelocityNet::new(2, &[8], 4, 0).unwrap();
        let before = net.clone();
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 8,
            learning_rate: 0.0,
            seed: 1,
            optimizer: Optimizer::Sgd,
        };
        let curve_a = train(&mut net, &mut point_mass([1.0, -1.0]), &cfg).unwrap();
        assert_eq!(net, before);
        let curve_b = train(&mut net, &mut point_mass([1.0, -1.0]), &cfg).unwrap();
        assert_eq!(curve_a, curve_b);
    }

    #[test]
    fn zero_learning_rate_constant_on_fixed_batch() {
        let mut net = VelocityNet::new(2, &[8], 4, 0).unwrap();
        let xt = Array2::from_shape_vec((1, 2), vec![0.4, 0.1]).unwrap();
        let target = Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
        let l0 = net.loss_only(&xt, &[0.3], &target);
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 4,
            learning_rate: 0.0,
            seed: 0,
            optimizer: Optimizer::Momentum { beta: 0.9 },
        };
        train(&mut net, &mut point_mass([0.0, 0.0]), &cfg).unwrap();
        assert_eq!(net.loss_only(&xt, &[0.3], &target), l0);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 16,
            learning_rate: 1e-2,
            seed: 3,
            optimizer: Optimizer::Momentum { beta: 0.9 },
        };
        let mut a = VelocityNet::new(2, &[16], 4, 0).unwrap();
        let mut b = a.clone();
        let la = train(&mut a, &mut point_mass([1.0, 2.0]), &cfg).unwrap();
        let lb = train(&mut b, &mut point_mass([1.0, 2.0]), &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e6,
            seed: 0,
            optimizer: Optimizer::Sgd,
        };
        let mut net = VelocityNet::new(2, &[8], 2, 0).unwrap();
        let err = train(&mut net, &mut point_mass([100.0, -100.0]), &cfg).unwrap_err();
        assert!(matches!(err, Error::Training { .. }));
    }

    #[test]
    fn params_round_trip() {
        let net = VelocityNet::new(3, &[5, 4], 2, 2).unwrap();
        let back = VelocityNet::from_parts(&net.widths(), 2, &net.params()).unwrap();
        assert_eq!(back, net);
        assert!(VelocityNet::from_parts(&[5, 4, 3], 4, &net.params()).is_err());
    }
}
