//! Experiment runners behind the CLI subcommands.
//!
//! Random streams: item `i` draws its measurement noise from stream `i` of
//! `derive_seed(seed, MEASUREMENT_STREAM)` and its sampler noise from stream
//! `i` of `derive_seed(seed, SAMPLER_STREAM)`. Items can therefore run in
//! any order or in parallel without changing any output.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{DatasetSpec, ExperimentConfig, FlowSpec, Method};
use super::dataset::{gen_shape_dataset, render_shape_image};
use super::io::{read_fst, read_ppm, write_fst, write_ppm};
use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::flow::{euler_generate, euler_invert, GmmTarget, VelocityField};
use crate::metrics::{fmt_sig6, MetricReport, SsimParams};
use crate::net::{train, windowed_means, VelocityNet};
use crate::operators::{DegradationOperator, OperatorKind};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::samplers::{
    restore_ddnm, restore_flowsteer, restore_ideal_flow, AnalyticDenoiser, ProjectionMode, RestorationTask, Trace,
};
use crate::schedules::{ddpm_linear_for_steps, fraction_to_step, rect_schedule, LambdaSchedule};
use crate::tensor::Tensor;

const MEASUREMENT_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;
const ORACLE_STREAM: u64 = 3;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "FLOWSTEER_THREADS";

/// Velocity field used by the runners.
#[derive(Debug, Clone)]
pub enum FlowModel {
    Oracle(GmmTarget),
    Net(VelocityNet),
}

impl VelocityField for FlowModel {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        match self {
            FlowModel::Oracle(g) => g.velocity(x, t),
            FlowModel::Net(n) => n.forward(x, t),
        }
    }
}

/// A pixel-space field seen through an orthonormal codec: `E ∘ v ∘ D`.
pub struct LatentField<'a, V: ?Sized> {
    pub field: &'a V,
    pub codec: &'a LatentCodec,
}

impl<V: VelocityField + ?Sized> VelocityField for LatentField<'_, V> {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let x = self.codec.decode(z)?;
        self.codec.encode(&self.field.velocity(&x, t)?)
    }
}

pub fn measurement_rng(seed: u64, index: usize) -> StreamRng {
    stream(derive_seed(seed, MEASUREMENT_STREAM), index as u64)
}

pub fn sampler_rng(seed: u64, index: usize) -> StreamRng {
    stream(derive_seed(seed, SAMPLER_STREAM), index as u64)
}

/// Worker pool sized by [`THREADS_ENV`] when set, else by rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}

/// Maps `f` over `0..n` on the worker pool, keeping index order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    thread_pool()?.install(|| (0..n).into_par_iter().map(f).collect())
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<Tensor>> {
    match &cfg.dataset {
        DatasetSpec::Shapes { count, size, seed } => gen_shape_dataset(*count, *size, *seed),
        DatasetSpec::Gmm { count, seed, .. } => {
            let gmm = cfg.dataset.gmm()?.expect("gmm dataset");
            Ok((0..*count).map(|i| gmm.sample(&mut stream(*seed, i as u64))).collect())
        }
    }
}

/// Net checkpoint as a flat FST vector
/// `[F, L + 1, width_0, …, width_L, params…]`.
pub fn save_net(path: impl AsRef<Path>, net: &VelocityNet) -> Result<()> {
    let widths = net.widths();
    let mut flat = vec![net.time_features() as f64, widths.len() as f64];
    flat.extend(widths.iter().map(|&w| w as f64));
    flat.extend(net.params());
    write_fst(path, &Tensor::from_vec(flat))
}

pub fn load_net(path: impl AsRef<Path>) -> Result<VelocityNet> {
    let t = read_fst(path)?;
    let bad = |msg: &str| Error::Format {
        offset: 9,
        msg: format!("not a velocity-net checkpoint: {msg}"),
    };
    let d = t.data();
    if t.dims().len() != 1 || d.len() < 2 {
        return Err(bad("expected a flat vector"));
    }
    let f = d[0] as usize;
    let n_widths = d[1] as usize;
    if d.len() < 2 + n_widths {
        return Err(bad("truncated widths"));
    }
    let widths: Vec<usize> = d[2..2 + n_widths].iter().map(|&w| w as usize).collect();
    VelocityNet::from_parts(&widths, f, &d[2 + n_widths..]).map_err(|e| bad(&e.to_string()))
}

pub fn build_flow(cfg: &ExperimentConfig) -> Result<FlowModel> {
    match &cfg.flow {
        FlowSpec::Net { checkpoint } => Ok(FlowModel::Net(load_net(cfg.output_path(checkpoint))?)),
        FlowSpec::Oracle { stdev, components } => match &cfg.dataset {
            DatasetSpec::Gmm { .. } => Ok(FlowModel::Oracle(cfg.dataset.gmm()?.expect("gmm dataset"))),
            DatasetSpec::Shapes { size, seed, .. } => {
                let means = gen_shape_dataset(*components, *size, derive_seed(*seed, ORACLE_STREAM))?;
                let w = 1.0 / *components as f64;
                Ok(FlowModel::Oracle(GmmTarget::new(
                    vec![w; *components],
                    means,
                    vec![*stdev; *components],
                )?))
            }
        },
    }
}

/// `y = A x`, plus `N(0, σ_g²)` for the denoising operator.
pub fn synthesize_measurement<R: rand::Rng + ?Sized>(
    op: &DegradationOperator,
    x: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let mut y = op.apply(x)?;
    if let OperatorKind::Denoise { noise_sigma } = op.kind() {
        if *noise_sigma > 0.0 {
            let noise = Tensor::randn(y.dims(), rng);
            y.axpy(*noise_sigma, &noise)?;
        }
    }
    Ok(y)
}

pub fn measurements(cfg: &ExperimentConfig, op: &DegradationOperator, images: &[Tensor]) -> Result<Vec<Tensor>> {
    images
        .iter()
        .enumerate()
        .map(|(i, x)| synthesize_measurement(op, x, &mut measurement_rng(cfg.seed, i)))
        .collect()
}

/// Output of one restoration.
#[derive(Debug, Clone)]
pub struct ItemResult {
    pub index: usize,
    pub restored: Tensor,
    pub trace: Option<Trace>,
    pub report: MetricReport,
}

/// Everything a batch of restorations shares.
pub struct RestoreContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub flow: &'a FlowModel,
    pub op: &'a DegradationOperator,
    pub images: &'a [Tensor],
    pub measurements: &'a [Tensor],
}

impl RestoreContext<'_> {
    /// Restores item `index` with `method`, `schedule` and `projection`,
    /// drawing sampler noise from `sampler_seed`.
    pub fn restore_item(
        &self,
        index: usize,
        method: Method,
        schedule: &LambdaSchedule,
        schedule_label: &str,
        projection: ProjectionMode,
        sampler_seed: u64,
    ) -> Result<ItemResult> {
        let cfg = self.cfg;
        let truth = &self.images[index];
        let y = &self.measurements[index];
        let task = RestorationTask::new(self.op.clone(), y.clone())?
            .with_ground_truth(truth.clone())?
            .with_seed(sampler_seed);
        let mut rng = sampler_rng(sampler_seed, index);
        let (restored, trace) = match method {
            Method::Flowsteer => {
                let mut fs = cfg.flowsteer(schedule.clone())?;
                fs.projection_mode = projection;
                let field = LatentField {
                    field: self.flow,
                    codec: &fs.codec,
                };
                let (x, trace) = restore_flowsteer(&field, &task, &fs, &mut rng)?;
                (x, Some(trace))
            }
            Method::Pinv => (self.op.apply_pinv(y)?, None),
            Method::IdealFlow => (restore_ideal_flow(self.flow, &task, &cfg.grid()?, cfg.eps, false, &mut rng)?, None),
            Method::Ddnm => {
                let prior = match self.flow {
                    FlowModel::Oracle(g) => g.clone(),
                    FlowModel::Net(_) => return Err(Error::config("method ddnm needs an oracle flow")),
                };
                let sigma_y = match self.op.kind() {
                    OperatorKind::Denoise { noise_sigma } => *noise_sigma,
                    _ => 0.0,
                };
                let sched = ddpm_linear_for_steps(cfg.ddnm.steps, sigma_y)?;
                let x = restore_ddnm(&AnalyticDenoiser::new(prior), &task, &sched, cfg.ddnm.noise_robust, &mut rng)?;
                (x, None)
            }
        };
        let report = MetricReport::evaluate(
            cfg.task.name(),
            schedule_label,
            sampler_seed,
            self.op,
            &restored,
            truth,
            y,
            SsimParams::default(),
        )?;
        Ok(ItemResult {
            index,
            restored,
            trace,
            report,
        })
    }

    /// Restores every item on the worker pool.
    pub fn restore_all(
        &self,
        method: Method,
        schedule: &LambdaSchedule,
        schedule_label: &str,
        projection: ProjectionMode,
        sampler_seed: u64,
    ) -> Result<Vec<ItemResult>> {
        par_map(self.images.len(), |i| {
            self.restore_item(i, method, schedule, schedule_label, projection, sampler_seed)
        })
    }

    /// Mean scores over all items and `seeds`.
    pub fn score(
        &self,
        method: Method,
        schedule: &LambdaSchedule,
        projection: ProjectionMode,
        seeds: &[u64],
    ) -> Result<CellScore> {
        let mut reports = Vec::new();
        for &s in seeds {
            for r in self.restore_all(method, schedule, "", projection, s)? {
                reports.push(r.report);
            }
        }
        Ok(CellScore::mean_of(&reports))
    }
}

/// Averages over a set of restorations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellScore {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub residual_l2: f64,
    pub runs: usize,
}

impl CellScore {
    pub fn mean_of(reports: &[MetricReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            mse: avg(|r| r.mse),
            residual_l2: avg(|r| r.residual_l2),
            runs: reports.len(),
        }
    }
}

/// Rectangular window of height `h` over `[start, start + width]·N`.
pub fn window_schedule(n_steps: usize, start: f64, width: f64, h: f64) -> Result<LambdaSchedule> {
    let a = fraction_to_step(start, n_steps);
    let b = fraction_to_step((start + width).min(1.0), n_steps).max(a);
    rect_schedule(n_steps, a, b, h)
}

fn item_name(prefix: &str, index: usize, ext: &str) -> String {
    format!("{prefix}_{index:04}.{ext}")
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Writes a PPM when the tensor is a 1- or 3-channel image.
fn maybe_write_ppm(path: &Path, t: &Tensor) -> Result<bool> {
    match t.dims() {
        [1 | 3, _, _] => {
            write_ppm(path, t)?;
            Ok(true)
        }
        _ => Ok(false),
    }
}

/// Files written by a subcommand.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
}

impl RunOutput {
    fn push(&mut self, p: PathBuf) {
        self.files.push(p);
    }
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate(false)?;
    let images = load_dataset(cfg)?;
    let dir = cfg.output_path("data");
    ensure_dir(&dir)?;
    let mut out = RunOutput::default();
    for (i, im) in images.iter().enumerate() {
        let p = dir.join(item_name("img", i, "ppm"));
        if maybe_write_ppm(&p, im)? {
            out.push(p);
        }
        let p = dir.join(item_name("img", i, "fst"));
        write_fst(&p, im)?;
        out.push(p);
    }
    Ok(out)
}

/// Trains a velocity net on fresh samples from the dataset distribution.
pub fn train_flow_net(cfg: &ExperimentConfig) -> Result<(VelocityNet, Vec<f64>)> {
    let dims = cfg.dataset.image_dims();
    let dim: usize = dims.iter().product();
    let spec = &cfg.train;
    let mut net = VelocityNet::new(dim, &spec.hidden, spec.time_features, spec.seed)?;
    let losses = match &cfg.dataset {
        DatasetSpec::Shapes { size, .. } => {
            let size = *size;
            let mut source = move |rng: &mut dyn rand::RngCore| {
                render_shape_image(size, rng).expect("size validated").into_data()
            };
            train(&mut net, &mut source, &spec.train_config())?
        }
        DatasetSpec::Gmm { .. } => {
            let gmm = cfg.dataset.gmm()?.expect("gmm dataset");
            let mut source = move |rng: &mut dyn rand::RngCore| gmm.sample(rng).into_data();
            train(&mut net, &mut source, &spec.train_config())?
        }
    };
    Ok((net, losses))
}

pub fn train_flow(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate(false)?;
    let (net, losses) = train_flow_net(cfg)?;
    let ckpt = cfg.checkpoint_path();
    if let Some(parent) = ckpt.parent() {
        ensure_dir(parent)?;
    }
    save_net(&ckpt, &net)?;
    ensure_dir(&cfg.output_dir)?;
    let window = (losses.len() / 100).max(1);
    let loss_path = cfg.output_path("train_loss.csv");
    write_lines(
        &loss_path,
        "window_end,mean_loss",
        windowed_means(&losses, window)
            .iter()
            .enumerate()
            .map(|(j, m)| format!("{},{}", (j + 1) * window, fmt_sig6(*m))),
    )?;
    Ok(RunOutput {
        files: vec![ckpt, loss_path],
    })
}

pub fn degrade(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate(false)?;
    let images = load_dataset(cfg)?;
    let op = cfg.operator()?;
    let ys = measurements(cfg, &op, &images)?;
    let dir = cfg.output_path("degrade");
    ensure_dir(&dir)?;
    let mut out = RunOutput::default();
    let mut rows = Vec::new();
    for (i, (x, y)) in images.iter().zip(&ys).enumerate() {
        let p = dir.join(item_name("y", i, "fst"));
        write_fst(&p, y)?;
        out.push(p);
        let p = dir.join(item_name("y", i, "ppm"));
        if maybe_write_ppm(&p, y)? {
            out.push(p);
        }
        let noise = y.sub(&op.apply(x)?)?;
        let mean = noise.mean();
        let sd = (noise.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / noise.len() as f64).sqrt();
        rows.push(format!("{i},{},{}", fmt_sig6(mean), fmt_sig6(sd)));
    }
    let p = dir.join("noise.csv");
    write_lines(&p, "item,noise_mean,noise_std", rows)?;
    out.push(p);
    Ok(out)
}

const TRACE_HEADER: &str = "item,step,t,lambda,conditioned,residual_l2,residual_linf,psnr";

fn trace_rows(index: usize, trace: &Trace) -> impl Iterator<Item = String> + '_ {
    trace.steps.iter().map(move |s| {
        format!(
            "{index},{},{},{},{},{},{},{}",
            s.step,
            fmt_sig6(s.t),
            fmt_sig6(s.lambda),
            s.conditioned,
            fmt_sig6(s.residual_l2),
            fmt_sig6(s.residual_linf),
            s.psnr.map(fmt_sig6).unwrap_or_default()
        )
    })
}

pub fn restore(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate(true)?;
    let images = load_dataset(cfg)?;
    let op = cfg.operator()?;
    let ys = measurements(cfg, &op, &images)?;
    let flow = build_flow(cfg)?;
    let schedule = cfg.schedule.build(cfg.steps)?;
    let ctx = RestoreContext {
        cfg,
        flow: &flow,
        op: &op,
        images: &images,
        measurements: &ys,
    };
    let label = cfg.schedule.label();
    let results = ctx.restore_all(cfg.method, &schedule, &label, cfg.projection_mode, cfg.seed)?;

    let dir = cfg.output_path("restore");
    ensure_dir(&dir)?;
    let mut out = RunOutput::default();
    for r in &results {
        let p = dir.join(item_name("x", r.index, "fst"));
        write_fst(&p, &r.restored)?;
        out.push(p);
        let p = dir.join(item_name("x", r.index, "ppm"));
        if maybe_write_ppm(&p, &r.restored)? {
            out.push(p);
        }
    }
    let p = dir.join("trace.csv");
    write_lines(
        &p,
        TRACE_HEADER,
        results
            .iter()
            .filter_map(|r| r.trace.as_ref().map(|t| trace_rows(r.index, t).collect::<Vec<_>>()))
            .flatten(),
    )?;
    out.push(p);
    let p = dir.join("metrics.csv");
    write_lines(
        &p,
        &format!("item,{}", MetricReport::CSV_HEADER),
        results.iter().map(|r| format!("{},{}", r.index, r.report.csv_row())),
    )?;
    out.push(p);
    Ok(out)
}

pub fn invert(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate(true)?;
    let images = load_dataset(cfg)?;
    let flow = build_flow(cfg)?;
    let grid = cfg.grid()?;
    let codec = cfg.codec()?;
    let field = LatentField {
        field: &flow,
        codec: &codec,
    };
    let dir = cfg.output_path("invert");
    ensure_dir(&dir)?;
    let rows = par_map(images.len(), |i| {
        let z0 = codec.encode(&images[i])?;
        let path = euler_invert(&field, &z0, &grid)?;
        let z1 = path.last().expect("non-empty path").clone();
        let back = euler_generate(&field, &z1, &grid)?;
        let recon = codec.decode(back.last().expect("non-empty path"))?;
        let err = crate::metrics::mse(&recon, &images[i])?;
        let mean = z1.mean();
        let sd = (z1.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z1.len() as f64).sqrt();
        Ok((z1, format!("{i},{},{},{}", fmt_sig6(mean), fmt_sig6(sd), fmt_sig6(err))))
    })?;
    let mut out = RunOutput::default();
    let mut lines = Vec::new();
    for (i, (z, row)) in rows.into_iter().enumerate() {
        let p = dir.join(item_name("z", i, "fst"));
        write_fst(&p, &z)?;
        out.push(p);
        lines.push(row);
    }
    let p = dir.join("invert.csv");
    write_lines(&p, "item,latent_mean,latent_std,reconstruction_mse", lines)?;
    out.push(p);
    Ok(out)
}

/// Scores previously written restorations (`x_NNNN.fst`, falling back to
/// `x_NNNN.ppm`) against the dataset.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate(false)?;
    let images = load_dataset(cfg)?;
    let op = cfg.operator()?;
    let ys = measurements(cfg, &op, &images)?;
    let src = cfg.eval_dir.clone().unwrap_or_else(|| cfg.output_path("restore"));
    let mut rows = Vec::new();
    for (i, (truth, y)) in images.iter().zip(&ys).enumerate() {
        let fst = src.join(item_name("x", i, "fst"));
        let ppm = src.join(item_name("x", i, "ppm"));
        let x = if fst.is_file() {
            read_fst(&fst)?
        } else if ppm.is_file() {
            read_ppm(&ppm)?
        } else {
            return Err(Error::config(format!("no restoration for item {i} in {}", src.display())));
        };
        let rep = MetricReport::evaluate(
            cfg.task.name(),
            &cfg.schedule.label(),
            cfg.seed,
            &op,
            &x,
            truth,
            y,
            SsimParams::default(),
        )?;
        rows.push(format!("{i},{}", rep.csv_row()));
    }
    let dir = cfg.output_path("evaluate");
    ensure_dir(&dir)?;
    let p = dir.join("metrics.csv");
    write_lines(&p, &format!("item,{}", MetricReport::CSV_HEADER), rows)?;
    Ok(RunOutput { files: vec![p] })
}

const CELL_HEADER: &str = "label,i_start,i_stop,runs,psnr,ssim,mse,residual_l2";

fn cell_row(label: &str, window: Option<(usize, usize)>, s: &CellScore) -> String {
    let (a, b) = window.map(|(a, b)| (a.to_string(), b.to_string())).unwrap_or_default();
    format!(
        "{label},{a},{b},{},{},{},{},{}",
        s.runs,
        fmt_sig6(s.psnr),
        fmt_sig6(s.ssim),
        fmt_sig6(s.mse),
        fmt_sig6(s.residual_l2)
    )
}

/// Sweeps rectangular windows over `ablation.starts`, plus the `λ ≡ 0` and
/// `λ ≡ 1` references.
pub fn ablate_schedule(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate(true)?;
    let images = load_dataset(cfg)?;
    let op = cfg.operator()?;
    let ys = measurements(cfg, &op, &images)?;
    let flow = build_flow(cfg)?;
    let ctx = RestoreContext {
        cfg,
        flow: &flow,
        op: &op,
        images: &images,
        measurements: &ys,
    };
    let n = cfg.steps;
    let ab = &cfg.ablation;
    let mut rows = Vec::new();
    for &start in &ab.starts {
        let sched = window_schedule(n, start, ab.width, ab.height)?;
        let active: Vec<usize> = (1..=n).filter(|&k| sched.at_step(k) > 0.0).collect();
        let score = ctx.score(Method::Flowsteer, &sched, cfg.projection_mode, &ab.seeds)?;
        rows.push(cell_row(
            &format!("window_{}", fmt_sig6(start)),
            Some((active[0], *active.last().expect("non-empty window"))),
            &score,
        ));
    }
    for (label, sched) in [
        ("none", LambdaSchedule::zeros(n)?),
        ("always", rect_schedule(n, 1, n, 1.0)?),
    ] {
        let score = ctx.score(Method::Flowsteer, &sched, cfg.projection_mode, &ab.seeds)?;
        rows.push(cell_row(label, None, &score));
    }
    let dir = cfg.output_path("ablate");
    ensure_dir(&dir)?;
    let p = dir.join("schedule.csv");
    write_lines(&p, CELL_HEADER, rows)?;
    Ok(RunOutput { files: vec![p] })
}

/// Direct versus clean-estimate projection with the configured schedule.
pub fn ablate_projection(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate(true)?;
    let images = load_dataset(cfg)?;
    let op = cfg.operator()?;
    let ys = measurements(cfg, &op, &images)?;
    let flow = build_flow(cfg)?;
    let ctx = RestoreContext {
        cfg,
        flow: &flow,
        op: &op,
        images: &images,
        measurements: &ys,
    };
    let sched = cfg.schedule.build(cfg.steps)?;
    let mut rows = Vec::new();
    for (label, mode) in [("direct", ProjectionMode::Direct), ("via_x0", ProjectionMode::ViaX0)] {
        let score = ctx.score(Method::Flowsteer, &sched, mode, &cfg.ablation.seeds)?;
        rows.push(cell_row(label, None, &score));
    }
    let dir = cfg.output_path("ablate");
    ensure_dir(&dir)?;
    let p = dir.join("projection.csv");
    write_lines(&p, CELL_HEADER, rows)?;
    Ok(RunOutput { files: vec![p] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn net_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = VelocityNet::new(6, &[5, 4], 4, 3).unwrap();
        let p = dir.path().join("n.fst");
        save_net(&p, &net).unwrap();
        let back = load_net(&p).unwrap();
        assert_eq!(back.widths(), net.widths());
        assert_eq!(back.time_features(), 4);
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(*a, b as f32 as f64);
        }
        write_fst(&p, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(load_net(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn window_schedule_layout() {
        let early = window_schedule(30, 0.0, 0.4, 1.0).unwrap();
        let mid = window_schedule(30, 0.5, 0.4, 1.0).unwrap();
        let late = window_schedule(30, 0.9, 0.4, 1.0).unwrap();
        let active = |s: &LambdaSchedule| (1..=30).filter(|&k| s.at_step(k) > 0.0).collect::<Vec<_>>();
        assert_eq!(active(&early), (1..=12).collect::<Vec<_>>());
        assert_eq!(active(&mid), (15..=27).collect::<Vec<_>>());
        assert_eq!(active(&late), (27..=30).collect::<Vec<_>>());
    }

    #[test]
    fn latent_field_matches_pixel_field() {
        let codec = LatentCodec::new(crate::codec::CodecKind::HaarPatch2x2, &[1, 2, 2]).unwrap();
        let g = GmmTarget::single(Tensor::full(&[1, 2, 2], 0.3), 0.5).unwrap();
        let field = LatentField { field: &g, codec: &codec };
        let x = Tensor::new(vec![1, 2, 2], vec![0.1, -0.4, 0.9, 0.2]).unwrap();
        let z = codec.encode(&x).unwrap();
        let vz = field.velocity(&z, 0.4).unwrap();
        let vx = g.velocity(&x, 0.4).unwrap();
        assert!(codec.decode(&vz).unwrap().max_abs_diff(&vx).unwrap() < 1e-12);
    }

    #[test]
    fn pinv_baseline_is_exact_for_superres_range() {
        let cfg = ExperimentConfig::preset("superres").unwrap();
        let images = load_dataset(&cfg).unwrap();
        let op = cfg.operator().unwrap();
        let ys = measurements(&cfg, &op, &images).unwrap();
        let flow = FlowModel::Oracle(GmmTarget::single(Tensor::zeros(&[3, 16, 16]), 1.0).unwrap());
        let ctx = RestoreContext {
            cfg: &cfg,
            flow: &flow,
            op: &op,
            images: &images,
            measurements: &ys,
        };
        let sched = LambdaSchedule::zeros(30).unwrap();
        let r = ctx
            .restore_item(0, Method::Pinv, &sched, "pinv", ProjectionMode::Direct, 0)
            .unwrap();
        assert!(r.report.residual_linf < 1e-12);
        assert!(r.trace.is_none());
    }
}
