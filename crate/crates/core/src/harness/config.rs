//! JSON experiment configuration.
//!
//! Every field has a default, so `{}` is a valid config. Values can be
//! overridden from the command line with dotted `key=value` pairs, e.g.
//! `dataset.count=4` or `schedule="deblur"`; the value is parsed as JSON and
//! falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::{CodecKind, LatentCodec};
use crate::error::{Error, Result};
use crate::flow::{GmmTarget, TimeGrid};
use crate::net::TrainConfig;
use crate::operators::{default_kernel_size, make_gaussian_kernel, DegradationOperator};
use crate::samplers::{FlowSteerConfig, ProjectionMode, DEFAULT_EPS};
use crate::schedules::{LambdaSchedule, SchedulePreset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Colorization,
    Deblur,
    Superres,
    Denoise,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Colorization => "colorization",
            TaskKind::Deblur => "deblur",
            TaskKind::Superres => "superres",
            TaskKind::Denoise => "denoise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorParams {
    /// Gaussian blur width in pixels.
    pub blur_sigma: f64,
    /// Odd kernel side; `None` picks the largest odd size up to `6σ + 1`
    /// that fits the image.
    pub blur_kernel_size: Option<usize>,
    pub wiener_lambda: f64,
    /// Measurement noise for the denoising task.
    pub noise_sigma: f64,
}

impl Default for OperatorParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            blur_kernel_size: None,
            wiener_lambda: 0.1,
            noise_sigma: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Shapes {
        count: usize,
        size: usize,
        seed: u64,
    },
    Gmm {
        count: usize,
        seed: u64,
        dims: Vec<usize>,
        weights: Vec<f64>,
        /// One flattened mean per component.
        means: Vec<Vec<f64>>,
        stdevs: Vec<f64>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Shapes {
            count: 20,
            size: 16,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn count(&self) -> usize {
        match self {
            DatasetSpec::Shapes { count, .. } | DatasetSpec::Gmm { count, .. } => *count,
        }
    }

    pub fn image_dims(&self) -> Vec<usize> {
        match self {
            DatasetSpec::Shapes { size, .. } => vec![3, *size, *size],
            DatasetSpec::Gmm { dims, .. } => dims.clone(),
        }
    }

    /// The mixture of a `gmm` dataset.
    pub fn gmm(&self) -> Result<Option<GmmTarget>> {
        match self {
            DatasetSpec::Shapes { .. } => Ok(None),
            DatasetSpec::Gmm {
                dims,
                weights,
                means,
                stdevs,
                ..
            } => {
                let means = means
                    .iter()
                    .map(|m| Tensor::new(dims.clone(), m.clone()))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::config(format!("dataset.means: {e}")))?;
                GmmTarget::new(weights.clone(), means, stdevs.clone())
                    .map(Some)
                    .map_err(|e| Error::config(format!("dataset: {e}")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowSpec {
    /// Closed-form velocity. For a `gmm` dataset this is the dataset's own
    /// mixture; for shape images it is an isotropic mixture of `stdev` placed
    /// on `components` images drawn from a seed disjoint from the dataset.
    Oracle { stdev: f64, components: usize },
    /// A trained network checkpoint.
    Net { checkpoint: PathBuf },
}

impl Default for FlowSpec {
    fn default() -> Self {
        FlowSpec::Oracle {
            stdev: 0.05,
            components: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Where `train-flow` writes the checkpoint, relative to `output_dir`
    /// unless absolute.
    pub checkpoint: PathBuf,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            time_features: 16,
            steps: 20_000,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
            checkpoint: PathBuf::from("flow.fst"),
        }
    }
}

impl TrainSpec {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            optimizer: if self.momentum > 0.0 {
                crate::net::Optimizer::Momentum { beta: self.momentum }
            } else {
                crate::net::Optimizer::Sgd
            },
        }
    }
}

/// A preset name or explicit per-step values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Preset(String),
    Values(Vec<f64>),
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Preset("general".into())
    }
}

impl ScheduleSpec {
    pub fn label(&self) -> String {
        match self {
            ScheduleSpec::Preset(name) => name.clone(),
            ScheduleSpec::Values(_) => "custom".into(),
        }
    }

    pub fn build(&self, n_steps: usize) -> Result<LambdaSchedule> {
        match self {
            ScheduleSpec::Preset(name) => SchedulePreset::from_name(name)?.build(n_steps),
            ScheduleSpec::Values(v) => {
                if v.len() != n_steps {
                    return Err(Error::config(format!(
                        "schedule has {} values but steps = {n_steps}",
                        v.len()
                    )));
                }
                LambdaSchedule::new(v.clone()).map_err(|e| Error::config(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Flowsteer,
    /// `A†y` with no generative prior.
    Pinv,
    IdealFlow,
    /// Diffusion baseline; needs an oracle flow over a `gmm` dataset.
    Ddnm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdnmSpec {
    pub steps: usize,
    pub noise_robust: bool,
}

impl Default for DdnmSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            noise_robust: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    /// Window starts as fractions of `N`.
    pub starts: Vec<f64>,
    /// Window length as a fraction of `N`.
    pub width: f64,
    pub height: f64,
    /// Sampler seeds; each cell averages over all items and seeds.
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            starts: (0..10).map(|i| i as f64 / 10.0).collect(),
            width: 0.4,
            height: 1.0,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub operator: OperatorParams,
    pub dataset: DatasetSpec,
    pub flow: FlowSpec,
    pub train: TrainSpec,
    pub method: Method,
    /// Number of reconstruction steps `N`.
    pub steps: usize,
    pub schedule: ScheduleSpec,
    pub codec: CodecKind,
    pub decode_noise: f64,
    pub eta_eff: f64,
    pub projection_mode: ProjectionMode,
    pub eps: f64,
    pub ddnm: DdnmSpec,
    pub ablation: AblationSpec,
    /// Directory of restored PPMs scored by `evaluate`; defaults to
    /// `<output_dir>/restore`.
    pub eval_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Superres,
            operator: OperatorParams::default(),
            dataset: DatasetSpec::default(),
            flow: FlowSpec::default(),
            train: TrainSpec::default(),
            method: Method::Flowsteer,
            steps: 30,
            schedule: ScheduleSpec::default(),
            codec: CodecKind::Identity,
            decode_noise: 0.0,
            eta_eff: 0.0,
            projection_mode: ProjectionMode::Direct,
            eps: DEFAULT_EPS,
            ddnm: DdnmSpec::default(),
            ablation: AblationSpec::default(),
            eval_dir: None,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

pub const PRESET_NAMES: [&str; 6] = ["general", "colorization", "deblur", "superres", "denoise", "paperscale"];

impl ExperimentConfig {
    /// Named starting points: `general` (super-resolution with the general
    /// window), one per task with its tuned schedule, and `paperscale`
    /// (64×64 deblurring with a 61×61 kernel, `σ_b = 3`).
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            "general" => {}
            "colorization" | "deblur" | "superres" | "denoise" => {
                cfg.task = serde_json::from_value(Value::String(name.into()))?;
                cfg.schedule = ScheduleSpec::Preset(name.into());
            }
            "paperscale" => {
                cfg.task = TaskKind::Deblur;
                cfg.schedule = ScheduleSpec::Preset("deblur".into());
                cfg.operator = OperatorParams {
                    blur_sigma: 3.0,
                    blur_kernel_size: Some(61),
                    wiener_lambda: 0.1,
                    noise_sigma: 0.2,
                };
                cfg.dataset = DatasetSpec::Shapes {
                    count: 20,
                    size: 64,
                    seed: 0,
                };
                cfg.ddnm.steps = 100;
            }
            _ => {
                return Err(Error::config(format!(
                    "unknown preset '{name}', expected one of {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut root = serde_json::to_value(&self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{item}' is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key, value)?;
        }
        serde_json::from_value(root).map_err(|e| Error::config(format!("invalid override: {e}")))
    }

    /// Resolves `path` against the output directory.
    pub fn output_path(&self, path: impl AsRef<Path>) -> PathBuf {
        let path = path.as_ref();
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.output_dir.join(path)
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_path(&self.train.checkpoint)
    }

    pub fn operator(&self) -> Result<DegradationOperator> {
        let dims = self.dataset.image_dims();
        let op = match self.task {
            TaskKind::Colorization => DegradationOperator::colorization(&dims),
            TaskKind::Superres => DegradationOperator::super_res4(&dims),
            TaskKind::Denoise => DegradationOperator::denoise(&dims, self.operator.noise_sigma),
            TaskKind::Deblur => {
                let (h, w) = match dims[..] {
                    [_, h, w] => (h, w),
                    _ => return Err(Error::config(format!("deblurring needs [C, H, W] images, got {dims:?}"))),
                };
                let size = match self.operator.blur_kernel_size {
                    Some(k) => k,
                    None => default_kernel_size(self.operator.blur_sigma, h, w),
                };
                let kernel = make_gaussian_kernel(size, self.operator.blur_sigma)?;
                DegradationOperator::blur(&dims, kernel, self.operator.wiener_lambda)
            }
        };
        op.map_err(|e| Error::config(format!("operator: {e}")))
    }

    pub fn codec(&self) -> Result<LatentCodec> {
        LatentCodec::new(self.codec, &self.dataset.image_dims())
            .and_then(|c| c.with_decode_noise(self.decode_noise))
            .map_err(|e| Error::config(format!("codec: {e}")))
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.steps).map_err(|e| Error::config(e.to_string()))
    }

    pub fn flowsteer(&self, schedule: LambdaSchedule) -> Result<FlowSteerConfig> {
        let mut fs = FlowSteerConfig::new(self.grid()?, schedule, self.codec()?);
        fs.eta_eff = self.eta_eff;
        fs.projection_mode = self.projection_mode;
        fs.eps = self.eps;
        fs.validate()?;
        Ok(fs)
    }

    /// Checks cross-field constraints. `need_checkpoint` additionally
    /// requires a net checkpoint to exist on disk.
    pub fn validate(&self, need_checkpoint: bool) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be ≥ 1"));
        }
        match &self.dataset {
            DatasetSpec::Shapes { size, .. } => {
                if !(super::dataset::MIN_SIZE..=super::dataset::MAX_SIZE).contains(size) {
                    return Err(Error::config(format!("dataset.size must lie in [8, 64], got {size}")));
                }
            }
            DatasetSpec::Gmm { .. } => {
                self.dataset.gmm()?;
            }
        }
        self.schedule.build(self.steps)?;
        self.operator()?;
        self.codec()?;
        if !(self.eta_eff >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("eta_eff must be ≥ 0 and eps > 0"));
        }
        if let FlowSpec::Oracle { stdev, components } = &self.flow {
            if !(*stdev >= 0.0) || *components == 0 {
                return Err(Error::config("oracle flow needs stdev ≥ 0 and ≥ 1 component"));
            }
        }
        if need_checkpoint {
            if let FlowSpec::Net { checkpoint } = &self.flow {
                let path = self.output_path(checkpoint);
                if !path.is_file() {
                    return Err(Error::config(format!("checkpoint {} does not exist", path.display())));
                }
            }
        }
        if self.method == Method::Ddnm && !matches!(self.dataset, DatasetSpec::Gmm { .. }) {
            return Err(Error::config("method ddnm needs a gmm dataset"));
        }
        if let Some(dir) = &self.eval_dir {
            if !dir.is_dir() {
                return Err(Error::config(format!("eval_dir {} does not exist", dir.display())));
            }
        }
        Ok(())
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("'{key}': '{part}' is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::config("empty override key"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn json_round_trip() {
        for name in PRESET_NAMES {
            let cfg = ExperimentConfig::preset(name).unwrap();
            assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                "dataset.count=4",
                "schedule=deblur",
                "task=deblur",
                "eta_eff=0.05",
                "ablation.seeds=[0,1,2]",
                "flow={\"kind\":\"net\",\"checkpoint\":\"x.fst\"}",
            ])
            .unwrap();
        assert_eq!(cfg.dataset.count(), 4);
        assert_eq!(cfg.schedule, ScheduleSpec::Preset("deblur".into()));
        assert_eq!(cfg.task, TaskKind::Deblur);
        assert_eq!(cfg.eta_eff, 0.05);
        assert_eq!(cfg.ablation.seeds, vec![0, 1, 2]);
        assert!(matches!(cfg.flow, FlowSpec::Net { .. }));
        assert!(ExperimentConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["steps"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["steps.x=1"]).is_err());
    }

    #[test]
    fn schedule_length_checked() {
        let cfg = ExperimentConfig {
            schedule: ScheduleSpec::Values(vec![0.0; 29]),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(false), Err(Error::Config(_))));
        let cfg = ExperimentConfig {
            schedule: ScheduleSpec::Values(vec![0.5; 30]),
            ..Default::default()
        };
        cfg.validate(false).unwrap();
        let cfg = ExperimentConfig {
            schedule: ScheduleSpec::Preset("sideways".into()),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(false), Err(Error::Config(_))));
    }

    #[test]
    fn missing_checkpoint_rejected() {
        let cfg = ExperimentConfig {
            flow: FlowSpec::Net {
                checkpoint: PathBuf::from("/definitely/not/here.fst"),
            },
            ..Default::default()
        };
        cfg.validate(false).unwrap();
        assert!(matches!(cfg.validate(true), Err(Error::Config(_))));
    }

    #[test]
    fn large_kernel_preset_operator() {
        let cfg = ExperimentConfig::preset("paperscale").unwrap();
        let op = cfg.operator().unwrap();
        assert_eq!(op.input_dims(), &[3, 64, 64]);
        match op.kind() {
            crate::operators::OperatorKind::Blur { kernel, wiener_lambda } => {
                assert_eq!(kernel.dims(), &[61, 61]);
                assert_eq!(*wiener_lambda, 0.1);
            }
            other => panic!("unexpected operator {other:?}"),
        }
    }
}
