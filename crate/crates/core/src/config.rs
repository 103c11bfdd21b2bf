//! Run configuration and its `key = value` file format.
//!
//! Every key is optional; missing keys keep their defaults, so an empty
//! file is a runnable config. [`RunConfig::to_text`] writes every key and
//! [`RunConfig::parse`] reads it back losslessly. See `docs/config.md` for
//! the full key list.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{ImageShape, SyntheticSpec};
use crate::error::{Error, Result};
use crate::kv::{self, Entry};
use crate::losses::{LossWeights, PrototypeTeacher};
use crate::model::ModelDims;
use crate::optim::{OptimizerKind, OptimizerSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Archive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub archive: PathBuf,
    pub manifest: PathBuf,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub split_seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub template_grid: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            archive: PathBuf::from("data/archive.bin"),
            manifest: PathBuf::from("data/manifest.txt"),
            num_tasks: synthetic.num_tasks,
            classes_per_task: synthetic.classes_per_task,
            split_seed: 0,
            train_per_class: synthetic.train_per_class,
            test_per_class: synthetic.test_per_class,
            channels: synthetic.shape.channels,
            height: synthetic.shape.height,
            width: synthetic.shape.width,
            noise: synthetic.noise,
            template_grid: synthetic.template_grid,
        }
    }
}

impl DatasetConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_tasks: self.num_tasks,
            classes_per_task: self.classes_per_task,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            shape: ImageShape::new(self.channels, self.height, self.width),
            noise: self.noise,
            template_grid: self.template_grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub hyper_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone_hidden: vec![256],
            feature_dim: 64,
            hyper_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeInit {
    Semantic,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    pub init: PrototypeInit,
    pub height: usize,
    pub width: usize,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            init: PrototypeInit::Semantic,
            height: 10,
            width: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub main: OptimizerSettings,
    /// Learning rate of the prototype-only optimizer.
    pub prototype_learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            main: OptimizerSettings::default(),
            prototype_learning_rate: 1e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn prototype_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            learning_rate: self.prototype_learning_rate,
            ..self.main
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub prototype: PrototypeConfig,
    pub loss: LossWeights,
    pub prototype_teacher: PrototypeTeacher,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            prototype: PrototypeConfig::default(),
            loss: LossWeights::default(),
            prototype_teacher: PrototypeTeacher::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Ablation axes the sweep runner understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ProtoShape,
    Stability,
    LspWeight,
    Init,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [
        SweepAxis::ProtoShape,
        SweepAxis::Stability,
        SweepAxis::LspWeight,
        SweepAxis::Init,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ProtoShape => "proto_shape",
            SweepAxis::Stability => "stability",
            SweepAxis::LspWeight => "lsp_weight",
            SweepAxis::Init => "init",
        }
    }

    pub fn parse(name: &str) -> Option<SweepAxis> {
        SweepAxis::ALL.into_iter().find(|a| a.name() == name)
    }

    /// The value set of the corresponding published ablation.
    pub fn reference_values(self) -> &'static [&'static str] {
        match self {
            SweepAxis::ProtoShape => &["5", "10", "16", "20", "30"],
            SweepAxis::Stability => &["0.1", "0.25", "0.5", "1.0", "1.5"],
            SweepAxis::LspWeight => &["0.0", "0.5", "1.0", "2.0"],
            SweepAxis::Init => &["random", "semantic"],
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn join_usize(values: &[usize]) -> String {
    values
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for entry in kv::parse(text)? {
            cfg.apply(&entry)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Overrides one key with a textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply(&Entry {
            line: 0,
            key: key.to_string(),
            value: value.to_string(),
        })
    }

    fn apply(&mut self, e: &Entry) -> Result<()> {
        let bad = |detail: String| Error::Config {
            line: e.line,
            detail,
        };
        let d = &mut self.dataset;
        match e.key.as_str() {
            "dataset.kind" => {
                d.kind = match e.value.as_str() {
                    "synthetic" => DatasetKind::Synthetic,
                    "archive" => DatasetKind::Archive,
                    other => return Err(bad(format!("unknown dataset kind `{other}`"))),
                }
            }
            "dataset.archive" => d.archive = PathBuf::from(&e.value),
            "dataset.manifest" => d.manifest = PathBuf::from(&e.value),
            "dataset.num_tasks" => d.num_tasks = kv::parse_value(e)?,
            "dataset.classes_per_task" => d.classes_per_task = kv::parse_value(e)?,
            "dataset.split_seed" => d.split_seed = kv::parse_value(e)?,
            "dataset.synthetic.train_per_class" => d.train_per_class = kv::parse_value(e)?,
            "dataset.synthetic.test_per_class" => d.test_per_class = kv::parse_value(e)?,
            "dataset.synthetic.channels" => d.channels = kv::parse_value(e)?,
            "dataset.synthetic.height" => d.height = kv::parse_value(e)?,
            "dataset.synthetic.width" => d.width = kv::parse_value(e)?,
            "dataset.synthetic.noise" => d.noise = kv::parse_value(e)?,
            "dataset.synthetic.template_grid" => d.template_grid = kv::parse_value(e)?,
            "model.backbone_hidden" => {
                self.model.backbone_hidden = if e.value.trim().is_empty() {
                    Vec::new()
                } else {
                    e.value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(format!("invalid width list `{}`", e.value)))?
                }
            }
            "model.feature_dim" => self.model.feature_dim = kv::parse_value(e)?,
            "model.hyper_hidden" => self.model.hyper_hidden = kv::parse_value(e)?,
            "prototype.init" => {
                self.prototype.init = match e.value.as_str() {
                    "semantic" => PrototypeInit::Semantic,
                    "random" => PrototypeInit::Random,
                    other => return Err(bad(format!("unknown prototype init `{other}`"))),
                }
            }
            "prototype.height" => self.prototype.height = kv::parse_value(e)?,
            "prototype.width" => self.prototype.width = kv::parse_value(e)?,
            "loss.stability" => self.loss.stability = kv::parse_value(e)?,
            "loss.lsp_weight" => self.loss.lsp_weight = kv::parse_value(e)?,
            "loss.temperature" => self.loss.temperature = kv::parse_value(e)?,
            "loss.prototype_teacher" => {
                self.prototype_teacher = match e.value.as_str() {
                    "live" => PrototypeTeacher::Live,
                    "snapshot" => PrototypeTeacher::Snapshot,
                    other => return Err(bad(format!("unknown prototype teacher `{other}`"))),
                }
            }
            "optimizer.kind" => {
                self.optimizer.main.kind = match e.value.as_str() {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => return Err(bad(format!("unknown optimizer `{other}`"))),
                }
            }
            "optimizer.learning_rate" => self.optimizer.main.learning_rate = kv::parse_value(e)?,
            "optimizer.beta1" => self.optimizer.main.beta1 = kv::parse_value(e)?,
            "optimizer.beta2" => self.optimizer.main.beta2 = kv::parse_value(e)?,
            "optimizer.epsilon" => self.optimizer.main.epsilon = kv::parse_value(e)?,
            "optimizer.prototype_learning_rate" => {
                self.optimizer.prototype_learning_rate = kv::parse_value(e)?
            }
            "train.epochs" => self.train.epochs = kv::parse_value(e)?,
            "train.batch_size" => self.train.batch_size = kv::parse_value(e)?,
            "train.seed" => self.train.seed = kv::parse_value(e)?,
            "output.dir" => self.output_dir = PathBuf::from(&e.value),
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: &str| Error::Config {
            line: 0,
            detail: detail.to_string(),
        };
        let d = &self.dataset;
        if d.num_tasks == 0 || d.classes_per_task < 2 {
            return Err(bad("need at least one task and two classes per task"));
        }
        if d.kind == DatasetKind::Synthetic
            && (d.channels == 0
                || d.height == 0
                || d.width == 0
                || d.train_per_class == 0
                || d.test_per_class == 0)
        {
            return Err(bad(
                "synthetic dataset dimensions and counts must be positive",
            ));
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return Err(bad("synthetic noise must be a finite non-negative number"));
        }
        if self.prototype.height == 0 || self.prototype.width == 0 {
            return Err(bad("prototype shape must be positive"));
        }
        if self.model.feature_dim == 0
            || self.model.hyper_hidden == 0
            || self.model.backbone_hidden.contains(&0)
        {
            return Err(bad("model widths must be positive"));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(bad("epochs and batch size must be positive"));
        }
        if !(self.optimizer.main.learning_rate > 0.0
            && self.optimizer.prototype_learning_rate > 0.0)
        {
            return Err(bad("learning rates must be positive"));
        }
        self.loss.validate().map_err(|e| bad(&e.to_string()))
    }

    /// Model dimensions for inputs of `input` shape.
    pub fn model_dims(&self, input: ImageShape) -> ModelDims {
        ModelDims {
            input,
            backbone_hidden: self.model.backbone_hidden.clone(),
            feature_dim: self.model.feature_dim,
            hyper_hidden: self.model.hyper_hidden,
            classes_per_task: self.dataset.classes_per_task,
            prototype: ImageShape::new(input.channels, self.prototype.height, self.prototype.width),
        }
    }

    /// Copy with one ablation axis set to `value`.
    pub fn with_axis(&self, axis: SweepAxis, value: &str) -> Result<RunConfig> {
        let mut cfg = self.clone();
        match axis {
            SweepAxis::ProtoShape => {
                cfg.set("prototype.height", value)?;
                cfg.set("prototype.width", value)?;
            }
            SweepAxis::Stability => cfg.set("loss.stability", value)?,
            SweepAxis::LspWeight => cfg.set("loss.lsp_weight", value)?,
            SweepAxis::Init => cfg.set("prototype.init", value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let o = &self.optimizer;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line(
            "dataset.kind",
            match d.kind {
                DatasetKind::Synthetic => "synthetic".into(),
                DatasetKind::Archive => "archive".into(),
            },
        );
        line("dataset.archive", d.archive.display().to_string());
        line("dataset.manifest", d.manifest.display().to_string());
        line("dataset.num_tasks", d.num_tasks.to_string());
        line("dataset.classes_per_task", d.classes_per_task.to_string());
        line("dataset.split_seed", d.split_seed.to_string());
        line(
            "dataset.synthetic.train_per_class",
            d.train_per_class.to_string(),
        );
        line(
            "dataset.synthetic.test_per_class",
            d.test_per_class.to_string(),
        );
        line("dataset.synthetic.channels", d.channels.to_string());
        line("dataset.synthetic.height", d.height.to_string());
        line("dataset.synthetic.width", d.width.to_string());
        line("dataset.synthetic.noise", d.noise.to_string());
        line(
            "dataset.synthetic.template_grid",
            d.template_grid.to_string(),
        );
        line(
            "model.backbone_hidden",
            join_usize(&self.model.backbone_hidden),
        );
        line("model.feature_dim", self.model.feature_dim.to_string());
        line("model.hyper_hidden", self.model.hyper_hidden.to_string());
        line(
            "prototype.init",
            match self.prototype.init {
                PrototypeInit::Semantic => "semantic".into(),
                PrototypeInit::Random => "random".into(),
            },
        );
        line("prototype.height", self.prototype.height.to_string());
        line("prototype.width", self.prototype.width.to_string());
        line("loss.stability", self.loss.stability.to_string());
        line("loss.lsp_weight", self.loss.lsp_weight.to_string());
        line("loss.temperature", self.loss.temperature.to_string());
        line(
            "loss.prototype_teacher",
            match self.prototype_teacher {
                PrototypeTeacher::Live => "live".into(),
                PrototypeTeacher::Snapshot => "snapshot".into(),
            },
        );
        line(
            "optimizer.kind",
            match o.main.kind {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
        );
        line("optimizer.learning_rate", o.main.learning_rate.to_string());
        line("optimizer.beta1", o.main.beta1.to_string());
        line("optimizer.beta2", o.main.beta2.to_string());
        line("optimizer.epsilon", o.main.epsilon.to_string());
        line(
            "optimizer.prototype_learning_rate",
            o.prototype_learning_rate.to_string(),
        );
        line("train.epochs", self.train.epochs.to_string());
        line("train.batch_size", self.train.batch_size.to_string());
        line("train.seed", self.train.seed.to_string());
        line("output.dir", self.output_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        let d = RunConfig::default();
        assert_eq!(d.loss.stability, 0.5);
        assert_eq!(d.loss.lsp_weight, 1.0);
        assert_eq!((d.prototype.height, d.prototype.width), (10, 10));
        assert_eq!(d.model.backbone_hidden, vec![256]);
        assert_eq!(d.model.feature_dim, 64);
        assert_eq!(d.train.epochs, 20);
    }

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn sweep_points_round_trip() {
        let base = RunConfig::default();
        for axis in SweepAxis::ALL {
            for value in axis.reference_values() {
                let cfg = base.with_axis(axis, value).unwrap();
                assert_eq!(
                    RunConfig::parse(&cfg.to_text()).unwrap(),
                    cfg,
                    "{axis}={value}"
                );
            }
        }
    }

    #[test]
    fn axis_application() {
        let base = RunConfig::default();
        let c = base.with_axis(SweepAxis::ProtoShape, "16").unwrap();
        assert_eq!((c.prototype.height, c.prototype.width), (16, 16));
        let c = base.with_axis(SweepAxis::Init, "random").unwrap();
        assert_eq!(c.prototype.init, PrototypeInit::Random);
        assert!(base.with_axis(SweepAxis::Stability, "-1").is_err());
        assert!(base.with_axis(SweepAxis::Init, "fancy").is_err());
        assert_eq!(SweepAxis::parse("lsp_weight"), Some(SweepAxis::LspWeight));
        assert_eq!(SweepAxis::parse("depth"), None);
    }

    #[test]
    fn unknown_key_reports_line() {
        match RunConfig::parse("train.epochs = 3\nmodel.depth = 4\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("train.epochs = many").is_err());
        assert!(RunConfig::parse("train.epochs = 0").is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse(
            "model.backbone_hidden = 32, 16\nloss.prototype_teacher = snapshot\noptimizer.kind = sgd\n",
        )
        .unwrap();
        assert_eq!(cfg.model.backbone_hidden, vec![32, 16]);
        assert_eq!(cfg.prototype_teacher, PrototypeTeacher::Snapshot);
        assert_eq!(cfg.optimizer.main.kind, OptimizerKind::Sgd);
    }
}
