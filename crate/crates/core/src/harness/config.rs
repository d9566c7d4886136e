//! TOML run configuration. Every field has a default; [`RunConfig::resolve`]
//! fills in engine-dependent values so the written copy is explicit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GlyphConfig;
use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::optim::{OptimizerKind, Schedule, ScheduleKind};
use crate::quant::{Bitwidth, BitwidthTask, BitwidthTaskSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EngineKind {
    #[serde(rename = "qat")]
    Qat,
    #[serde(rename = "mebqat")]
    Mebqat,
    #[serde(rename = "mebqat-maml")]
    MebqatMaml,
    #[serde(rename = "mebqat-pn")]
    MebqatPn,
}

impl EngineKind {
    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Qat => "qat",
            EngineKind::Mebqat => "mebqat",
            EngineKind::MebqatMaml => "mebqat-maml",
            EngineKind::MebqatPn => "mebqat-pn",
        }
    }

    pub fn is_episodic(self) -> bool {
        matches!(self, EngineKind::MebqatMaml | EngineKind::MebqatPn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub engine: EngineConfig,
    pub bitwidths: BitwidthConfig,
    pub episode: EpisodeConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub metrics: MetricsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Base filter count; the kind's default when unset.
    pub width: Option<usize>,
    pub quantize_first_layer: bool,
    pub quantize_last_layer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Conv8,
            width: None,
            quantize_first_layer: false,
            quantize_last_layer: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub synthetic: GlyphConfig,
    /// Per-class samples of the synthetic set held out for `eval`.
    pub synthetic_test_per_class: usize,
    /// Classes (lowest ids first) used for meta-training by episodic engines;
    /// the rest are meta-test classes.
    pub meta_train_classes: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            synthetic: GlyphConfig::default(),
            synthetic_test_per_class: 0,
            meta_train_classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub kind: EngineKind,
    /// Passes over the data for `qat`/`mebqat`, outer updates otherwise.
    pub epochs: u64,
    pub batch_size: usize,
    pub m: usize,
    pub kd: bool,
    pub fix_first_fp: bool,
    /// The single task trained by `qat`.
    pub qat_task: BitwidthTask,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            kind: EngineKind::Mebqat,
            epochs: 20,
            batch_size: 64,
            m: 4,
            kd: true,
            fix_first_fp: true,
            qat_task: BitwidthTask::new(Bitwidth::Int(8), Bitwidth::Int(8)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BitwidthConfig {
    pub weights: Vec<Bitwidth>,
    pub activations: Vec<Bitwidth>,
    pub minor: Vec<Bitwidth>,
    /// Explicit task list; when non-empty it replaces the cross product.
    pub tuples: Vec<BitwidthTask>,
}

impl Default for BitwidthConfig {
    fn default() -> Self {
        let bits = vec![
            Bitwidth::Int(1),
            Bitwidth::Int(2),
            Bitwidth::Int(4),
            Bitwidth::Int(8),
            Bitwidth::Fp,
        ];
        BitwidthConfig {
            weights: bits.clone(),
            activations: bits,
            minor: vec![Bitwidth::Int(1)],
            tuples: Vec::new(),
        }
    }
}

impl BitwidthConfig {
    pub fn task_set(&self) -> BitwidthTaskSet {
        let set = if self.tuples.is_empty() {
            BitwidthTaskSet::new(self.weights.clone(), self.activations.clone())
        } else {
            BitwidthTaskSet::from_tuples(self.tuples.clone())
        };
        set.with_minor(self.minor.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n: usize,
    pub k: usize,
    /// Query samples per class; 15 for `mebqat-pn`, 5 for `mebqat-maml`.
    pub q: Option<usize>,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub meta_test_steps: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            n: 5,
            k: 1,
            q: None,
            inner_steps: 5,
            inner_lr: 0.1,
            meta_test_steps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 0.0,
            schedule: ScheduleKind::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Tasks swept by `eval`; every `(b,b)` pair of the weight candidates
    /// when empty.
    pub tasks: Vec<BitwidthTask>,
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_size: 100,
            tasks: Vec::new(),
            episodes: 600,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Record wall-clock milliseconds; off keeps metrics byte-reproducible.
    pub wallclock: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("<toml>", e.to_string().trim_end()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Other(format!("cannot serialize config: {e}")))
    }

    /// Fills every engine-dependent default and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        if self.model.width.is_none() {
            self.model.width = Some(self.model.kind.default_width());
        }
        if self.episode.q.is_none() {
            self.episode.q = Some(if self.engine.kind == EngineKind::MebqatPn {
                15
            } else {
                5
            });
        }
        if self.eval.tasks.is_empty() {
            self.eval.tasks = self
                .bitwidths
                .task_set()
                .valid_tasks()
                .into_iter()
                .filter(|t| t.b_w == t.b_a)
                .collect();
        }
        if self.data.meta_train_classes.is_none() && self.data.source == DataSource::Synthetic {
            self.data.meta_train_classes = Some(self.data.synthetic.num_classes * 3 / 5);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.engine;
        if e.epochs == 0 {
            return Err(Error::config("engine.epochs", "must be at least 1"));
        }
        if e.batch_size == 0 {
            return Err(Error::config("engine.batch_size", "must be at least 1"));
        }
        if e.m == 0 {
            return Err(Error::config("engine.m", "must be at least 1"));
        }
        if self.model.width == Some(0) {
            return Err(Error::config("model.width", "must be positive"));
        }
        let fix = e.fix_first_fp && e.kind == EngineKind::Mebqat;
        self.bitwidths
            .task_set()
            .validate(fix)
            .map_err(|err| Error::config("bitwidths", err.to_string()))?;
        if e.kind == EngineKind::Qat && e.qat_task.is_excluded() {
            return Err(Error::config(
                "engine.qat_task",
                format!("{} is an excluded task", e.qat_task),
            ));
        }
        if let Some(t) = self.eval.tasks.iter().find(|t| t.is_excluded()) {
            return Err(Error::config(
                "eval.tasks",
                format!("{t} is an excluded task"),
            ));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be at least 1"));
        }
        let ep = &self.episode;
        if e.kind.is_episodic() {
            for (field, v) in [
                ("episode.n", ep.n),
                ("episode.k", ep.k),
                ("episode.q", ep.q.unwrap_or(1)),
            ] {
                if v == 0 {
                    return Err(Error::config(field, "must be at least 1"));
                }
            }
            if e.kind == EngineKind::MebqatMaml && ep.inner_steps == 0 {
                return Err(Error::config("episode.inner_steps", "must be at least 1"));
            }
            if ep.inner_lr.is_nan() || ep.inner_lr <= 0.0 {
                return Err(Error::config("episode.inner_lr", "must be positive"));
            }
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be positive and finite"));
        }
        if self.optim.weight_decay < 0.0 {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        Schedule::new(self.optim.schedule.clone(), self.optim.lr)
            .map_err(|err| Error::config("optim.schedule", err.to_string()))?;
        if self.data.source == DataSource::Idx {
            for (field, v) in [
                ("data.train_images", &self.data.train_images),
                ("data.train_labels", &self.data.train_labels),
            ] {
                if v.is_none() {
                    return Err(Error::config(field, "required when data.source = \"idx\""));
                }
            }
            if self.data.test_images.is_some() != self.data.test_labels.is_some() {
                return Err(Error::config(
                    "data.test_labels",
                    "test images and labels come in pairs",
                ));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.optim.schedule.clone(), self.optim.lr)
    }
}
