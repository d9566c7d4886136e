//! Data preparation, training, and evaluation driven by a [`RunConfig`].

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{write_checkpoint, CheckpointMeta, RngState, CHECKPOINT_VERSION};
use super::config::{DataSource, EngineKind, RunConfig};
use super::metrics::{write_metrics, MetricRow};
use crate::data::{generate_glyphs, load_idx, sample_episode, ClassSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::meta::{
    accuracy, meta_test_maml, meta_test_mebqat, meta_test_pn, predict, Learner, MamlConfig,
    MebqatConfig, PnConfig,
};
use crate::models::{build_model_with_width, ModelKind, ModelSpec, Params, QuantPolicy};
use crate::optim::Optimizer;
use crate::optim::OptimizerKind;
use crate::quant::BitwidthTask;

pub const CHECKPOINT_FILE: &str = "checkpoint.mbqt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// Training and evaluation data of one run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: LabeledDataset,
    pub test: Option<LabeledDataset>,
    /// Classes seen during episodic meta-training and the held-out ones.
    pub split: ClassSplit,
}

impl RunData {
    /// The held-out set if there is one, else the training set.
    pub fn eval_set(&self) -> &LabeledDataset {
        self.test.as_ref().unwrap_or(&self.train)
    }
}

fn required<'a>(v: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::config(field, "required when data.source = \"idx\""))
}

pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let d = &cfg.data;
    let (train, test) = match d.source {
        DataSource::Synthetic => {
            let per = d.synthetic.samples_per_class;
            let mut gen = d.synthetic.clone();
            gen.samples_per_class = per + d.synthetic_test_per_class;
            let (images, labels) = generate_glyphs(&gen)?;
            let all = LabeledDataset::from_idx(&images, &labels)?;
            // samples are interleaved class by class, so a prefix holds the
            // first `per` samples of every class
            let cut = per * gen.num_classes;
            let train_idx: Vec<usize> = (0..cut).collect();
            let train = all.batch(&train_idx)?;
            let train = LabeledDataset::new(train.x, train.y)?;
            let test = if d.synthetic_test_per_class > 0 {
                let b = all.batch(&(cut..all.len()).collect::<Vec<_>>())?;
                Some(LabeledDataset::new(b.x, b.y)?)
            } else {
                None
            };
            (train, test)
        }
        DataSource::Idx => {
            let train = load_idx(
                required(&d.train_images, "data.train_images")?,
                required(&d.train_labels, "data.train_labels")?,
            )?;
            let test = match (&d.test_images, &d.test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l)?),
                _ => None,
            };
            (train, test)
        }
    };
    let n_train = d.meta_train_classes.unwrap_or(train.num_classes() * 3 / 5);
    let split = ClassSplit::first(&train, n_train)?;
    Ok(RunData { train, test, split })
}

fn label_count(ds: &LabeledDataset) -> usize {
    ds.labels().iter().max().map_or(0, |&m| m + 1)
}

/// The model for `cfg` on `data`.
pub fn build_spec(cfg: &RunConfig, data: &RunData) -> Result<ModelSpec> {
    let kind = cfg.model.kind;
    let outputs = match (kind, cfg.engine.kind) {
        (ModelKind::Conv4Pn, _) => 0,
        (_, EngineKind::MebqatMaml | EngineKind::MebqatPn) => cfg.episode.n,
        _ => label_count(&data.train),
    };
    let width = cfg.model.width.unwrap_or(kind.default_width());
    build_model_with_width(kind, outputs, data.train.sample_shape(), width)
}

pub fn policy(cfg: &RunConfig) -> QuantPolicy {
    QuantPolicy {
        quantize_first_layer: cfg.model.quantize_first_layer,
        quantize_last_layer: cfg.model.quantize_last_layer,
    }
}

pub fn optimizer(cfg: &RunConfig) -> Optimizer {
    let o = &cfg.optim;
    let mut opt = match o.kind {
        OptimizerKind::Sgd => Optimizer::sgd(o.lr),
        OptimizerKind::Adam => Optimizer::adam(o.lr),
        OptimizerKind::AdamW => Optimizer::adamw(o.lr, o.weight_decay),
    };
    opt.weight_decay = o.weight_decay;
    opt
}

pub fn build_learner(cfg: &RunConfig, spec: ModelSpec) -> Result<Learner> {
    let mut learner = Learner::new(spec, policy(cfg), optimizer(cfg), cfg.schedule()?, cfg.seed);
    learner.wallclock = cfg.metrics.wallclock;
    Ok(learner)
}

pub fn mebqat_config(cfg: &RunConfig) -> MebqatConfig {
    MebqatConfig {
        m: cfg.engine.m,
        tasks: cfg.bitwidths.task_set(),
        kd: cfg.engine.kd,
        fix_first_fp: cfg.engine.fix_first_fp,
        batch_size: cfg.engine.batch_size,
    }
}

pub fn maml_config(cfg: &RunConfig) -> MamlConfig {
    let e = &cfg.episode;
    MamlConfig {
        m: cfg.engine.m,
        tasks: cfg.bitwidths.task_set(),
        n: e.n,
        k: e.k,
        q: e.q.unwrap_or(5),
        inner_steps: e.inner_steps,
        inner_lr: e.inner_lr,
        meta_test_steps: e.meta_test_steps,
    }
}

pub fn pn_config(cfg: &RunConfig) -> PnConfig {
    let e = &cfg.episode;
    PnConfig {
        m: cfg.engine.m,
        tasks: cfg.bitwidths.task_set(),
        n: e.n,
        k: e.k,
        q: e.q.unwrap_or(15),
    }
}

/// Runs `cfg.engine.epochs` epochs (outer updates for episodic engines).
pub fn run_engine(
    cfg: &RunConfig,
    data: &RunData,
    learner: &mut Learner,
) -> Result<Vec<MetricRow>> {
    let e = &cfg.engine;
    let mut rows = Vec::new();
    for epoch in 0..e.epochs {
        let step = match e.kind {
            EngineKind::Qat => {
                learner.train_dedicated_qat_epoch(e.qat_task, e.batch_size, &data.train, epoch)?
            }
            EngineKind::Mebqat => {
                learner.run_mebqat_epoch(&mebqat_config(cfg), &data.train, epoch)?
            }
            EngineKind::MebqatMaml => {
                let ds = &data.train;
                learner.run_mebqat_maml_epoch(&maml_config(cfg), ds, &data.split.meta_train)?
            }
            EngineKind::MebqatPn => {
                learner.run_mebqat_pn_epoch(&pn_config(cfg), &data.train, &data.split.meta_train)?
            }
        };
        if log::log_enabled!(log::Level::Info) && !step.is_empty() {
            let mean = step.iter().map(|r| r.loss).sum::<f64>() / step.len() as f64;
            log::info!(
                "{} epoch {epoch}: mean loss {mean:.4}, {} rows",
                e.kind.name(),
                step.len()
            );
        }
        rows.extend(step);
    }
    Ok(rows)
}

pub fn checkpoint_meta(cfg: &RunConfig, learner: &Learner) -> CheckpointMeta {
    let (m, tasks) = match cfg.engine.kind {
        EngineKind::Qat => (1, vec![cfg.engine.qat_task]),
        _ => (cfg.engine.m, cfg.bitwidths.task_set().valid_tasks()),
    };
    CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        model_kind: learner.spec.kind,
        width: learner.spec.width,
        input_shape: learner.spec.input_shape,
        outputs: learner.spec.output.dim(),
        engine: cfg.engine.kind.name().into(),
        m,
        epoch: if cfg.engine.kind.is_episodic() {
            learner.counters.updates
        } else {
            cfg.engine.epochs
        },
        updates: learner.counters.updates,
        backprops_total: learner.counters.backprops,
        inner_backprops_total: learner.counters.inner_backprops,
        tasks,
        data_rng: RngState::capture(&learner.data_rng),
        task_rng: RngState::capture(&learner.task_rng),
    }
}

/// Output of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub learner: Learner,
    pub rows: Vec<MetricRow>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub resolved_config: PathBuf,
}

/// Trains per `cfg` and writes the resolved config, metrics, and checkpoint
/// into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let cfg = cfg.clone().resolve()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved_config = out.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&resolved_config, cfg.to_toml()?).map_err(|e| Error::io(&resolved_config, e))?;

    let data = load_data(&cfg)?;
    let spec = build_spec(&cfg, &data)?;
    log::info!(
        "{} on {} training samples, {} parameters",
        spec.kind,
        data.train.len(),
        spec.param_count()
    );
    let mut learner = build_learner(&cfg, spec)?;
    let rows = run_engine(&cfg, &data, &mut learner)?;

    let metrics = out.join(METRICS_FILE);
    write_metrics(&metrics, &rows)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    write_checkpoint(
        &checkpoint,
        &learner.params,
        Some(&checkpoint_meta(&cfg, &learner)),
    )?;
    Ok(TrainOutcome {
        learner,
        rows,
        checkpoint,
        metrics,
        resolved_config,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub task: BitwidthTask,
    pub accuracy: f64,
}

/// Accuracy over one pass of `ds` at every task, in input order.
pub fn eval_sweep(
    spec: &ModelSpec,
    policy: &QuantPolicy,
    params: &Params,
    ds: &LabeledDataset,
    tasks: &[BitwidthTask],
    batch_size: usize,
) -> Result<Vec<EvalRow>> {
    tasks
        .iter()
        .map(|&task| {
            Ok(EvalRow {
                task,
                accuracy: meta_test_mebqat(spec, policy, params, task, ds, batch_size)?,
            })
        })
        .collect()
}

/// Episode accuracies at one task. `pre` is only filled for MAML, where it
/// holds the accuracy before adaptation on each of the same episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaEvalRow {
    pub task: BitwidthTask,
    pub post: Vec<f64>,
    pub pre: Option<Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl MetaEvalRow {
    pub fn mean(&self) -> f64 {
        mean(&self.post)
    }

    /// Half-width of the normal-approximation 95% interval of the mean.
    pub fn ci95(&self) -> f64 {
        let n = self.post.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        let var = self.post.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    }

    pub fn pre_mean(&self) -> Option<f64> {
        self.pre.as_deref().map(mean)
    }

    pub fn median_improvement(&self) -> Option<f64> {
        let pre = self.pre.as_ref()?;
        let diffs: Vec<f64> = self.post.iter().zip(pre).map(|(a, b)| a - b).collect();
        Some(median(&diffs))
    }
}

/// Meta-tests on `episodes` episodes drawn from the held-out classes. The same
/// episodes (drawn from `seed`) are used for every task.
#[allow(clippy::too_many_arguments)]
pub fn meta_eval(
    cfg: &RunConfig,
    spec: &ModelSpec,
    params: &Params,
    ds: &LabeledDataset,
    classes: &[usize],
    tasks: &[BitwidthTask],
    episodes: usize,
    seed: u64,
) -> Result<Vec<MetaEvalRow>> {
    let engine = cfg.engine.kind;
    if !engine.is_episodic() {
        return Err(Error::config(
            "engine.kind",
            format!("meta-eval needs an episodic engine, got {}", engine.name()),
        ));
    }
    let e = &cfg.episode;
    let q = e.q.unwrap_or(if engine == EngineKind::MebqatPn {
        15
    } else {
        5
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = (0..episodes)
        .map(|_| sample_episode(ds, classes, e.n, e.k, q, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let policy = policy(cfg);
    tasks
        .iter()
        .map(|&task| {
            let mut post = Vec::with_capacity(eps.len());
            let mut pre = Vec::with_capacity(eps.len());
            for ep in &eps {
                if engine == EngineKind::MebqatPn {
                    post.push(meta_test_pn(spec, &policy, params, task, ep)?);
                } else {
                    let before = predict(spec, &policy, params, &ep.query_x, task)?;
                    pre.push(accuracy(&before, &ep.query_y));
                    post.push(meta_test_maml(
                        spec,
                        &policy,
                        params,
                        task,
                        ep,
                        e.meta_test_steps,
                        e.inner_lr,
                    )?);
                }
            }
            Ok(MetaEvalRow {
                task,
                post,
                pre: (engine == EngineKind::MebqatMaml).then_some(pre),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(engine: &str, model: &str) -> RunConfig {
        RunConfig::from_toml(&format!(
            "seed = 3\n\
             [model]\nkind = \"{model}\"\nwidth = 4\n\
             [data.synthetic]\nnum_classes = 8\nsamples_per_class = 6\nimage_size = 16\n\
             [engine]\nkind = \"{engine}\"\nepochs = 2\nbatch_size = 16\nm = 2\n\
             [bitwidths]\nweights = [2, \"FP\"]\nactivations = [2, \"FP\"]\nminor = []\n\
             [episode]\nn = 2\nk = 1\nq = 2\ninner_steps = 1"
        ))
        .unwrap()
        .resolve()
        .unwrap()
    }

    #[test]
    fn synthetic_split_is_disjoint() {
        let mut cfg = tiny("mebqat", "conv8");
        cfg.data.synthetic_test_per_class = 2;
        let data = load_data(&cfg).unwrap();
        assert_eq!(data.train.len(), 48);
        assert_eq!(data.test.as_ref().unwrap().len(), 16);
        assert_eq!(data.split.meta_train.len(), 4);
        assert_eq!(data.split.meta_test.len(), 4);
    }

    #[test]
    fn every_engine_trains_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        for (engine, model) in [
            ("qat", "conv8"),
            ("mebqat", "conv8"),
            ("mebqat-maml", "conv5-maml"),
            ("mebqat-pn", "conv4-pn"),
        ] {
            let out = dir.path().join(engine);
            let cfg = tiny(engine, model);
            let r = train(&cfg, &out).unwrap();
            assert!(r.checkpoint.exists() && r.metrics.exists() && r.resolved_config.exists());
            assert!(!r.rows.is_empty(), "{engine}");
            assert!(
                r.learner.params.values().all(|t| t.all_finite()),
                "{engine}"
            );
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
