//! Meta-training engines: multi-branch QAT with distillation, first-order
//! MAML, and prototypical networks, each sampling one bitwidth task per
//! branch; plus single-bitwidth QAT and the matching evaluation procedures.

mod losses;

use std::time::Instant;

use bitadapt_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_iter, sample_episode, Episode, LabeledDataset};
use crate::error::{Error, Result};
use crate::harness::MetricRow;
use crate::models::{
    bind_constants, bind_params, collect_grads, forward_plain, forward_quantized, ModelSpec,
    OutputRole, Params, QuantPolicy,
};
use crate::optim::{average_grads, Optimizer, Schedule};
use crate::quant::{sample_bitwidth_tasks, BitwidthTask, BitwidthTaskSet};

pub use losses::{
    accuracy, argmax_rows, compute_prototypes, kd_loss, nearest_prototype, pn_episode_loss,
};

#[derive(Clone, Debug, PartialEq)]
pub struct MebqatConfig {
    pub m: usize,
    pub tasks: BitwidthTaskSet,
    pub kd: bool,
    pub fix_first_fp: bool,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MamlConfig {
    pub m: usize,
    pub tasks: BitwidthTaskSet,
    pub n: usize,
    pub k: usize,
    pub q: usize,
    /// Inner SGD steps `U`.
    pub inner_steps: usize,
    /// Inner learning rate `α`.
    pub inner_lr: f64,
    pub meta_test_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnConfig {
    pub m: usize,
    pub tasks: BitwidthTaskSet,
    pub n: usize,
    pub k: usize,
    pub q: usize,
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::config("engine.m", "must be at least 1"));
    }
    Ok(())
}

/// Running totals. `backprops` counts backward passes that produce a
/// meta-gradient; MAML inner-loop passes are tracked in `inner_backprops`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub updates: u64,
    pub backprops: u64,
    pub inner_backprops: u64,
}

/// Parameters, outer optimizer, and random streams of one training run.
///
/// Data order and episodes come from `data_rng`; bitwidth tasks come from
/// `task_rng`, so the data stream is the same whatever tasks are drawn.
#[derive(Clone, Debug)]
pub struct Learner {
    pub spec: ModelSpec,
    pub policy: QuantPolicy,
    pub params: Params,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    pub data_rng: ChaCha8Rng,
    pub task_rng: ChaCha8Rng,
    pub counters: Counters,
    /// Record wall-clock milliseconds in metric rows (otherwise 0).
    pub wallclock: bool,
}

impl Learner {
    /// Parameters are initialized from `seed`; the data and task streams use
    /// `seed + 1` and `seed + 2`.
    pub fn new(
        spec: ModelSpec,
        policy: QuantPolicy,
        optimizer: Optimizer,
        schedule: Schedule,
        seed: u64,
    ) -> Self {
        let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::with_params(spec, policy, params, optimizer, schedule, seed)
    }

    pub fn with_params(
        spec: ModelSpec,
        policy: QuantPolicy,
        params: Params,
        optimizer: Optimizer,
        schedule: Schedule,
        seed: u64,
    ) -> Self {
        Learner {
            spec,
            policy,
            params,
            optimizer,
            schedule,
            data_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
            task_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
            counters: Counters::default(),
            wallclock: false,
        }
    }

    fn expect_logits(&self) -> Result<()> {
        match self.spec.output {
            OutputRole::Logits(_) => Ok(()),
            OutputRole::Embedding(_) => Err(Error::Model(format!(
                "{} produces embeddings, not logits",
                self.spec.kind
            ))),
        }
    }

    fn row(
        &self,
        branch: usize,
        task: BitwidthTask,
        out: &BranchOutcome,
        start: Instant,
    ) -> MetricRow {
        MetricRow {
            epoch: self.counters.updates,
            branch,
            b_w: task.b_w,
            b_a: task.b_a,
            loss: out.loss,
            kd_loss: out.kd_loss,
            accuracy: out.accuracy,
            backprops: self.counters.backprops,
            wall_ms: if self.wallclock {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        }
    }

    fn outer_update(&mut self, grads: &[Params], epoch: u64) -> Result<()> {
        let avg = average_grads(grads)?;
        self.optimizer.lr = self.schedule.rate_at(epoch);
        self.optimizer.apply(&mut self.params, &avg)?;
        self.counters.updates += 1;
        Ok(())
    }

    /// One pass over `ds`, one outer update per batch. Each update draws `M`
    /// bitwidth tasks; every branch minimizes cross-entropy plus (when
    /// enabled) distillation from the full-precision model's predictions on
    /// the same batch. The branch gradients are averaged.
    pub fn run_mebqat_epoch(
        &mut self,
        cfg: &MebqatConfig,
        ds: &LabeledDataset,
        epoch: u64,
    ) -> Result<Vec<MetricRow>> {
        check_m(cfg.m)?;
        self.expect_logits()?;
        let mut rows = Vec::new();
        let batches: Vec<_> =
            batch_iter(ds, cfg.batch_size, true, false, &mut self.data_rng)?.collect();
        for batch in batches {
            let batch = batch?;
            let start = Instant::now();
            let tasks =
                sample_bitwidth_tasks(&cfg.tasks, cfg.m, &mut self.task_rng, cfg.fix_first_fp)?;
            let teacher = if cfg.kd && tasks.iter().any(|t| !t.is_fp()) {
                Some(teacher_logits(&self.spec, &self.params, &batch.x)?)
            } else {
                None
            };
            let mut grads = Vec::with_capacity(tasks.len());
            for (branch, &task) in tasks.iter().enumerate() {
                let kd_target = teacher.as_ref().filter(|_| !task.is_fp());
                let mut out = supervised_branch(
                    &self.spec,
                    &self.policy,
                    &self.params,
                    &batch.x,
                    &batch.y,
                    task,
                    kd_target,
                )?;
                self.counters.backprops += out.backprops;
                rows.push(self.row(branch, task, &out, start));
                grads.push(std::mem::take(&mut out.grads));
            }
            self.outer_update(&grads, epoch)?;
        }
        Ok(rows)
    }

    /// Conventional QAT at one fixed task: one backward pass per batch.
    pub fn train_dedicated_qat_epoch(
        &mut self,
        task: BitwidthTask,
        batch_size: usize,
        ds: &LabeledDataset,
        epoch: u64,
    ) -> Result<Vec<MetricRow>> {
        self.expect_logits()?;
        let mut rows = Vec::new();
        let batches: Vec<_> =
            batch_iter(ds, batch_size, true, false, &mut self.data_rng)?.collect();
        for batch in batches {
            let batch = batch?;
            let start = Instant::now();
            let mut out = supervised_branch(
                &self.spec,
                &self.policy,
                &self.params,
                &batch.x,
                &batch.y,
                task,
                None,
            )?;
            self.counters.backprops += out.backprops;
            rows.push(self.row(0, task, &out, start));
            let grads = std::mem::take(&mut out.grads);
            self.outer_update(&[grads], epoch)?;
        }
        Ok(rows)
    }

    /// One outer update of first-order MAML. Each branch draws a bitwidth
    /// task and an episode from `classes`, adapts a copy of the parameters on
    /// the support set, and contributes the query-loss gradient taken at the
    /// adapted parameters.
    pub fn run_mebqat_maml_epoch(
        &mut self,
        cfg: &MamlConfig,
        ds: &LabeledDataset,
        classes: &[usize],
    ) -> Result<Vec<MetricRow>> {
        check_m(cfg.m)?;
        self.expect_logits()?;
        let start = Instant::now();
        let epoch = self.counters.updates;
        let tasks = sample_bitwidth_tasks(&cfg.tasks, cfg.m, &mut self.task_rng, false)?;
        let mut rows = Vec::with_capacity(tasks.len());
        let mut grads = Vec::with_capacity(tasks.len());
        for (branch, &task) in tasks.iter().enumerate() {
            let ep = sample_episode(ds, classes, cfg.n, cfg.k, cfg.q, &mut self.data_rng)?;
            let adapted = inner_adapt(
                &self.spec,
                &self.policy,
                &self.params,
                task,
                &ep.support_x,
                &ep.support_y,
                cfg.inner_lr,
                cfg.inner_steps,
            )?;
            self.counters.inner_backprops += cfg.inner_steps as u64;
            let mut out = supervised_branch(
                &self.spec,
                &self.policy,
                &adapted,
                &ep.query_x,
                &ep.query_y,
                task,
                None,
            )?;
            self.counters.backprops += out.backprops;
            rows.push(self.row(branch, task, &out, start));
            grads.push(std::mem::take(&mut out.grads));
        }
        self.outer_update(&grads, epoch)?;
        Ok(rows)
    }

    /// One outer update of prototypical-network training: a single episode
    /// shared by all `M` branches, each with its own bitwidth task.
    pub fn run_mebqat_pn_epoch(
        &mut self,
        cfg: &PnConfig,
        ds: &LabeledDataset,
        classes: &[usize],
    ) -> Result<Vec<MetricRow>> {
        check_m(cfg.m)?;
        let start = Instant::now();
        let epoch = self.counters.updates;
        let ep = sample_episode(ds, classes, cfg.n, cfg.k, cfg.q, &mut self.data_rng)?;
        let tasks = sample_bitwidth_tasks(&cfg.tasks, cfg.m, &mut self.task_rng, false)?;
        let mut rows = Vec::with_capacity(tasks.len());
        let mut grads = Vec::with_capacity(tasks.len());
        for (branch, &task) in tasks.iter().enumerate() {
            let mut out = pn_branch(&self.spec, &self.policy, &self.params, &ep, task)?;
            self.counters.backprops += out.backprops;
            rows.push(self.row(branch, task, &out, start));
            grads.push(std::mem::take(&mut out.grads));
        }
        self.outer_update(&grads, epoch)?;
        Ok(rows)
    }
}

/// Result of one branch: its gradient and telemetry.
#[derive(Clone, Debug, Default)]
pub struct BranchOutcome {
    pub grads: Params,
    pub loss: f64,
    pub kd_loss: f64,
    pub accuracy: f64,
    pub backprops: u64,
}

/// Full-precision logits with no gradient tracking.
pub fn teacher_logits(spec: &ModelSpec, params: &Params, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = bind_constants(&mut g, params);
    let xv = g.constant(x.clone());
    let y = forward_plain(&mut g, spec, &vars, xv)?;
    Ok(g.value(y).clone())
}

/// Cross-entropy (plus KD against `teacher` when given) at `task`, with one
/// backward pass.
pub fn supervised_branch(
    spec: &ModelSpec,
    policy: &QuantPolicy,
    params: &Params,
    x: &Tensor,
    y: &[usize],
    task: BitwidthTask,
    teacher: Option<&Tensor>,
) -> Result<BranchOutcome> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, params);
    let xv = g.constant(x.clone());
    let logits = forward_quantized(&mut g, spec, &vars, xv, task, policy)?;
    let ce = g.cross_entropy(logits, y)?;
    let (loss, kd_value) = match teacher {
        Some(t) => {
            let kd = kd_loss(&mut g, logits, t)?;
            let kd_value = g.value(kd).data()[0] as f64;
            (g.add(ce, kd)?, kd_value)
        }
        None => (ce, 0.0),
    };
    g.backward(loss)?;
    Ok(BranchOutcome {
        loss: g.value(ce).data()[0] as f64,
        kd_loss: kd_value,
        accuracy: accuracy(&argmax_rows(g.value(logits)), y),
        grads: collect_grads(&g, &vars),
        backprops: g.backward_calls() as u64,
    })
}

/// Prototypical loss on one episode at `task`. Support and query are embedded
/// in a single batch, so batch normalization sees both.
pub fn pn_branch(
    spec: &ModelSpec,
    policy: &QuantPolicy,
    params: &Params,
    ep: &Episode,
    task: BitwidthTask,
) -> Result<BranchOutcome> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, params);
    let (loss, query, protos) = pn_forward(&mut g, spec, policy, &vars, ep, task)?;
    g.backward(loss)?;
    let pred = nearest_prototype(g.value(query), g.value(protos))?;
    Ok(BranchOutcome {
        loss: g.value(loss).data()[0] as f64,
        kd_loss: 0.0,
        accuracy: accuracy(&pred, &ep.query_y),
        grads: collect_grads(&g, &vars),
        backprops: g.backward_calls() as u64,
    })
}

/// Builds the episode loss; returns `(loss, query embeddings, prototypes)`.
pub fn pn_forward<T: bitadapt_tensor::Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    policy: &QuantPolicy,
    vars: &crate::models::ParamVars,
    ep: &Episode,
    task: BitwidthTask,
) -> Result<(
    bitadapt_tensor::Var,
    bitadapt_tensor::Var,
    bitadapt_tensor::Var,
)> {
    let both = Tensor::concat_rows(&[&ep.support_x, &ep.query_x])?.cast::<T>();
    let xv = g.constant(both);
    let emb = forward_quantized(g, spec, vars, xv, task, policy)?;
    let ns = ep.support_y.len();
    let support = g.slice_rows(emb, 0, ns)?;
    let query = g.slice_rows(emb, ns, ns + ep.query_y.len())?;
    let protos = compute_prototypes(g, support, &ep.support_y, ep.n, ep.k)?;
    let loss = pn_episode_loss(g, query, &ep.query_y, protos, ep.n, ep.k)?;
    Ok((loss, query, protos))
}

/// `U` SGD steps on a full-precision copy of `params`. Every step quantizes
/// the current copy afresh, backpropagates through the quantizers, and
/// updates the unquantized values. `params` itself is not touched.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    spec: &ModelSpec,
    policy: &QuantPolicy,
    params: &Params,
    task: BitwidthTask,
    support_x: &Tensor,
    support_y: &[usize],
    alpha: f64,
    steps: usize,
) -> Result<Params> {
    let mut phi = params.clone();
    let mut sgd = Optimizer::sgd(alpha);
    for _ in 0..steps {
        let out = supervised_branch(spec, policy, &phi, support_x, support_y, task, None)?;
        sgd.apply(&mut phi, &out.grads)?;
    }
    Ok(phi)
}

/// Batch accuracy at `task` over one sequential pass, no updates.
pub fn meta_test_mebqat(
    spec: &ModelSpec,
    policy: &QuantPolicy,
    params: &Params,
    task: BitwidthTask,
    ds: &LabeledDataset,
    batch_size: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in batch_iter(ds, batch_size, false, false, &mut rng)? {
        let batch = batch?;
        let pred = predict(spec, policy, params, &batch.x, task)?;
        correct += pred.iter().zip(&batch.y).filter(|(p, y)| p == y).count();
    }
    Ok(if ds.is_empty() {
        0.0
    } else {
        correct as f64 / ds.len() as f64
    })
}

pub fn predict(
    spec: &ModelSpec,
    policy: &QuantPolicy,
    params: &Params,
    x: &Tensor,
    task: BitwidthTask,
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let vars = bind_constants(&mut g, params);
    let xv = g.constant(x.clone());
    let logits = forward_quantized(&mut g, spec, &vars, xv, task, policy)?;
    Ok(argmax_rows(g.value(logits)))
}

/// Adapts on the support set for `steps` steps, then classifies the query.
pub fn meta_test_maml(
    spec: &ModelSpec,
    policy: &QuantPolicy,
    params: &Params,
    task: BitwidthTask,
    ep: &Episode,
    steps: usize,
    alpha: f64,
) -> Result<f64> {
    let adapted = inner_adapt(
        spec,
        policy,
        params,
        task,
        &ep.support_x,
        &ep.support_y,
        alpha,
        steps,
    )?;
    let pred = predict(spec, policy, &adapted, &ep.query_x, task)?;
    Ok(accuracy(&pred, &ep.query_y))
}

/// Nearest-prototype accuracy on the query set, no updates.
pub fn meta_test_pn(
    spec: &ModelSpec,
    policy: &QuantPolicy,
    params: &Params,
    task: BitwidthTask,
    ep: &Episode,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let vars = bind_constants(&mut g, params);
    let (_, query, protos) = pn_forward(&mut g, spec, policy, &vars, ep, task)?;
    let pred = nearest_prototype(g.value(query), g.value(protos))?;
    Ok(accuracy(&pred, &ep.query_y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model_with_width, ModelKind};
    use crate::quant::Bitwidth;

    fn toy_dataset(seed: u64, classes: usize, per: usize, size: usize) -> LabeledDataset {
        use crate::data::{generate_glyphs, GlyphConfig};
        let (img, labels) = generate_glyphs(&GlyphConfig {
            seed,
            num_classes: classes,
            samples_per_class: per,
            image_size: size,
        })
        .unwrap();
        LabeledDataset::from_idx(&img, &labels).unwrap()
    }

    fn maml_learner() -> Learner {
        let spec = build_model_with_width(ModelKind::Conv5Maml, 3, [1, 8, 8], 8).unwrap();
        Learner::new(
            spec,
            QuantPolicy::default(),
            Optimizer::adam(1e-3),
            Schedule::constant(1e-3),
            3,
        )
    }

    #[test]
    fn inner_adapt_leaves_theta_alone() {
        let l = maml_learner();
        let ds = toy_dataset(1, 3, 4, 8);
        let before = l.params.clone();
        let task = BitwidthTask::new(Bitwidth::Int(2), Bitwidth::Int(4));
        let b = ds.batch(&[0, 1, 2]).unwrap();
        let phi = inner_adapt(&l.spec, &l.policy, &l.params, task, &b.x, &b.y, 0.1, 3).unwrap();
        assert_eq!(l.params, before);
        assert_ne!(phi, before);
        let same = inner_adapt(&l.spec, &l.policy, &l.params, task, &b.x, &b.y, 0.1, 0).unwrap();
        assert_eq!(same, before);
    }

    #[test]
    fn maml_counts_backprops() {
        let mut l = maml_learner();
        let ds = toy_dataset(2, 5, 6, 8);
        let cfg = MamlConfig {
            m: 4,
            tasks: BitwidthTaskSet::symmetric(vec![
                Bitwidth::Int(2),
                Bitwidth::Int(4),
                Bitwidth::Fp,
            ]),
            n: 3,
            k: 1,
            q: 2,
            inner_steps: 2,
            inner_lr: 0.1,
            meta_test_steps: 2,
        };
        let rows = l.run_mebqat_maml_epoch(&cfg, &ds, &ds.classes()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(l.counters.backprops, 4);
        assert_eq!(l.counters.inner_backprops, 8);
        assert_eq!(l.counters.updates, 1);
        assert_eq!(l.optimizer.steps(), 1);
    }

    #[test]
    fn engines_reject_zero_branches() {
        let mut l = maml_learner();
        let ds = toy_dataset(2, 3, 4, 8);
        let cfg = MebqatConfig {
            m: 0,
            tasks: BitwidthTaskSet::symmetric(vec![Bitwidth::Fp]),
            kd: true,
            fix_first_fp: true,
            batch_size: 4,
        };
        assert!(l.run_mebqat_epoch(&cfg, &ds, 0).is_err());
    }

    #[test]
    fn pn_requires_an_embedding_compatible_episode() {
        let spec = build_model_with_width(ModelKind::Conv4Pn, 0, [1, 16, 16], 4).unwrap();
        let mut l = Learner::new(
            spec,
            QuantPolicy::default(),
            Optimizer::adam(1e-3),
            Schedule::constant(1e-3),
            0,
        );
        let ds = toy_dataset(5, 6, 4, 16);
        let cfg = PnConfig {
            m: 2,
            tasks: BitwidthTaskSet::symmetric(vec![Bitwidth::Int(4), Bitwidth::Fp]),
            n: 3,
            k: 1,
            q: 2,
        };
        let rows = l.run_mebqat_pn_epoch(&cfg, &ds, &ds.classes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.loss.is_finite() && r.kd_loss == 0.0));
        assert_eq!(l.counters.backprops, 2);
    }
}
