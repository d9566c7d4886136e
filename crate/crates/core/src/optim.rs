//! SGD, Adam and AdamW over named parameter maps, plus learning-rate
//! schedules.

use std::f64::consts::PI;

use bitadapt_tensor::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Params;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            weight_decay,
            ..Self::new(OptimizerKind::AdamW, lr)
        }
    }

    /// Number of completed [`Optimizer::apply`] calls.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter named in `grads`. Parameters without a
    /// gradient are left alone.
    pub fn apply(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Optim(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Optim(format!(
                    "{name}: parameter shape {:?} but gradient shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = (*w as f64 - self.lr * gi as f64) as f32;
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let n = g.numel();
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
                    let decay = if self.kind == OptimizerKind::AdamW {
                        self.weight_decay
                    } else {
                        0.0
                    };
                    for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let gi = gi as f64;
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                        let (mh, vh) = (m[i] / c1, v[i] / c2);
                        let mut wf = *w as f64;
                        wf -= self.lr * decay * wf;
                        wf -= self.lr * mh / (vh.sqrt() + self.eps);
                        *w = wf as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(1/n)·Σ grads[i]`, accumulated in `f64` in slice order.
pub fn average_grads(grads: &[Params]) -> Result<Params> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Optim("no gradients to average".into()))?;
    let n = grads.len() as f64;
    let mut out = Params::new();
    for (name, t) in first {
        let mut acc = vec![0.0f64; t.numel()];
        for g in grads {
            let gt = g
                .get(name)
                .filter(|gt| gt.shape() == t.shape())
                .ok_or_else(|| Error::Optim(format!("branch gradients disagree on {name}")))?;
            for (a, &v) in acc.iter_mut().zip(gt.data()) {
                *a += v as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / n) as f32).collect();
        out.insert(name.clone(), Tensor::new(t.shape(), data)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    StepDecay { milestones: Vec<u64>, factor: f64 },
    Cosine { t_max: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, base: f64) -> Result<Self> {
        match &kind {
            ScheduleKind::StepDecay { milestones, factor } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Optim(
                        "milestones must be strictly increasing".into(),
                    ));
                }
                if !(*factor > 0.0 && *factor < 1.0) {
                    return Err(Error::Optim(format!(
                        "decay factor {factor} is outside (0, 1)"
                    )));
                }
            }
            ScheduleKind::Cosine { t_max } if *t_max == 0 => {
                return Err(Error::Optim("cosine t_max must be positive".into()))
            }
            _ => {}
        }
        Ok(Schedule { kind, base })
    }

    pub fn constant(base: f64) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            base,
        }
    }

    /// Learning rate for `epoch`. Cosine stays at 0 past `t_max`.
    pub fn rate_at(&self, epoch: u64) -> f64 {
        match &self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::StepDecay { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                self.base * factor.powi(passed as i32)
            }
            ScheduleKind::Cosine { t_max } => {
                let e = epoch.min(*t_max) as f64;
                self.base * (1.0 + (PI * e / *t_max as f64).cos()) / 2.0
            }
        }
    }
}
