use std::path::Path;

use serde::Serialize;

use super::checkpoint::{read_checkpoint, read_checkpoint_meta, CheckpointMeta};
use crate::error::{Error, Result};
use crate::models::{build_model_with_width, ModelSpec, Params};

/// Training and storage cost of one checkpointed run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    /// Number of bitwidth pairs the run can be evaluated at.
    pub t: usize,
    pub m: usize,
    pub theta_params: usize,
    /// Raw tensor payload in bytes: four per parameter.
    pub theta_bytes: usize,
    pub checkpoint_bytes: usize,
    /// Fraction of parameters that belong to batch-norm layers.
    pub zeta: f64,
    pub updates: u64,
    pub backprops_total: u64,
    pub backprops_per_update: f64,
    /// Distinct parameter sets stored; always 1 for a valid checkpoint.
    pub parameter_sets: usize,
}

/// Rebuilds the architecture recorded in the sidecar metadata.
pub fn spec_from_meta(meta: &CheckpointMeta) -> Result<ModelSpec> {
    build_model_with_width(meta.model_kind, meta.outputs, meta.input_shape, meta.width)
}

/// Checks that `params` holds exactly one tensor per parameter of `spec`.
pub fn check_single_parameter_set(spec: &ModelSpec, params: &Params) -> Result<()> {
    let expected = spec.param_shapes();
    if params.len() != expected.len() {
        return Err(Error::Model(format!(
            "checkpoint holds {} tensors, the {} architecture has {}",
            params.len(),
            spec.kind,
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        match params.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Model(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::Model(format!("checkpoint is missing {name}"))),
        }
    }
    Ok(())
}

pub fn cost_report(
    spec: &ModelSpec,
    params: &Params,
    meta: &CheckpointMeta,
    checkpoint_bytes: usize,
) -> Result<CostReport> {
    check_single_parameter_set(spec, params)?;
    let theta_params: usize = params.values().map(|t| t.numel()).sum();
    Ok(CostReport {
        t: meta.tasks.len(),
        m: meta.m,
        theta_params,
        theta_bytes: 4 * theta_params,
        checkpoint_bytes,
        zeta: if theta_params == 0 {
            0.0
        } else {
            spec.bn_param_count() as f64 / theta_params as f64
        },
        updates: meta.updates,
        backprops_total: meta.backprops_total,
        backprops_per_update: if meta.updates == 0 {
            0.0
        } else {
            meta.backprops_total as f64 / meta.updates as f64
        },
        parameter_sets: 1,
    })
}

/// Reads a checkpoint and its metadata and reports its cost.
pub fn report_cost(path: &Path) -> Result<CostReport> {
    let params = read_checkpoint(path)?;
    let meta = read_checkpoint_meta(path)?;
    let bytes = std::fs::metadata(path)
        .map_err(|e| Error::io(path, e))?
        .len() as usize;
    let spec = spec_from_meta(&meta)?;
    cost_report(&spec, &params, &meta, bytes)
}
