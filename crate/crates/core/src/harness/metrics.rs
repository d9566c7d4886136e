use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::Bitwidth;

pub const METRICS_HEADER: &str = "epoch,branch,b_w,b_a,loss,kd_loss,accuracy,backprops,wall_ms";

/// One branch of one logged step. `epoch` is the outer-update index;
/// `backprops` is the run's meta-gradient backward-pass total after this row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    pub branch: usize,
    pub b_w: Bitwidth,
    pub b_a: Bitwidth,
    pub loss: f64,
    pub kd_loss: f64,
    pub accuracy: f64,
    pub backprops: u64,
    pub wall_ms: u64,
}

/// CSV text with a header line and six-decimal reals.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{},{}",
            r.epoch, r.branch, r.b_w, r.b_a, r.loss, r.kd_loss, r.accuracy, r.backprops, r.wall_ms
        )
        .unwrap();
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}
