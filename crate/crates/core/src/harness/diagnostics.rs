//! Finite-difference checks of every differentiable primitive and of two small
//! end-to-end models, run in `f64`.

use std::time::{Duration, Instant};

use bitadapt_tensor::gradcheck::{grad_check_with, GradCheckOptions, GradCheckStatus};
use bitadapt_tensor::{Graph, Tensor, Var, BN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::meta::{kd_loss, pn_forward};
use crate::models::{
    build_model_with_width, forward_quantized, ModelKind, ModelSpec, Params, QuantPolicy,
};
use crate::quant::{Bitwidth, BitwidthTask};

/// Aggregate over all trials of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub trials: usize,
    pub failed_trials: usize,
    pub max_rel_error: f64,
    pub skipped_kinks: usize,
    pub elapsed: Duration,
    /// The case contains straight-through ops, whose gradients are defined
    /// rather than numeric; it is reported but not judged.
    pub excluded: bool,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.excluded || self.failed_trials == 0
    }
}

type Loss = Box<dyn Fn(&mut Graph<f64>, Var) -> bitadapt_tensor::Result<Var>>;

struct Case {
    name: &'static str,
    point: Tensor<f64>,
    f: Loss,
    eps: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `sum(r ⊙ y)` for a fixed random `r`.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> bitadapt_tensor::Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

fn unary_case(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    out_shape: &[usize],
    op: impl Fn(&mut Graph<f64>, Var) -> bitadapt_tensor::Result<Var> + 'static,
) -> Case {
    let point = uniform(rng, shape, -2.0, 2.0);
    let r = uniform(rng, out_shape, -1.0, 1.0);
    Case {
        name,
        point,
        f: Box::new(move |g, x| {
            let y = op(g, x)?;
            project(g, y, &r)
        }),
        eps: 1e-5,
    }
}

/// Checks `op(a, b)` against its first argument (`swap = false`) or second.
#[allow(clippy::too_many_arguments)]
fn binary_case(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    wrt_b: bool,
    op: impl Fn(&mut Graph<f64>, Var, Var) -> bitadapt_tensor::Result<Var> + 'static,
) -> Case {
    let a = uniform(rng, a_shape, -2.0, 2.0);
    let b = uniform(rng, b_shape, 0.5, 2.0);
    let r = uniform(rng, out_shape, -1.0, 1.0);
    let (point, other) = if wrt_b { (b, a) } else { (a, b) };
    Case {
        name,
        point,
        f: Box::new(move |g, x| {
            let o = g.constant(other.clone());
            let y = if wrt_b { op(g, o, x)? } else { op(g, x, o)? };
            project(g, y, &r)
        }),
        eps: 1e-5,
    }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    let picks = labels.clone();
    vec![
        binary_case("add", rng, &[3, 4], &[3, 4], &[3, 4], false, |g, a, b| {
            g.add(a, b)
        }),
        binary_case(
            "sub.lhs",
            rng,
            &[3, 4],
            &[3, 4],
            &[3, 4],
            false,
            |g, a, b| g.sub(a, b),
        ),
        binary_case(
            "sub.rhs",
            rng,
            &[3, 4],
            &[3, 4],
            &[3, 4],
            true,
            |g, a, b| g.sub(a, b),
        ),
        binary_case("mul", rng, &[3, 4], &[3, 4], &[3, 4], false, |g, a, b| {
            g.mul(a, b)
        }),
        binary_case(
            "add_bias.x",
            rng,
            &[2, 3, 2, 2],
            &[3],
            &[2, 3, 2, 2],
            false,
            |g, a, b| g.add_bias(a, b),
        ),
        binary_case(
            "add_bias.bias",
            rng,
            &[2, 3, 2, 2],
            &[3],
            &[2, 3, 2, 2],
            true,
            |g, a, b| g.add_bias(a, b),
        ),
        unary_case(
            "affine",
            rng,
            &[5],
            &[5],
            |g, x| Ok(g.affine(x, -1.5, 0.25)),
        ),
        binary_case("mul_scalar.x", rng, &[6], &[1], &[6], false, |g, a, s| {
            g.mul_scalar(a, s)
        }),
        binary_case("mul_scalar.s", rng, &[6], &[1], &[6], true, |g, a, s| {
            g.mul_scalar(a, s)
        }),
        binary_case("div_scalar.x", rng, &[6], &[1], &[6], false, |g, a, s| {
            g.div_scalar(a, s)
        }),
        binary_case("div_scalar.s", rng, &[6], &[1], &[6], true, |g, a, s| {
            g.div_scalar(a, s)
        }),
        binary_case(
            "matmul.lhs",
            rng,
            &[3, 4],
            &[4, 2],
            &[3, 2],
            false,
            |g, a, b| g.matmul(a, b),
        ),
        binary_case(
            "matmul.rhs",
            rng,
            &[3, 4],
            &[4, 2],
            &[3, 2],
            true,
            |g, a, b| g.matmul(a, b),
        ),
        binary_case(
            "conv2d.x",
            rng,
            &[2, 2, 5, 5],
            &[3, 2, 3, 3],
            &[2, 3, 3, 3],
            false,
            |g, x, w| g.conv2d(x, w, 2, 1),
        ),
        binary_case(
            "conv2d.w",
            rng,
            &[2, 2, 5, 5],
            &[3, 2, 3, 3],
            &[2, 3, 5, 5],
            true,
            |g, x, w| g.conv2d(x, w, 1, 1),
        ),
        unary_case("max_pool2d", rng, &[2, 2, 5, 5], &[2, 2, 3, 3], |g, x| {
            g.max_pool2d(x, 2, 2, true)
        }),
        unary_case("relu", rng, &[8], &[8], |g, x| Ok(g.relu(x))),
        unary_case("tanh", rng, &[8], &[8], |g, x| Ok(g.tanh(x))),
        unary_case("abs", rng, &[8], &[8], |g, x| Ok(g.abs(x))),
        unary_case("clip", rng, &[8], &[8], |g, x| Ok(g.clip(x, -0.5, 1.0))),
        unary_case("sum", rng, &[2, 3], &[], |g, x| Ok(g.sum(x))),
        unary_case("mean", rng, &[2, 3], &[], |g, x| Ok(g.mean(x))),
        unary_case("max_all", rng, &[7], &[], |g, x| Ok(g.max_all(x))),
        unary_case("softmax", rng, &[3, 4], &[3, 4], |g, x| g.softmax(x, 1)),
        unary_case("log_softmax", rng, &[3, 4], &[3, 4], |g, x| {
            g.log_softmax(x, 0)
        }),
        {
            let gamma = uniform(rng, &[3], 0.5, 1.5);
            let beta = uniform(rng, &[3], -0.5, 0.5);
            unary_case(
                "batch_norm.x",
                rng,
                &[4, 3, 2, 2],
                &[4, 3, 2, 2],
                move |g, x| {
                    let (gv, bv) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                    g.batch_norm(x, gv, bv, BN_EPS)
                },
            )
        },
        {
            let x = uniform(rng, &[5, 3], -2.0, 2.0);
            unary_case("batch_norm.gamma", rng, &[3], &[5, 3], move |g, gamma| {
                let xv = g.constant(x.clone());
                let beta = g.constant(Tensor::zeros(&[3]));
                g.batch_norm(xv, gamma, beta, BN_EPS)
            })
        },
        binary_case(
            "sq_dist.lhs",
            rng,
            &[4, 3],
            &[2, 3],
            &[4, 2],
            false,
            |g, a, b| g.sq_dist(a, b),
        ),
        binary_case(
            "sq_dist.rhs",
            rng,
            &[4, 3],
            &[2, 3],
            &[4, 2],
            true,
            |g, a, b| g.sq_dist(a, b),
        ),
        unary_case("pick", rng, &[4, 5], &[4], move |g, x| g.pick(x, &picks)),
        unary_case("slice_rows", rng, &[5, 2], &[2, 2], |g, x| {
            g.slice_rows(x, 1, 3)
        }),
        unary_case("reshape", rng, &[2, 6], &[3, 4], |g, x| {
            g.reshape(x, &[3, 4])
        }),
        {
            let point = uniform(rng, &[4, 5], -3.0, 3.0);
            Case {
                name: "cross_entropy",
                point,
                f: Box::new(move |g, x| g.cross_entropy(x, &labels)),
                eps: 1e-5,
            }
        },
    ]
}

/// Concatenates all parameters into one flat vector.
fn flatten(params: &Params<f64>) -> Tensor<f64> {
    Tensor::from_vec(
        params
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect(),
    )
}

/// Splits a flat parameter leaf back into named graph values.
fn unflatten(
    g: &mut Graph<f64>,
    flat: Var,
    shapes: &[(String, Vec<usize>)],
) -> bitadapt_tensor::Result<crate::models::ParamVars> {
    let mut vars = crate::models::ParamVars::new();
    let mut at = 0;
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let part = g.slice_rows(flat, at, at + n)?;
        vars.insert(name.clone(), g.reshape(part, shape)?);
        at += n;
    }
    Ok(vars)
}

fn model_params(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Params<f64> {
    let mut params: Params<f64> = crate::models::cast_params(&spec.init_params(rng));
    // move BN scale/shift off their init values so their gradients are generic
    for (name, t) in params.iter_mut() {
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    params
}

fn classifier_case(rng: &mut ChaCha8Rng, task: BitwidthTask, name: &'static str) -> Case {
    let spec = build_model_with_width(ModelKind::Conv5Maml, 5, [1, 8, 8], 2).unwrap();
    let params = model_params(&spec, rng);
    let x = uniform(rng, &[6, 1, 8, 8], 0.0, 1.0);
    let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
    let teacher = uniform(rng, &[6, 5], -2.0, 2.0);
    let shapes = spec.param_shapes();
    Case {
        name,
        point: flatten(&params),
        f: Box::new(move |g, flat| {
            let vars = unflatten(g, flat, &shapes)?;
            let xv = g.constant(x.clone());
            let logits = forward_quantized(g, &spec, &vars, xv, task, &QuantPolicy::default())
                .map_err(Error::into_tensor_error)?;
            let ce = g.cross_entropy(logits, &labels)?;
            let kd = kd_loss(g, logits, &teacher).map_err(Error::into_tensor_error)?;
            g.add(ce, kd)
        }),
        eps: 1e-5,
    }
}

/// Prototypical loss on an embedding network; `conv5-maml` uses its logits
/// as the embedding.
fn prototype_case(rng: &mut ChaCha8Rng, kind: ModelKind, side: usize, name: &'static str) -> Case {
    let outputs = if kind == ModelKind::Conv4Pn { 0 } else { 5 };
    let spec = build_model_with_width(kind, outputs, [1, side, side], 2).unwrap();
    let params = model_params(&spec, rng);
    let (n, k, q) = (3, 2, 2);
    let episode = Episode {
        classes: (0..n).collect(),
        n,
        k,
        q,
        support_x: uniform(rng, &[n * k, 1, side, side], 0.0, 1.0).cast(),
        support_y: (0..n).flat_map(|c| [c; 2]).collect(),
        support_idx: (0..n * k).collect(),
        query_x: uniform(rng, &[n * q, 1, side, side], 0.0, 1.0).cast(),
        query_y: (0..n).flat_map(|c| [c; 2]).collect(),
        query_idx: (n * k..n * (k + q)).collect(),
    };
    let shapes = spec.param_shapes();
    Case {
        name,
        point: flatten(&params),
        f: Box::new(move |g, flat| {
            let vars = unflatten(g, flat, &shapes)?;
            let (loss, _, _) = pn_forward(
                g,
                &spec,
                &QuantPolicy::default(),
                &vars,
                &episode,
                BitwidthTask::FP,
            )
            .map_err(Error::into_tensor_error)?;
            Ok(loss)
        }),
        eps: 1e-5,
    }
}

fn model_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    vec![
        classifier_case(rng, BitwidthTask::FP, "model.conv5-maml.ce+kd"),
        prototype_case(
            rng,
            ModelKind::Conv5Maml,
            8,
            "model.conv5-maml.prototypical",
        ),
        prototype_case(rng, ModelKind::Conv4Pn, 16, "model.conv4-pn.prototypical"),
    ]
}

fn ste_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let task = BitwidthTask::new(Bitwidth::Int(2), Bitwidth::Int(4));
    vec![classifier_case(rng, task, "model.conv5-maml.quantized")]
}

/// Which families of cases to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteSelection {
    pub primitives: bool,
    pub models: bool,
    pub ste: bool,
}

impl Default for SuiteSelection {
    fn default() -> Self {
        SuiteSelection {
            primitives: true,
            models: true,
            ste: true,
        }
    }
}

/// Runs every selected case for `trials` seeded random points.
pub fn gradcheck_suite(
    seed: u64,
    trials: usize,
    tol: f64,
    which: SuiteSelection,
) -> Result<Vec<CaseReport>> {
    let mut reports: Vec<CaseReport> = Vec::new();
    for trial in 0..trials {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(trial as u64));
        let mut cases = Vec::new();
        if which.primitives {
            cases.extend(primitive_cases(&mut rng));
        }
        if which.models {
            cases.extend(model_cases(&mut rng));
        }
        if which.ste {
            cases.extend(ste_cases(&mut rng));
        }
        for (i, case) in cases.into_iter().enumerate() {
            let opts = GradCheckOptions {
                eps: case.eps,
                tol,
                ..Default::default()
            };
            let start = Instant::now();
            let report = grad_check_with(&case.f, &case.point, opts)?;
            let elapsed = start.elapsed();
            if reports.len() <= i {
                reports.push(CaseReport {
                    name: case.name.to_string(),
                    trials: 0,
                    failed_trials: 0,
                    max_rel_error: 0.0,
                    skipped_kinks: 0,
                    elapsed: Duration::ZERO,
                    excluded: false,
                });
            }
            let agg = &mut reports[i];
            agg.trials += 1;
            agg.elapsed += elapsed;
            agg.skipped_kinks += report.skipped_kinks;
            agg.excluded |= report.status == GradCheckStatus::ExcludedSte;
            agg.max_rel_error = agg.max_rel_error.max(report.max_rel_error);
            if report.status == GradCheckStatus::Fail {
                agg.failed_trials += 1;
            }
        }
    }
    Ok(reports)
}
