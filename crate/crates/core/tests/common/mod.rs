//! Shared fixtures and plain (non-quantized, single-branch) training loops
//! used as references for the engines.
#![allow(dead_code)]

use bitadapt::data::{generate_glyphs, sample_episode, GlyphConfig, LabeledDataset};
use bitadapt::meta::{compute_prototypes, pn_episode_loss};
use bitadapt::models::{bind_params, collect_grads, forward_plain, ModelSpec, Params};
use bitadapt::optim::Optimizer;
use bitadapt_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn glyphs(seed: u64, classes: usize, per_class: usize, size: usize) -> LabeledDataset {
    let (images, labels) = generate_glyphs(&GlyphConfig {
        seed,
        num_classes: classes,
        samples_per_class: per_class,
        image_size: size,
    })
    .unwrap();
    LabeledDataset::from_idx(&images, &labels).unwrap()
}

fn ce_grads(spec: &ModelSpec, params: &Params, x: &Tensor, y: &[usize]) -> Params {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, params);
    let xv = g.constant(x.clone());
    let logits = forward_plain(&mut g, spec, &vars, xv).unwrap();
    let loss = g.cross_entropy(logits, y).unwrap();
    g.backward(loss).unwrap();
    collect_grads(&g, &vars)
}

/// Mini-batch training on cross-entropy with one shuffled pass per epoch.
/// Returns the parameters after every update.
pub fn plain_supervised(
    spec: &ModelSpec,
    mut params: Params,
    mut opt: Optimizer,
    ds: &LabeledDataset,
    batch_size: usize,
    data_seed: u64,
    updates: usize,
) -> Vec<Params> {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let mut out = Vec::with_capacity(updates);
    while out.len() < updates {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            if out.len() == updates {
                break;
            }
            let b = ds.batch(chunk).unwrap();
            let grads = ce_grads(spec, &params, &b.x, &b.y);
            opt.apply(&mut params, &grads).unwrap();
            out.push(params.clone());
        }
    }
    out
}

/// First-order MAML: adapt with plain SGD on the support set, then step the
/// outer optimizer with the query gradient taken at the adapted weights.
#[allow(clippy::too_many_arguments)]
pub fn plain_fomaml(
    spec: &ModelSpec,
    mut params: Params,
    mut opt: Optimizer,
    ds: &LabeledDataset,
    classes: &[usize],
    (n, k, q): (usize, usize, usize),
    inner_steps: usize,
    alpha: f64,
    data_seed: u64,
    updates: usize,
) -> Vec<Params> {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let mut out = Vec::with_capacity(updates);
    for _ in 0..updates {
        let ep = sample_episode(ds, classes, n, k, q, &mut rng).unwrap();
        let mut phi = params.clone();
        for _ in 0..inner_steps {
            let g = ce_grads(spec, &phi, &ep.support_x, &ep.support_y);
            for (name, w) in phi.iter_mut() {
                for (wi, gi) in w.data_mut().iter_mut().zip(g[name].data()) {
                    *wi = (*wi as f64 - alpha * *gi as f64) as f32;
                }
            }
        }
        let g = ce_grads(spec, &phi, &ep.query_x, &ep.query_y);
        opt.apply(&mut params, &g).unwrap();
        out.push(params.clone());
    }
    out
}

/// Prototypical-network training, one episode per update.
#[allow(clippy::too_many_arguments)]
pub fn plain_protonet(
    spec: &ModelSpec,
    mut params: Params,
    mut opt: Optimizer,
    ds: &LabeledDataset,
    classes: &[usize],
    (n, k, q): (usize, usize, usize),
    data_seed: u64,
    updates: usize,
) -> Vec<Params> {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let mut out = Vec::with_capacity(updates);
    for _ in 0..updates {
        let ep = sample_episode(ds, classes, n, k, q, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &params);
        let x = Tensor::concat_rows(&[&ep.support_x, &ep.query_x]).unwrap();
        let xv = g.constant(x);
        let emb = forward_plain(&mut g, spec, &vars, xv).unwrap();
        let ns = ep.support_y.len();
        let support = g.slice_rows(emb, 0, ns).unwrap();
        let query = g.slice_rows(emb, ns, ns + ep.query_y.len()).unwrap();
        let protos = compute_prototypes(&mut g, support, &ep.support_y, n, k).unwrap();
        let loss = pn_episode_loss(&mut g, query, &ep.query_y, protos, n, k).unwrap();
        g.backward(loss).unwrap();
        let grads = collect_grads(&g, &vars);
        opt.apply(&mut params, &grads).unwrap();
        out.push(params.clone());
    }
    out
}

/// Bit patterns of every parameter, for exact comparison.
pub fn bits(params: &Params) -> Vec<(String, Vec<u32>)> {
    params
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}
