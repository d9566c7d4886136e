use bitadapt_tensor::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

/// Batch-mean `KL(softmax(teacher) ‖ softmax(student))` with the teacher
/// treated as a constant. Identical logits give exactly zero.
pub fn kd_loss<T: Real>(g: &mut Graph<T>, student: Var, teacher_logits: &Tensor<T>) -> Result<Var> {
    let shape = g.shape(student).to_vec();
    if shape.len() != 2 || teacher_logits.shape() != shape.as_slice() {
        return Err(bitadapt_tensor::TensorError::ShapeMismatch {
            op: "kd_loss",
            lhs: shape,
            rhs: teacher_logits.shape().to_vec(),
        }
        .into());
    }
    let teacher_logp = {
        let mut tg = Graph::<T>::new();
        let t = tg.constant(teacher_logits.clone());
        let lp = tg.log_softmax(t, 1)?;
        tg.value(lp).clone()
    };
    let teacher_p = teacher_logp.map(|v| v.exp());
    let lt = g.constant(teacher_logp);
    let pt = g.constant(teacher_p);
    let ls = g.log_softmax(student, 1)?;
    let diff = g.sub(lt, ls)?;
    let weighted = g.mul(pt, diff)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, T::of(1.0 / shape[0] as f64)))
}

/// Per-class mean of `support: [N·K, D]`, returned as `[N, D]`.
pub fn compute_prototypes<T: Real>(
    g: &mut Graph<T>,
    support: Var,
    labels: &[usize],
    n: usize,
    k: usize,
) -> Result<Var> {
    let rows = g.shape(support).first().copied().unwrap_or(0);
    if rows != labels.len() {
        return Err(Error::Episode(format!(
            "{rows} support embeddings but {} labels",
            labels.len()
        )));
    }
    let mut counts = vec![0usize; n];
    for &y in labels {
        if y >= n {
            return Err(Error::Episode(format!("support label {y} outside 0..{n}")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c != k) {
        return Err(Error::Episode(format!(
            "class {c} has {} support samples, expected K = {k}",
            counts[c]
        )));
    }
    let inv = T::of(1.0 / k as f64);
    let mut avg = vec![T::zero(); n * rows];
    for (i, &y) in labels.iter().enumerate() {
        avg[y * rows + i] = inv;
    }
    let a = g.constant(Tensor::new(&[n, rows], avg)?);
    Ok(g.matmul(a, support)?)
}

/// `(1/(N·K)) Σ_query [d(e, c_y) + log Σ_n' exp(-d(e, c_n'))]` with `d` the
/// squared Euclidean distance.
pub fn pn_episode_loss<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    labels: &[usize],
    prototypes: Var,
    n: usize,
    k: usize,
) -> Result<Var> {
    let d = g.sq_dist(query, prototypes)?;
    let neg = g.neg(d);
    let logp = g.log_softmax(neg, 1)?;
    let picked = g.pick(logp, labels)?;
    let total = g.sum(picked);
    Ok(g.scale(total, T::of(-1.0 / (n * k) as f64)))
}

/// Index of the nearest prototype per query row; ties go to the lowest index.
pub fn nearest_prototype<T: Real>(query: &Tensor<T>, prototypes: &Tensor<T>) -> Result<Vec<usize>> {
    let (qs, ps) = (query.shape(), prototypes.shape());
    if qs.len() != 2 || ps.len() != 2 || qs[1] != ps[1] {
        return Err(bitadapt_tensor::TensorError::ShapeMismatch {
            op: "nearest_prototype",
            lhs: qs.to_vec(),
            rhs: ps.to_vec(),
        }
        .into());
    }
    let dim = qs[1];
    Ok(query
        .data()
        .chunks(dim)
        .map(|e| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in prototypes.data().chunks(dim).enumerate() {
                let d: f64 = e
                    .iter()
                    .zip(c)
                    .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                    .sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect())
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let cols = logits.shape().last().copied().unwrap_or(1);
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}
