use bitadapt_tensor::Tensor;
use rand::seq::index;
use rand::Rng;

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Disjoint meta-train and meta-test class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub meta_train: Vec<usize>,
    pub meta_test: Vec<usize>,
}

impl ClassSplit {
    pub fn new(ds: &LabeledDataset, meta_train: Vec<usize>, meta_test: Vec<usize>) -> Result<Self> {
        if let Some(c) = meta_train.iter().find(|c| meta_test.contains(c)) {
            return Err(Error::Episode(format!("class {c} is in both splits")));
        }
        if let Some(c) = meta_train
            .iter()
            .chain(&meta_test)
            .find(|c| !ds.class_index().contains_key(c))
        {
            return Err(Error::Episode(format!(
                "class {c} does not occur in the dataset"
            )));
        }
        Ok(ClassSplit {
            meta_train,
            meta_test,
        })
    }

    /// The first `n_train` classes (ascending id) train, the rest test.
    pub fn first(ds: &LabeledDataset, n_train: usize) -> Result<Self> {
        let classes = ds.classes();
        if n_train > classes.len() {
            return Err(Error::Episode(format!(
                "cannot take {n_train} training classes from {}",
                classes.len()
            )));
        }
        let (train, test) = classes.split_at(n_train);
        Self::new(ds, train.to_vec(), test.to_vec())
    }
}

/// An N-way K-shot task. Support and query are stored class-major with labels
/// remapped to `0..N` in the order of `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub support_idx: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub query_idx: Vec<usize>,
}

pub fn sample_episode<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    classes: &[usize],
    n: usize,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n == 0 || k == 0 || q == 0 {
        return Err(Error::Episode(format!(
            "N={n}, K={k}, Q={q} must all be positive"
        )));
    }
    if classes.len() < n {
        return Err(Error::Episode(format!(
            "{n}-way episode needs {n} classes, split has {}",
            classes.len()
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, classes.len(), n)
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let mut support_idx = Vec::with_capacity(n * k);
    let mut query_idx = Vec::with_capacity(n * q);
    for &c in &chosen {
        let pool = ds
            .class_index()
            .get(&c)
            .ok_or_else(|| Error::Episode(format!("class {c} has no samples")))?;
        if pool.len() < k + q {
            return Err(Error::Episode(format!(
                "class {c} has {} samples, needs K+Q = {}",
                pool.len(),
                k + q
            )));
        }
        let picks = index::sample(rng, pool.len(), k + q).into_vec();
        support_idx.extend(picks[..k].iter().map(|&i| pool[i]));
        query_idx.extend(picks[k..].iter().map(|&i| pool[i]));
    }
    Ok(Episode {
        support_x: ds.images().select_rows(&support_idx)?,
        support_y: (0..n).flat_map(|j| std::iter::repeat_n(j, k)).collect(),
        query_x: ds.images().select_rows(&query_idx)?,
        query_y: (0..n).flat_map(|j| std::iter::repeat_n(j, q)).collect(),
        classes: chosen,
        n,
        k,
        q,
        support_idx,
        query_idx,
    })
}
