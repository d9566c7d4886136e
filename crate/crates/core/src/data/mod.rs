//! Labeled image datasets, IDX ingestion, batching, few-shot episodes, and a
//! procedural glyph generator.

mod episode;
mod glyphs;
pub mod idx;

use std::collections::BTreeMap;
use std::path::Path;

use bitadapt_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub use episode::{sample_episode, ClassSplit, Episode};
pub use glyphs::{generate_glyphs, GlyphConfig};
pub use idx::{IdxError, IdxImages};

/// Images `[count, C, H, W]` in `[0, 1]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_index: BTreeMap<usize, Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::Other(format!(
                "images must be [count, C, H, W], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(IdxError::CountMismatch {
                images: shape[0],
                labels: labels.len(),
            }
            .into());
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Other("image values must lie in [0, 1]".into()));
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in labels.iter().enumerate() {
            class_index.entry(y).or_default().push(i);
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_index,
        })
    }

    /// Scales `u8` pixels by `1/255`.
    pub fn from_idx(images: &IdxImages, labels: &[u8]) -> Result<Self> {
        if images.count != labels.len() {
            return Err(IdxError::CountMismatch {
                images: images.count,
                labels: labels.len(),
            }
            .into());
        }
        let data = images.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        let tensor = Tensor::new(&[images.count, 1, images.rows, images.cols], data)?;
        Self::new(tensor, labels.iter().map(|&l| l as usize).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Class id → sample indices, in ascending class order.
    pub fn class_index(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.class_index
    }

    pub fn classes(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Gathers `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: self.images.select_rows(indices)?,
            y: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        })
    }

    /// Keeps only samples whose label is in `classes`, relabelled to their
    /// position in `classes`.
    pub fn restrict(&self, classes: &[usize]) -> Result<Self> {
        let mut indices = Vec::new();
        let mut labels = Vec::new();
        for (i, y) in self.labels.iter().enumerate() {
            if let Some(pos) = classes.iter().position(|c| c == y) {
                indices.push(i);
                labels.push(pos);
            }
        }
        Self::new(self.images.select_rows(&indices)?, labels)
    }
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = idx::read_images(images_path)?;
    let labels = idx::read_labels(labels_path)?;
    LabeledDataset::from_idx(&images, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Index batches covering `0..count`, shuffled when `shuffle` is set.
pub fn batch_indices<R: Rng + ?Sized>(
    count: usize,
    batch_size: usize,
    shuffle: bool,
    drop_last: bool,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Other("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..count).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// One epoch of batches over `ds`.
pub fn batch_iter<'a, R: Rng + ?Sized>(
    ds: &'a LabeledDataset,
    batch_size: usize,
    shuffle: bool,
    drop_last: bool,
    rng: &mut R,
) -> Result<impl Iterator<Item = Result<Batch>> + 'a> {
    let order = batch_indices(ds.len(), batch_size, shuffle, drop_last, rng)?;
    Ok(order.into_iter().map(move |idx| ds.batch(&idx)))
}
