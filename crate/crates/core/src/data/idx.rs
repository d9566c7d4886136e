//! The IDX container used by MNIST: a big-endian `u32` magic, one big-endian
//! `u32` per dimension, then raw `u8` payload.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, needed {needed} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Decoded image file: `count` images of `rows × cols` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let truncated = |needed: usize| IdxError::Truncated {
        path: path.into(),
        needed,
        found: bytes.len(),
    };
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    if word(0) != magic {
        return Err(IdxError::BadMagic {
            path: path.into(),
            expected: magic,
            found: word(0),
        });
    }
    let needed = 4 * (1 + dims);
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

fn payload<'a>(
    path: &Path,
    bytes: &'a [u8],
    offset: usize,
    len: usize,
) -> Result<&'a [u8], IdxError> {
    bytes.get(offset..offset + len).ok_or(IdxError::Truncated {
        path: path.into(),
        needed: offset + len,
        found: bytes.len(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.into(),
        source,
    })
}

pub fn parse_images(path: &Path, bytes: &[u8]) -> Result<IdxImages, IdxError> {
    let dims = header(path, bytes, IMAGES_MAGIC, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let len = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or(IdxError::Truncated {
            path: path.into(),
            needed: usize::MAX,
            found: bytes.len(),
        })?;
    let pixels = payload(path, bytes, 16, len)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let count = header(path, bytes, LABELS_MAGIC, 1)?[0];
    Ok(payload(path, bytes, 8, count)?.to_vec())
}

pub fn read_images(path: &Path) -> Result<IdxImages, IdxError> {
    parse_images(path, &read(path)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>, IdxError> {
    parse_labels(path, &read(path)?)
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for w in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_images(path: &Path, images: &IdxImages) -> Result<(), IdxError> {
    fs::write(path, encode_images(images)).map_err(|source| IdxError::Io {
        path: path.into(),
        source,
    })
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<(), IdxError> {
    fs::write(path, encode_labels(labels)).map_err(|source| IdxError::Io {
        path: path.into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_then_parse() {
        let images = IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: (0..12).collect(),
        };
        let bytes = encode_images(&images);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(parse_images(Path::new("x"), &bytes).unwrap(), images);
        let labels = encode_labels(&[7, 1]);
        assert_eq!(labels, vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 1]);
        assert_eq!(parse_labels(Path::new("y"), &labels).unwrap(), vec![7, 1]);
    }

    #[test]
    fn error_paths() {
        let p = Path::new("f");
        assert!(matches!(
            parse_images(p, &[]),
            Err(IdxError::Truncated { .. })
        ));
        assert!(matches!(
            parse_labels(p, &[0, 0, 8]),
            Err(IdxError::Truncated { .. })
        ));
        let labels = encode_labels(&[1, 2, 3]);
        assert!(matches!(
            parse_images(p, &labels),
            Err(IdxError::BadMagic { found: 0x801, .. })
        ));
        assert!(matches!(
            parse_labels(p, &labels[..10]),
            Err(IdxError::Truncated { .. })
        ));
        assert!(parse_labels(p, &[])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }
}
