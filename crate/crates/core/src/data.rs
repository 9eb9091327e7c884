// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled image datasets and the IDX (MNIST) file format.
//!
//! Pixels are stored as raw bytes and scaled by 1/255 when a batch is
//! presented to a network.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

const MNIST_SIDE: u32 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// N images of H×W bytes with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    height: usize,
    width: usize,
    classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<u8>,
        height: usize,
        width: usize,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let pixels = height * width;
        if pixels == 0 {
            return Err(Error::Data("image dimensions must be nonzero".into()));
        }
        if images.len() != labels.len() * pixels {
            return Err(Error::Data(format!(
                "{} image bytes do not hold {} images of {}x{}",
                images.len(),
                labels.len(),
                height,
                width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
            return Err(Error::Data(format!("label {bad} outside class range [0, {classes})")));
        }
        Ok(Self {
            images,
            labels,
            height,
            width,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_image(&self, index: usize) -> &[u8] {
        let n = self.feature_len();
        &self.images[index * n..(index + 1) * n]
    }

    /// Scaled pixels of the given samples, one row per sample.
    pub fn batch(&self, indices: &[usize]) -> Array2<f32> {
        let n = self.feature_len();
        let mut out = Array2::<f32>::zeros((indices.len(), n));
        for (mut row, &i) in out.rows_mut().into_iter().zip(indices) {
            for (dst, &px) in row.iter_mut().zip(self.raw_image(i)) {
                *dst = f32::from(px) / 255.0;
            }
        }
        out
    }

    /// Contiguous range of samples as a batch.
    pub fn batch_range(&self, start: usize, end: usize) -> Array2<f32> {
        let indices: Vec<usize> = (start..end).collect();
        self.batch(&indices)
    }

    /// First `count` samples (or all of them if fewer).
    pub fn head(&self, count: usize) -> Self {
        let count = count.min(self.len());
        let n = self.feature_len();
        Self {
            images: self.images[..count * n].to_vec(),
            labels: self.labels[..count].to_vec(),
            ..self.clone_meta()
        }
    }

    /// Subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.feature_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.raw_image(i));
            labels.push(self.labels[i]);
        }
        Self {
            images,
            labels,
            ..self.clone_meta()
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[usize::from(l)] += 1;
        }
        counts
    }

    fn clone_meta(&self) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            height: self.height,
            width: self.width,
            classes: self.classes,
            split: self.split,
        }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            needed: offset + 4,
            available: bytes.len(),
        })
}

/// Parse an IDX3 image file: returns (count, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_u32_be(bytes, 4, path)? as usize;
    let rows = read_u32_be(bytes, 8, path)?;
    let cols = read_u32_be(bytes, 12, path)?;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(Error::IdxDimensions {
            path: path.to_path_buf(),
            rows,
            cols,
        });
    }
    let needed = 16 + count * (rows * cols) as usize;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            needed,
            available: bytes.len(),
        });
    }
    Ok((count, rows as usize, cols as usize, bytes[16..needed].to_vec()))
}

/// Parse an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = read_u32_be(bytes, 4, path)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Load an MNIST-style image/label file pair.
pub fn load_mnist(images_path: &Path, labels_path: &Path, split: Split) -> Result<LabeledDataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let (count, rows, cols, pixels) = parse_idx_images(&image_bytes, images_path)?;
    let labels = parse_idx_labels(&label_bytes, labels_path)?;
    if labels.len() != count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    LabeledDataset::new(pixels, labels, rows, cols, 10, split)
}

/// Directory holding the four canonical MNIST files.
#[derive(Debug, Clone)]
pub struct MnistDir(pub PathBuf);

impl MnistDir {
    pub fn train(&self) -> Result<LabeledDataset> {
        load_mnist(&self.0.join(TRAIN_IMAGES), &self.0.join(TRAIN_LABELS), Split::Train)
    }

    pub fn test(&self) -> Result<LabeledDataset> {
        load_mnist(&self.0.join(TEST_IMAGES), &self.0.join(TEST_LABELS), Split::Test)
    }

    pub fn is_complete(&self) -> bool {
        [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
            .iter()
            .all(|f| self.0.join(f).is_file())
    }
}

/// Help text printed by `ablatron fetch-instructions`.
pub const FETCH_INSTRUCTIONS: &str = "\
MNIST is not bundled. Place the four uncompressed IDX files in one directory:

  train-images-idx3-ubyte   train-labels-idx1-ubyte
  t10k-images-idx3-ubyte    t10k-labels-idx1-ubyte

They are published at http://yann.lecun.com/exdb/mnist/ and mirrored by most
ML toolkits (e.g. the `mnist-data` npm package ships them under data/).
Decompress any .gz files, then pass the directory with --data DIR or set
ABLATRON_MNIST_DIR.";
