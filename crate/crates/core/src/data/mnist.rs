//! Reader for the IDX files that MNIST ships in.

use std::path::{Path, PathBuf};

use super::StyledSample;
use crate::error::{FedError, Result};
use crate::nn::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Which half of the canonical MNIST distribution to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn prefix(self) -> &'static str {
        match self {
            MnistSplit::Train => "train",
            MnistSplit::Test => "t10k",
        }
    }
}

/// Paths of the image and label files for `split` inside `dir`.
pub fn mnist_paths(dir: &Path, split: MnistSplit) -> (PathBuf, PathBuf) {
    let p = split.prefix();
    (
        dir.join(format!("{p}-images-idx3-ubyte")),
        dir.join(format!("{p}-labels-idx1-ubyte")),
    )
}

/// Loads one split from a directory holding the four standard files.
pub fn load_mnist_dir(dir: &Path, split: MnistSplit) -> Result<Vec<StyledSample>> {
    let (images, labels) = mnist_paths(dir, split);
    load_mnist_idx(&images, &labels)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn err(&self, offset: usize, detail: impl Into<String>) -> FedError {
        FedError::Ingest {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn u32_at(&self, offset: usize) -> Result<u32> {
        let b = self
            .bytes
            .get(offset..offset + 4)
            .ok_or_else(|| self.err(offset, "file ends inside the header"))?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_magic(&self, magic: u32) -> Result<()> {
        let found = self.u32_at(0)?;
        if found != magic {
            return Err(self.err(
                0,
                format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
            ));
        }
        Ok(())
    }

    fn body(&self, start: usize, len: usize) -> Result<&[u8]> {
        self.bytes.get(start..start + len).ok_or_else(|| {
            self.err(
                self.bytes.len(),
                format!(
                    "truncated: header promises {} bytes of data after offset {start}",
                    len
                ),
            )
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| FedError::io(path, e))
}

/// Parses an IDX image file (rank 3, unsigned bytes) into row-major images
/// scaled to [0, 1]. Returns (rows, cols, images).
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let c = Cursor { path, bytes };
    c.expect_magic(IMAGES_MAGIC)?;
    let n = c.u32_at(4)? as usize;
    let rows = c.u32_at(8)? as usize;
    let cols = c.u32_at(12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(c.err(8, "zero image dimension"));
    }
    let body = c.body(16, n * rows * cols)?;
    let images = body
        .chunks_exact(rows * cols)
        .map(|px| px.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

/// Parses an IDX label file (rank 1, unsigned bytes).
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let c = Cursor { path, bytes };
    c.expect_magic(LABELS_MAGIC)?;
    let n = c.u32_at(4)? as usize;
    Ok(c.body(8, n)?.to_vec())
}

/// Loads an image file and its label file. Styles are the digit labels.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<StyledSample>> {
    let (rows, cols, images) = parse_idx_images(images_path, &read(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &read(labels_path)?)?;
    if labels.len() != images.len() {
        return Err(FedError::Ingest {
            path: labels_path.to_path_buf(),
            offset: 4,
            detail: format!("{} labels for {} images", labels.len(), images.len()),
        });
    }
    images
        .into_iter()
        .zip(labels)
        .map(|(px, style)| {
            Ok(StyledSample {
                input: Tensor::new(vec![rows, cols], px)?,
                style: style as usize,
            })
        })
        .collect()
}
