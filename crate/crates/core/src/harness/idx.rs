//! MNIST IDX files (optionally gzip-compressed).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Result, TameError};
use crate::tensor::Tensor;

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)
        .map_err(|e| TameError::format(format!("cannot read {}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| TameError::format(format!("bad gzip in {}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| TameError::format("truncated IDX header"))
}

/// Parses an IDX3 image file into `[n, 1, rows, cols]`, scaled to [0, 1] and standardised
/// with the MNIST mean and standard deviation.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(TameError::format(format!(
            "bad IDX image magic {magic:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let len = n * rows * cols;
    if body.len() < len {
        return Err(TameError::format(format!(
            "truncated IDX images: expected {len} pixels, found {}",
            body.len()
        )));
    }
    let data = body[..len]
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(TameError::format(format!(
            "bad IDX label magic {magic:#010x}"
        )));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(TameError::format(format!(
            "truncated IDX labels: expected {n}, found {}",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|&l| l as usize).collect())
}

/// Loads a matching pair of image and label files.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>)> {
    let x = parse_idx_images(&read_maybe_gz(images)?)?;
    let y = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if x.rows() != y.len() {
        return Err(TameError::format(format!(
            "{} images but {} labels",
            x.rows(),
            y.len()
        )));
    }
    Ok((x, y))
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(TameError::format(format!(
        "{stem}[.gz] not found in {}",
        dir.display()
    )))
}

/// Loads the four standard MNIST files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Mnist> {
    let (train_x, train_y) = load_idx(
        &find(dir, "train-images-idx3-ubyte")?,
        &find(dir, "train-labels-idx1-ubyte")?,
    )?;
    let (test_x, test_y) = load_idx(
        &find(dir, "t10k-images-idx3-ubyte")?,
        &find(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok(Mnist {
        train_x,
        train_y,
        test_x,
        test_y,
    })
}
