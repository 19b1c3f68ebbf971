//! IDX files (the MNIST / Fashion-MNIST container). Big-endian u32 magic,
//! big-endian u32 dimensions, then unsigned bytes.

use std::path::Path;

use super::{Dataset, Split, Targets};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < offset + len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: offset + len,
            found: bytes.len(),
        });
    }
    Ok(&bytes[offset..offset + len])
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = read(path)?;
    check_magic(&bytes, IMAGE_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = body(&bytes, 16, count * rows * cols, path)?.to_vec();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read(path)?;
    check_magic(&bytes, LABEL_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    Ok(body(&bytes, 8, count, path)?.to_vec())
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    let path = path.as_ref();
    if images.pixels.len() != images.count * images.rows * images.cols {
        return Err(Error::Data("pixel count does not match dimensions".into()));
    }
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads an image/label pair as `[N, 1, rows, cols]` inputs scaled to [0, 1].
pub fn load_idx<T: Real>(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let img = read_idx_images(images)?;
    let lab = read_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(Error::CountMismatch {
            images: img.count,
            labels: lab.len(),
        });
    }
    let scale = T::lit(255.0);
    let values = img.pixels.iter().map(|&p| T::lit(p as f64) / scale).collect();
    let inputs = Tensor::new(&[img.count, 1, img.rows, img.cols], values)?;
    Dataset::new(inputs, Targets::Classes(lab.into_iter().map(usize::from).collect()), split)
}
