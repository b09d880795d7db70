use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};

/// Unsigned-byte tensor with three dimensions.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte tensor with one dimension.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends at byte {}", bytes.len()),
        })
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

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    let end = header.checked_add(len).ok_or_else(|| Error::Format {
        what: "IDX file",
        detail: "dimensions overflow".into(),
    })?;
    match bytes.len() {
        n if n < end => Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {end} bytes, found {n}"),
        }),
        n if n > end => Err(Error::Format {
            what: "IDX file",
            detail: format!("{} trailing bytes in {}", n - end, path.display()),
        }),
        _ => Ok(&bytes[header..end]),
    }
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let len = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format {
            what: "IDX file",
            detail: "dimensions overflow".into(),
        })?;
    Ok((n, rows, cols, payload(bytes, 16, len, path)?.to_vec()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    Ok(payload(bytes, 8, n, path)?.to_vec())
}

fn load_raw(images: &Path, labels: &Path) -> Result<(Vec<f64>, [usize; 4], Vec<usize>)> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(images)?, images)?;
    let lbl = parse_idx_labels(&read(labels)?, labels)?;
    if lbl.len() != n {
        return Err(Error::CountMismatch(format!(
            "{} has {n} images but {} has {} labels",
            images.display(),
            labels.display(),
            lbl.len()
        )));
    }
    if let Some(&l) = lbl.iter().find(|&&l| l as usize >= MNIST_CLASSES) {
        return Err(Error::Format {
            what: "IDX labels",
            detail: format!("label {l} in {} outside [0, {MNIST_CLASSES})", labels.display()),
        });
    }
    let values = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Ok((values, [n, 1, rows, cols], lbl.iter().map(|&l| l as usize).collect()))
}

/// Loads an MNIST-style IDX image/label pair, normalized with its own statistics.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (values, shape, labels) = load_raw(images, labels)?;
    Dataset::from_raw(values, shape, labels, MNIST_CLASSES, Split::Train, None)
}

/// Loads the four standard MNIST files from `dir`; the test split reuses train statistics.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let (values, shape, labels) = load_raw(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))
        .or_else(|e| match e {
            Error::Io { .. } => load_raw(&dir.join("test-images-idx3-ubyte"), &dir.join("test-labels-idx1-ubyte")),
            other => Err(other),
        })?;
    let test = Dataset::from_raw(values, shape, labels, MNIST_CLASSES, Split::Test, Some(train.stats()))?;
    Ok((train, test))
}
