use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    /// Records of one label byte plus the image.
    Cifar10,
    /// Records of a coarse and a fine label byte plus the image.
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn files(self, split: Split) -> Vec<String> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
            (CifarVariant::Cifar100, Split::Train) => vec!["train.bin".into()],
            (CifarVariant::Cifar100, Split::Test) => vec!["test.bin".into()],
        }
    }
}

impl fmt::Display for CifarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100 => "cifar100",
        })
    }
}

impl FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            _ => Err(Error::InvalidArgument(format!("unknown CIFAR variant `{s}`"))),
        }
    }
}

/// Decoded CIFAR records: `(fine labels, coarse labels, pixels)`. Coarse labels
/// are empty for CIFAR-10.
pub type CifarRecords = (Vec<u8>, Vec<u8>, Vec<u8>);

/// Parses the records of one binary batch file.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, path: &Path) -> Result<CifarRecords> {
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!(
                "{} bytes is not a positive multiple of the {rec}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut fine = Vec::with_capacity(n);
    let mut coarse = Vec::new();
    let mut pixels = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let (label, coarse_label) = match variant {
            CifarVariant::Cifar10 => (r[0], None),
            CifarVariant::Cifar100 => (r[1], Some(r[0])),
        };
        if label as usize >= variant.num_classes() {
            return Err(Error::Format {
                what: "CIFAR record",
                detail: format!("record {i} of {}: label {label}", path.display()),
            });
        }
        if let Some(c) = coarse_label {
            if c >= 20 {
                return Err(Error::Format {
                    what: "CIFAR record",
                    detail: format!("record {i} of {}: coarse label {c}", path.display()),
                });
            }
            coarse.push(c);
        }
        fine.push(label);
        pixels.extend_from_slice(&r[variant.label_bytes()..]);
    }
    Ok((fine, coarse, pixels))
}

fn load_records(dir: &Path, variant: CifarVariant, split: Split) -> Result<CifarRecords> {
    let (mut fine, mut coarse, mut pixels) = (Vec::new(), Vec::new(), Vec::new());
    for name in variant.files(split) {
        let path = dir.join(&name);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Truncated {
                path: path.clone(),
                detail: "batch file missing".into(),
            },
            _ => Error::io(&path, e),
        })?;
        let (f, c, p) = parse_cifar(&bytes, variant, &path)?;
        fine.extend(f);
        coarse.extend(c);
        pixels.extend(p);
    }
    Ok((fine, coarse, pixels))
}

fn to_dataset(
    records: CifarRecords,
    variant: CifarVariant,
    split: Split,
    stats: Option<&super::NormStats>,
) -> Result<Dataset> {
    let (fine, coarse, pixels) = records;
    let n = fine.len();
    let values = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mut d = Dataset::from_raw(
        values,
        [n, 3, 32, 32],
        fine.iter().map(|&l| l as usize).collect(),
        variant.num_classes(),
        split,
        stats,
    )?;
    if variant == CifarVariant::Cifar100 {
        d.extra_labels = Some(coarse.iter().map(|&c| c as usize).collect());
    }
    Ok(d)
}

/// Loads one split from the standard binary batch files in `dir`. For CIFAR-100
/// the primary labels are the fine labels and the coarse labels are kept in
/// [`Dataset::extra_labels`].
pub fn load_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    to_dataset(load_records(dir, variant, split)?, variant, split, None)
}

/// Train and test splits, normalized with train statistics.
pub fn load_cifar_pair(dir: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    let train = load_cifar(dir, variant, Split::Train)?;
    let test = to_dataset(
        load_records(dir, variant, Split::Test)?,
        variant,
        Split::Test,
        Some(train.stats()),
    )?;
    Ok((train, test))
}
