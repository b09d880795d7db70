//! Dataset ingestion, synthetic data, batching and run configuration.

mod batch;
mod cifar;
mod config;
mod idx;
mod synth;

pub(crate) use batch::mix_seed;
pub use batch::{batches, stratified_subset};
pub use cifar::{load_cifar, load_cifar_pair, parse_cifar, CifarVariant, CIFAR_IMAGE_BYTES};
pub use config::{DatasetKind, HierarchySpec, LossKind, Method, RunConfig, ScheduleKind};
pub use idx::{load_idx, load_mnist_dir, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_hierarchical, SynthData};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::InputShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Channel statistics of `[N, C, H, W]` values. Constant channels get unit std.
    pub fn compute(values: &[f64], shape: [usize; 4]) -> Self {
        let [n, c, h, w] = shape;
        let per = h * w;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        let count = (n * per).max(1) as f64;
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let at = (b * c + ch) * per;
                s += values[at..at + per].iter().sum::<f64>();
            }
            let m = s / count;
            let mut v = 0.0;
            for b in 0..n {
                let at = (b * c + ch) * per;
                v += values[at..at + per].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            let sd = (v / count).sqrt();
            mean[ch] = m;
            std[ch] = if sd > 1e-12 { sd } else { 1.0 };
        }
        Self { mean, std }
    }

    fn apply(&self, values: &mut [f64], shape: [usize; 4]) {
        let [n, c, h, w] = shape;
        let per = h * w;
        for b in 0..n {
            for ch in 0..c {
                let at = (b * c + ch) * per;
                let (m, s) = (self.mean[ch], self.std[ch]);
                for x in &mut values[at..at + per] {
                    *x = (*x - m) / s;
                }
            }
        }
    }
}

/// Images `[N, C, H, W]` normalized per channel, with primary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    stats: NormStats,
    /// Second label set: CIFAR-100 coarse labels, or synthetic sub-cluster labels.
    pub extra_labels: Option<Vec<usize>>,
}

impl Dataset {
    /// Normalizes raw values with `stats`, or with their own statistics when `None`.
    pub fn from_raw(
        mut values: Vec<f64>,
        shape: [usize; 4],
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        stats: Option<&NormStats>,
    ) -> Result<Self> {
        if shape[0] != labels.len() {
            return Err(Error::CountMismatch(format!(
                "{} images, {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format {
                what: "labels",
                detail: format!("label {l} outside [0, {num_classes})"),
            });
        }
        let stats = match stats {
            Some(s) if s.mean.len() == shape[1] => s.clone(),
            Some(s) => {
                return Err(Error::shape(
                    "normalize",
                    format!("{} channel statistics for {} channels", s.mean.len(), shape[1]),
                ))
            }
            None => NormStats::compute(&values, shape),
        };
        stats.apply(&mut values, shape);
        Ok(Self {
            images: Tensor::new(shape.to_vec(), values)?,
            labels,
            num_classes,
            split,
            stats,
            extra_labels: None,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> InputShape {
        let s = self.images.shape();
        InputShape::new(s[1], s[2], s[3])
    }

    /// The samples at `indices`, keeping normalization statistics.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            stats: self.stats.clone(),
            extra_labels: self
                .extra_labels
                .as_ref()
                .map(|e| indices.iter().map(|&i| e[i]).collect()),
        }
    }

    /// Replaces the primary labels, e.g. with a coarser level of a label hierarchy.
    pub fn relabel(&mut self, labels: Vec<usize>, num_classes: usize) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::CountMismatch(format!(
                "{} labels for {} samples",
                labels.len(),
                self.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format {
                what: "labels",
                detail: format!("label {l} outside [0, {num_classes})"),
            });
        }
        self.labels = labels;
        self.num_classes = num_classes;
        Ok(())
    }

    /// Images and labels of one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Seed for subset selection and synthetic data; fixed so every run of a
/// config sees the same samples whatever its `seed`.
pub const DATA_SEED: u64 = 0;

/// Train and test sets described by `cfg`, subsampled per `train-subset` and
/// `test-subset` (0 keeps everything).
pub fn load_for_config(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => load_mnist_dir(&cfg.data_dir)?,
        DatasetKind::Cifar10 => load_cifar_pair(&cfg.data_dir, CifarVariant::Cifar10)?,
        DatasetKind::Cifar100 => load_cifar_pair(&cfg.data_dir, CifarVariant::Cifar100)?,
        DatasetKind::Synthetic => {
            let d = synth_hierarchical(
                cfg.synth_classes,
                cfg.synth_sub,
                cfg.synth_dim,
                cfg.synth_sep,
                cfg.synth_n,
                DATA_SEED,
            )?;
            (d.train, d.test)
        }
    };
    let cut = |d: Dataset, size: usize| {
        if size == 0 || size >= d.len() {
            d
        } else {
            d.subset(&stratified_subset(d.labels(), size, DATA_SEED))
        }
    };
    Ok((cut(train, cfg.train_subset), cut(test, cfg.test_subset)))
}
