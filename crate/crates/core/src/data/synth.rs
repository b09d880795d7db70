use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Split};
use crate::error::{Error, Result};

/// Train and test splits of a two-level Gaussian mixture. Each dataset's
/// `extra_labels` hold the global sub-cluster index, which is for analysis only.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Orthonormal vectors in `R^dim` from Gram-Schmidt on Gaussian draws.
fn orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Gaussian sub-clusters with unit variance. Class centers are pairwise
/// `3 * sep` apart and sub-cluster means of one class pairwise `sep` apart.
/// Needs `dim >= num_primary * (1 + sub_per_class)` when `sub_per_class > 1`.
pub fn synth_hierarchical(
    num_primary: usize,
    sub_per_class: usize,
    dim: usize,
    sep: f64,
    n_per_sub: usize,
    seed: u64,
) -> Result<SynthData> {
    if num_primary == 0 || sub_per_class == 0 || n_per_sub == 0 {
        return Err(Error::InvalidArgument("synthetic data needs nonzero counts".into()));
    }
    if !(sep >= 0.0 && sep.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "separation must be nonnegative, got {sep}"
        )));
    }
    let directions = num_primary
        + if sub_per_class > 1 {
            num_primary * sub_per_class
        } else {
            0
        };
    if dim < directions {
        return Err(Error::InvalidArgument(format!(
            "dimension {dim} too small for {num_primary} classes of {sub_per_class} sub-clusters"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = orthonormal(directions, dim, &mut rng);
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let mut means = Vec::with_capacity(num_primary * sub_per_class);
    for p in 0..num_primary {
        for s in 0..sub_per_class {
            let mut m: Vec<f64> = basis[p].iter().map(|x| 3.0 * sep * half * x).collect();
            if sub_per_class > 1 {
                let u = &basis[num_primary + p * sub_per_class + s];
                m.iter_mut().zip(u).for_each(|(x, y)| *x += sep * half * y);
            }
            means.push(m);
        }
    }
    let draw = |rng: &mut ChaCha8Rng| {
        let mut values = Vec::with_capacity(means.len() * n_per_sub * dim);
        let mut labels = Vec::new();
        let mut subs = Vec::new();
        for (k, m) in means.iter().enumerate() {
            for _ in 0..n_per_sub {
                values.extend(m.iter().map(|&c| c + normal(rng)));
                labels.push(k / sub_per_class);
                subs.push(k);
            }
        }
        (values, labels, subs)
    };
    let (tv, tl, ts) = draw(&mut rng);
    let (ev, el, es) = draw(&mut rng);
    let n = tl.len();
    let mut train = Dataset::from_raw(tv, [n, 1, 1, dim], tl, num_primary, Split::Train, None)?;
    train.extra_labels = Some(ts);
    let mut test = Dataset::from_raw(ev, [n, 1, 1, dim], el, num_primary, Split::Test, Some(train.stats()))?;
    test.extra_labels = Some(es);
    Ok(SynthData { train, test })
}
