//! Auxiliary-label sources that do not learn from the primary task: uniformly
//! random sub-classes, and k-means clusters of autoencoder latents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::data::{Dataset, Method, RunConfig};
use crate::diagnostics::EVAL_CHUNK;
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::meta::{fixed_aux_labels, new_multitask, prepare, run_loop, sub_seed, Labeler, RunOutput};
use crate::nn::{he_normal, linear, sgd_step, GradMap, OptimizerKind, OptimizerState, ParamSet};

/// One-hot rows `[N, K]` with a uniformly drawn sub-class inside each sample's
/// primary block. Drawn once; the labels stay fixed for the run.
pub fn random_aux_labels(labels: &[usize], hierarchy: &Hierarchy, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aux = labels
        .iter()
        .map(|&y| {
            let block = hierarchy.block(y)?;
            Ok(rng.gen_range(block))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::one_hot(&aux, hierarchy.total()))
}

const AE_HIDDEN: usize = 256;
const AE_LR: f64 = 1e-3;
const AE_MOMENTUM: f64 = 0.9;

/// Fully connected autoencoder `d -> 256 -> latent -> 256 -> d` with ReLU hidden
/// layers and a linear latent code, trained on mean squared reconstruction error.
#[derive(Clone, Debug)]
pub struct AutoEncoder {
    params: ParamSet,
    opt: OptimizerState,
}

impl AutoEncoder {
    pub fn new(input_dim: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 {
            return Err(Error::InvalidArgument("autoencoder dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let dims = [input_dim, AE_HIDDEN, latent_dim, AE_HIDDEN, input_dim];
        for (i, w) in dims.windows(2).enumerate() {
            params.push(
                format!("ae.fc{i}.weight"),
                he_normal(&mut rng, &[w[0], w[1]], w[0]),
                true,
            );
            params.push(format!("ae.fc{i}.bias"), Tensor::zeros(&[w[1]]), false);
        }
        Ok(Self {
            params,
            opt: OptimizerState::new(OptimizerKind::MomentumSgd, AE_LR, AE_MOMENTUM, 0.0)?,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn encode_var(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let h = linear(g, x, p[0], p[1])?;
        let h = g.relu(h);
        linear(g, h, p[2], p[3])
    }

    fn decode_var(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<Var> {
        let h = linear(g, z, p[4], p[5])?;
        let h = g.relu(h);
        linear(g, h, p[6], p[7])
    }

    fn flat(images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        images.clone().reshape(&[n, images.len() / n.max(1)])
    }

    /// Latent codes `[N, latent]` of `[N, C, H, W]` images.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Self::flat(images)?);
        let z = self.encode_var(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    /// One optimizer step on the batch; returns the reconstruction loss before it.
    pub fn train_step(&mut self, images: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let x = g.constant(Self::flat(images)?);
        let z = self.encode_var(&mut g, &p, x)?;
        let r = self.decode_var(&mut g, &p, z)?;
        let d = g.sub(r, x)?;
        let sq = g.mul(d, d)?;
        let loss = g.mean(sq);
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: "autoencoder",
                epoch: 0,
                batch: 0,
            });
        }
        let grads = g.backward(loss, &p, false)?;
        sgd_step(&mut self.params, &GradMap::from_graph(&g, &grads), &mut self.opt)?;
        Ok(value)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center for each point; ties go to the lower index.
pub fn nearest_center(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// k-means++ seeding over `points`. With fewer distinct points than `k`,
/// later centers repeat earlier ones.
pub fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut i = 0;
            while i + 1 < d2.len() && t >= d2[i] {
                t -= d2[i];
                i += 1;
            }
            i
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick].clone();
        d2.iter_mut().zip(points).for_each(|(d, p)| *d = d.min(sq_dist(p, &c)));
        centers.push(c);
    }
    centers
}

/// One Lloyd iteration: assign, then move each center to its members' mean.
/// An empty cluster takes the member farthest from its assigned center.
/// Returns the assignment used.
pub fn lloyd_step(points: &[Vec<f64>], centers: &mut [Vec<f64>]) -> Vec<usize> {
    let assign = nearest_center(points, centers);
    let dim = centers.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (p, &a) in points.iter().zip(&assign) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    let spread: Vec<f64> = points
        .iter()
        .zip(&assign)
        .map(|(p, &a)| sq_dist(p, &centers[a]))
        .collect();
    let mut taken = vec![false; points.len()];
    for j in 0..centers.len() {
        if counts[j] > 0 {
            centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        } else {
            let far = (0..points.len())
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| spread[a].total_cmp(&spread[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                taken[i] = true;
                centers[j] = points[i].clone();
            }
        }
    }
    assign
}

/// k-means++ seedings tried by [`kmeans_fit`].
pub const KMEANS_RESTARTS: usize = 10;

const FIT_MAX_STEPS: usize = 100;

/// Best of `restarts` k-means++ seedings, each refined by Lloyd steps until
/// its assignment stops changing. Returns the centers of lowest inertia; the
/// earliest seeding wins ties.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = kmeans_plus_plus(points, k, rng);
        if centers.is_empty() {
            return centers;
        }
        let mut last = Vec::new();
        for _ in 0..FIT_MAX_STEPS {
            let assign = lloyd_step(points, &mut centers);
            if assign == last {
                break;
            }
            last = assign;
        }
        let assign = nearest_center(points, &centers);
        let inertia: f64 = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, centers));
        }
    }
    best.map(|(_, c)| c).unwrap_or_default()
}

/// One Lloyd step inside every primary class: each sample is assigned to the
/// nearest centroid of its own class, then that class's centroids move to
/// their members' means. Returns the global auxiliary index of every sample.
///
/// `centroids[c]` holds `ψ[c]` vectors of the latent dimension.
pub fn kmeans_assign(
    latents: &[Vec<f64>],
    labels: &[usize],
    centroids: &mut [Vec<Vec<f64>>],
    hierarchy: &Hierarchy,
) -> Result<Vec<usize>> {
    let mismatch = |detail: String| Err(Error::shape("kmeans-assign", detail));
    if latents.len() != labels.len() {
        return mismatch(format!("{} latents for {} labels", latents.len(), labels.len()));
    }
    if centroids.len() != hierarchy.num_primary() {
        return mismatch(format!(
            "{} centroid sets for {} classes",
            centroids.len(),
            hierarchy.num_primary()
        ));
    }
    let dim = latents.first().map(Vec::len);
    for (c, set) in centroids.iter().enumerate() {
        if set.len() != hierarchy.counts()[c] {
            return mismatch(format!(
                "class {c} has {} centroids, expected {}",
                set.len(),
                hierarchy.counts()[c]
            ));
        }
        if let Some(bad) = set.iter().find(|v| Some(v.len()) != dim && dim.is_some()) {
            return mismatch(format!(
                "centroid of length {} for latents of length {}",
                bad.len(),
                dim.unwrap_or(0)
            ));
        }
    }
    if let Some(z) = latents.iter().find(|z| Some(z.len()) != dim) {
        return mismatch(format!("latent of length {}", z.len()));
    }
    let mut members = vec![Vec::new(); centroids.len()];
    for (i, &y) in labels.iter().enumerate() {
        if y >= centroids.len() {
            return Err(Error::PrimaryClassOutOfRange {
                class: y,
                num_primary: centroids.len(),
            });
        }
        members[y].push(i);
    }
    let mut out = vec![0; labels.len()];
    for (c, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let pts: Vec<Vec<f64>> = idx.iter().map(|&i| latents[i].clone()).collect();
        let off = hierarchy.offsets()[c];
        for (&i, a) in idx.iter().zip(lloyd_step(&pts, &mut centroids[c])) {
            out[i] = off + a;
        }
    }
    Ok(out)
}

/// Per-class k-means over autoencoder latents of the whole training set:
/// centroids per primary class and the current sample-to-auxiliary-class
/// assignment. Each call to [`KMeansState::batch_labels`] trains the
/// autoencoder on the batch, refreshes those samples' latents and runs one
/// Lloyd step in every class.
#[derive(Clone, Debug)]
pub struct KMeansState {
    hierarchy: Hierarchy,
    ae: AutoEncoder,
    labels: Vec<usize>,
    latents: Vec<Vec<f64>>,
    centroids: Vec<Vec<Vec<f64>>>,
    assign: Vec<usize>,
}

impl KMeansState {
    pub fn new(train: &Dataset, hierarchy: Hierarchy, latent_dim: usize, seed: u64) -> Result<Self> {
        if train.num_classes() != hierarchy.num_primary() {
            return Err(Error::InvalidArgument(format!(
                "hierarchy has {} primary classes, data has {}",
                hierarchy.num_primary(),
                train.num_classes()
            )));
        }
        let ae = AutoEncoder::new(train.input_shape().numel(), latent_dim, seed)?;
        let mut latents = Vec::with_capacity(train.len());
        let idx: Vec<usize> = (0..train.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (x, _) = train.batch(chunk);
            let z = ae.encode(&x)?;
            latents.extend((0..chunk.len()).map(|r| z.row(r).to_vec()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6B6D);
        let mut centroids = Vec::with_capacity(hierarchy.num_primary());
        for (c, &k) in hierarchy.counts().iter().enumerate() {
            let pts: Vec<Vec<f64>> = (0..train.len())
                .filter(|&i| train.labels()[i] == c)
                .map(|i| latents[i].clone())
                .collect();
            let mut set = kmeans_fit(&pts, k, KMEANS_RESTARTS, &mut rng);
            // a class without samples keeps origin centroids
            set.resize(k, vec![0.0; latent_dim]);
            centroids.push(set);
        }
        let assign = (0..train.len())
            .map(|i| {
                let y = train.labels()[i];
                hierarchy.offsets()[y] + nearest_center(&latents[i..=i], &centroids[y])[0]
            })
            .collect();
        Ok(Self {
            labels: train.labels().to_vec(),
            hierarchy,
            ae,
            latents,
            centroids,
            assign,
        })
    }

    pub fn centroids(&self) -> &[Vec<Vec<f64>>] {
        &self.centroids
    }

    /// Global auxiliary index currently assigned to each training sample.
    pub fn assignments(&self) -> &[usize] {
        &self.assign
    }

    /// Current one-hot labels of training samples `idx`.
    pub fn labels_of(&self, idx: &[usize]) -> Tensor {
        let a: Vec<usize> = idx.iter().map(|&i| self.assign[i]).collect();
        Tensor::one_hot(&a, self.hierarchy.total())
    }

    /// Advances the autoencoder and clustering on one batch of training samples
    /// and returns their updated one-hot labels.
    pub fn batch_labels(&mut self, idx: &[usize], images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if labels.iter().zip(idx).any(|(&y, &i)| self.labels.get(i) != Some(&y)) {
            return Err(Error::InvalidArgument(
                "batch does not match the clustered training set".into(),
            ));
        }
        self.ae.train_step(images)?;
        let z = self.ae.encode(images)?;
        for (r, &i) in idx.iter().enumerate() {
            self.latents[i] = z.row(r).to_vec();
        }
        self.assign = kmeans_assign(&self.latents, &self.labels, &mut self.centroids, &self.hierarchy)?;
        Ok(self.labels_of(idx))
    }
}

/// Trains the multi-task network with a non-learned auxiliary-label source:
/// none (`single`), fixed random sub-classes (`random`), k-means clusters
/// (`kmeans`) or the finer level of a human hierarchy (`human`).
pub fn train_baseline(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    out: Option<&std::path::Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let p = prepare(cfg, train, test)?;
    let net = new_multitask(cfg, p.train.input_shape(), p.train.num_classes(), p.hierarchy.total())?;
    let labeler = match cfg.method {
        Method::Single => Labeler::None,
        Method::Random | Method::Human => Labeler::Fixed(fixed_aux_labels(cfg, &p)?.expect("fixed-label method")),
        Method::KMeans => Labeler::KMeans(Box::new(KMeansState::new(
            &p.train,
            p.hierarchy.clone(),
            cfg.latent_dim,
            sub_seed(cfg.seed, 5),
        )?)),
        Method::Maxl => return crate::meta::train(cfg, train, test, out),
    };
    run_loop(cfg, &p.train, &p.test, out, net, p.hierarchy, labeler)
}
