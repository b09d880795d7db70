use maxl::autograd::{Graph, Tensor};
use maxl::baselines::{kmeans_assign, kmeans_fit, kmeans_plus_plus, KMEANS_RESTARTS};
use maxl::data::{load_for_config, DatasetKind, RunConfig};
use maxl::diagnostics::{grad_cosine, grad_cosine_scaled};
use maxl::hierarchy::{build_mask, Hierarchy};
use maxl::losses::{cross_entropy, entropy_reg, focal_loss, mask_softmax, LossKind};
use maxl::nn::MultiTaskNet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{ensure, Outcome};

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn probabilities(rng: &mut impl Rng, rows: usize, k: usize) -> Tensor {
    let mut g = Graph::new();
    let l = g.constant(Tensor::new(vec![rows, k], gaussian(rng, rows * k, 2.0)).unwrap());
    let p = g.softmax(l).unwrap();
    g.value(p).clone()
}

pub fn mask_softmax_support() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut worst_sum: f64 = 0.0;
    let mut worst_support: f64 = 0.0;
    for trial in 0..1000 {
        let p = rng.gen_range(2..=6);
        let psi = Hierarchy::new((0..p).map(|_| rng.gen_range(1..=5)).collect()).unwrap();
        let y = rng.gen_range(0..p);
        let k = psi.total();
        let scale = [1.0, 10.0, 100.0][trial % 3];
        let logits = gaussian(&mut rng, k, scale);
        let mask = Tensor::new(vec![1, k], build_mask(y, &psi).unwrap()).unwrap();
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![1, k], logits.clone()).unwrap());
        let out = mask_softmax(&mut g, l, &mask).map_err(|e| format!("trial {trial}: {e}"))?;
        let out = g.value(out).data().to_vec();

        let block = psi.block(y).unwrap();
        let m = block.clone().map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = block.clone().map(|j| (logits[j] - m).exp()).sum();
        for (j, &v) in out.iter().enumerate() {
            if block.contains(&j) {
                let expected = (logits[j] - m).exp() / z;
                worst_support = worst_support.max((v - expected).abs());
            } else {
                ensure!(v == 0.0, "trial {trial}: off-support entry {j} is {v:e}");
            }
        }
        let total: f64 = out.iter().sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
    }
    ensure!(worst_sum <= 1e-9, "row sums deviate from 1 by {worst_sum:e}");
    ensure!(
        worst_support <= 1e-12,
        "on-support entries deviate from the restricted softmax by {worst_support:e}"
    );

    let psi = Hierarchy::new(vec![2, 2]).unwrap();
    ensure!(
        build_mask(0, &psi).unwrap() == [1.0, 1.0, 0.0, 0.0],
        "mask for class 0 of [2, 2]"
    );
    ensure!(
        build_mask(1, &psi).unwrap() == [0.0, 0.0, 1.0, 1.0],
        "mask for class 1 of [2, 2]"
    );
    let batch = psi.mask_batch(&[1, 0]).unwrap();
    ensure!(
        batch.data() == [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0],
        "batched masks for [2, 2]"
    );
    Ok(format!(
        "1000 triples: max |sum − 1| {worst_sum:.1e}, max on-support deviation {worst_support:.1e}; [2, 2] masks exact"
    ))
}

fn loss_value(
    pred: &Tensor,
    target: &Tensor,
    f: impl Fn(&mut Graph, maxl::autograd::Var, maxl::autograd::Var) -> maxl::autograd::Var,
) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let l = f(&mut g, p, t);
    g.item(l)
}

fn entropy_of(pred: &Tensor) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let h = entropy_reg(&mut g, p).unwrap();
    g.item(h)
}

pub fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let mut worst_focal: f64 = 0.0;
    for i in 0..1000 {
        let (n, k) = (rng.gen_range(1..=8), rng.gen_range(2..=10));
        let pred = probabilities(&mut rng, n, k);
        let target = if i % 2 == 0 {
            Tensor::one_hot(&(0..n).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>(), k)
        } else {
            probabilities(&mut rng, n, k)
        };
        let f = loss_value(&pred, &target, |g, p, t| focal_loss(g, p, t, 0.0).unwrap());
        let ce = loss_value(&pred, &target, |g, p, t| cross_entropy(g, p, t).unwrap());
        worst_focal = worst_focal.max((f - ce).abs());
    }
    ensure!(
        worst_focal <= 1e-12,
        "focal(γ=0) and cross-entropy differ by {worst_focal:e}"
    );

    let mut worst_extreme: f64 = 0.0;
    for k in 2..=12 {
        let bound = -(k as f64).ln();
        for _ in 0..50 {
            let n = rng.gen_range(1..=16);
            let h = entropy_of(&probabilities(&mut rng, n, k));
            ensure!(
                h >= bound - 1e-12 && h <= 1e-12,
                "entropy {h} outside [{bound}, 0] for K = {k}"
            );
        }
        let uniform = Tensor::full(&[3, k], 1.0 / k as f64);
        let cycling = Tensor::one_hot(&(0..2 * k).map(|i| i % k).collect::<Vec<_>>(), k);
        let collapsed = Tensor::one_hot(&[rng.gen_range(0..k); 5], k);
        for (t, target) in [(&uniform, bound), (&cycling, bound), (&collapsed, 0.0)] {
            worst_extreme = worst_extreme.max((entropy_of(t) - target).abs());
        }
    }
    ensure!(
        worst_extreme <= 1e-9,
        "entropy misses its extremes by {worst_extreme:e}"
    );
    Ok(format!(
        "max |focal(γ=0) − CE| {worst_focal:.1e} over 1000 inputs; entropy within bounds, extremes within {worst_extreme:.1e}"
    ))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn inertia(points: &[Vec<f64>], centers: &[Vec<f64>], assign: &[usize]) -> f64 {
    points.iter().zip(assign).map(|(p, &a)| sq_dist(p, &centers[a])).sum()
}

/// Within-cluster squared distances of a 2-partition given as a bitmask.
fn partition_cost(points: &[Vec<f64>], mask: u32) -> f64 {
    let mut cost = 0.0;
    for side in [0, 1] {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| (mask >> i) & 1 == side)
            .map(|(_, p)| p)
            .collect();
        if members.is_empty() {
            return f64::INFINITY;
        }
        let dim = members[0].len();
        let mean: Vec<f64> = (0..dim)
            .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
            .collect();
        cost += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
    }
    cost
}

fn optimal_cost(points: &[Vec<f64>]) -> f64 {
    // Fixing the last point's side enumerates each partition once.
    (1..1u32 << (points.len() - 1))
        .map(|m| partition_cost(points, m))
        .fold(f64::INFINITY, f64::min)
}

/// Runs per-class Lloyd steps to convergence, failing if inertia ever rises.
/// Returns the final inertia and the number of steps.
fn lloyd_to_convergence(
    points: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    trial: usize,
) -> Result<(f64, usize), String> {
    let psi = Hierarchy::new(vec![centroids.len()]).unwrap();
    let labels = vec![0; points.len()];
    let mut set = vec![std::mem::take(&mut centroids)];
    let (mut previous, mut last) = (f64::INFINITY, Vec::new());
    for step in 0..100 {
        let assign = kmeans_assign(points, &labels, &mut set, &psi).map_err(|e| e.to_string())?;
        let cost = inertia(points, &set[0], &assign);
        ensure!(
            cost <= previous + 1e-12 * previous.abs().max(1.0),
            "trial {trial}, step {step}: inertia rose from {previous} to {cost}"
        );
        previous = cost;
        if assign == last {
            return Ok((cost, step + 1));
        }
        last = assign;
    }
    Err(format!("trial {trial}: no convergence in 100 steps"))
}

pub fn kmeans_oracle() -> Outcome {
    const TRIALS: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC8);
    let (mut matched, mut steps) = (0, 0);
    for trial in 0..TRIALS {
        let n = rng.gen_range(4..=12);
        let blobs: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                blobs[i % 2]
                    .iter()
                    .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        // A single seeding moves the most, so it exercises the inertia check.
        let (_, s) = lloyd_to_convergence(&points, kmeans_plus_plus(&points, 2, &mut rng), trial)?;
        steps += s;
        let (cost, s) = lloyd_to_convergence(&points, kmeans_fit(&points, 2, KMEANS_RESTARTS, &mut rng), trial)?;
        steps += s;
        if cost <= optimal_cost(&points) * (1.0 + 1e-9) + 1e-12 {
            matched += 1;
        }
    }
    ensure!(
        matched * 100 >= 95 * TRIALS,
        "Lloyd reached the optimal 2-partition in {matched}/{TRIALS} trials"
    );
    Ok(format!(
        "optimal in {matched}/{TRIALS} trials, inertia non-increasing over {steps} Lloyd steps"
    ))
}

/// Default synthetic setup: 16 inputs, 3 primary classes, MLP 64-64, 12
/// auxiliary classes, batches of 100 with their true primary labels.
pub fn cosine_calibration() -> Outcome {
    const TOL: f64 = 1e-9;
    const BATCH: usize = 100;
    let cfg = RunConfig::defaults(DatasetKind::Synthetic);
    let (train, _) = load_for_config(&cfg).map_err(|e| e.to_string())?;
    let (p, k) = (train.num_classes(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(0xC9);
    let batch = |rng: &mut ChaCha8Rng| {
        let idx: Vec<usize> = (0..BATCH).map(|_| rng.gen_range(0..train.len())).collect();
        let (x, y) = train.batch(&idx);
        (x, Tensor::one_hot(&y, p))
    };

    let (images, y) = batch(&mut rng);
    let mut twin = MultiTaskNet::new(&cfg.arch, train.input_shape(), p, p, 7).unwrap();
    for part in ["weight", "bias"] {
        let w = twin.params().get(&format!("primary.{part}")).unwrap().clone();
        *twin.params_mut().get_mut(&format!("aux.{part}")).unwrap() = w;
    }
    let same = grad_cosine(&twin, &images, &y, &y, LossKind::Focal, cfg.gamma).map_err(|e| e.to_string())?;
    ensure!((same - 1.0).abs() <= TOL, "identical losses give {same}");
    let negated =
        grad_cosine_scaled(&twin, &images, &y, &y, LossKind::Focal, cfg.gamma, 1.0, -1.0).map_err(|e| e.to_string())?;
    ensure!((negated + 1.0).abs() <= TOL, "negated loss gives {negated}");

    let mut sims = Vec::new();
    for trial in 0..20 {
        let net = MultiTaskNet::new(&cfg.arch, train.input_shape(), p, k, 100 + trial).unwrap();
        let (images, y) = batch(&mut rng);
        let aux: Vec<usize> = (0..BATCH).map(|_| rng.gen_range(0..k)).collect();
        let c = grad_cosine(&net, &images, &y, &Tensor::one_hot(&aux, k), LossKind::Focal, cfg.gamma)
            .map_err(|e| e.to_string())?;
        sims.push(c);
    }
    let mean_abs = sims.iter().map(|c| c.abs()).sum::<f64>() / 20.0;
    let mean = sims.iter().sum::<f64>() / 20.0;
    ensure!(
        mean_abs < 0.1,
        "random labels give mean |cos| {mean_abs:.4} (signed mean {mean:.4})"
    );
    Ok(format!(
        "identical {same:.12}, negated {negated:.12}, random-label mean |cos| {mean_abs:.4} (signed {mean:.4})"
    ))
}
