use std::time::Instant;

use maxl::autograd::{finite_diff_grad, relative_error, Conv2d, Graph, OpAttrs, OpKind, Tensor, Var};
use maxl::hierarchy::Hierarchy;
use maxl::meta::{meta_gradient, TaskLoss};
use maxl::nn::{Architecture, InputShape, LabelGenNet, MultiTaskNet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::oracle::{Generator, Instance, TwoHeadMlp};
use crate::{ensure, Outcome};

const FD_STEP: f64 = 1e-5;

fn normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values at least 0.05 away from zero.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One random op node followed by a small random dense head, so the checked
/// function is a scalar of every op input and of the head weight.
struct Case {
    kind: OpKind,
    inputs: Vec<Tensor>,
    attrs: OpAttrs,
    target: Tensor,
}

impl Case {
    fn random(kind: OpKind, rng: &mut ChaCha8Rng) -> Self {
        let (r, c, k) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let mut attrs = OpAttrs::default();
        let inputs = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul => vec![normal(rng, &[r, c], 1.0), normal(rng, &[r, c], 1.0)],
            OpKind::Div => vec![
                normal(rng, &[r, c], 1.0),
                away_from_zero(rng, &[r, c]).map(|v| v + v.signum() * 0.45),
            ],
            OpKind::MatMul => vec![normal(rng, &[r, k], 1.0), normal(rng, &[k, c], 1.0)],
            OpKind::Conv2d => {
                let cin = *[1, 2, 3, 9].choose(rng).unwrap();
                let kernel = rng.gen_range(1..=3);
                let padding = rng.gen_range(0..=1);
                let geom = Conv2d {
                    batch: rng.gen_range(1..=2),
                    height: rng.gen_range(kernel.max(2)..=5),
                    width: rng.gen_range(kernel.max(2)..=5),
                    in_channels: cin,
                    kernel,
                    stride: rng.gen_range(1..=2),
                    padding,
                };
                let cout = rng.gen_range(1..=3);
                attrs.conv = Some(geom);
                vec![
                    normal(rng, &[geom.batch, geom.height, geom.width, cin], 1.0),
                    normal(rng, &[kernel * kernel * cin, cout], 0.5),
                    normal(rng, &[cout], 0.5),
                ]
            }
            OpKind::Relu => vec![away_from_zero(rng, &[r, c])],
            OpKind::Log => vec![uniform(rng, &[r, c], 0.2, 3.0)],
            OpKind::Exp => vec![uniform(rng, &[r, c], -2.0, 2.0)],
            OpKind::Power => {
                attrs.scalar = Some(rng.gen_range(-2.0..3.0));
                vec![uniform(rng, &[r, c], 0.3, 2.0)]
            }
            OpKind::Sum | OpKind::Mean | OpKind::Softmax => vec![normal(rng, &[r, c], 1.0)],
            OpKind::Reshape => {
                attrs.shape = Some(if rng.gen() { vec![c, r] } else { vec![r * c] });
                vec![normal(rng, &[r, c], 1.0)]
            }
            OpKind::MaxPool => {
                let size = rng.gen_range(2..=3);
                let (n, h, w, ch) = (
                    rng.gen_range(1..=2),
                    size * rng.gen_range(1..=2),
                    size * rng.gen_range(1..=2),
                    rng.gen_range(1..=3),
                );
                attrs.pool = Some(size);
                vec![distinct(rng, &[n, h, w, ch])]
            }
            OpKind::ElementwiseMax => {
                let a = normal(rng, &[r, c], 1.0);
                let gap = away_from_zero(rng, &[r, c]);
                let b = Tensor::new(
                    vec![r, c],
                    a.data().iter().zip(gap.data()).map(|(x, d)| x + d).collect(),
                )
                .unwrap();
                vec![a, b]
            }
            OpKind::ScalarMul => {
                attrs.scalar = Some(rng.gen_range(-3.0..3.0));
                vec![normal(rng, &[r, c], 1.0)]
            }
        };
        let mut case = Self {
            kind,
            inputs,
            attrs,
            target: Tensor::scalar(0.0),
        };
        let len = case.eval_op(&case.inputs).len();
        case.inputs.push(normal(rng, &[len, 3], 0.7));
        case.target = uniform(rng, &[1, 3], -1.0, 1.0);
        case
    }

    fn eval_op(&self, inputs: &[Tensor]) -> Tensor {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = g.record(self.kind, &vars[..self.kind.arity()], &self.attrs).unwrap();
        g.value(y).clone()
    }

    /// `sum(softmax(flat(op) · W) ⊙ t) + 0.1 · Σ (flat(op) · W)²`.
    fn build(&self, g: &mut Graph, vars: &[Var]) -> Var {
        let arity = self.kind.arity();
        let y = g.record(self.kind, &vars[..arity], &self.attrs).unwrap();
        let len = g.value(y).len();
        let flat = g.reshape(y, &[1, len]).unwrap();
        let h = g.matmul(flat, vars[arity]).unwrap();
        let s = g.softmax(h).unwrap();
        let t = g.constant(self.target.clone());
        let fit = g.mul(s, t).unwrap();
        let fit = g.sum(fit);
        let sq = g.mul(h, h).unwrap();
        let sq = g.sum(sq);
        let sq = g.scalar_mul(sq, 0.1);
        g.add(fit, sq).unwrap()
    }
}

/// Values whose pairwise gaps are at least 0.04, in random order.
fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.shuffle(rng);
    let data = rank
        .iter()
        .map(|&i| i as f64 * 0.05 - 1.0 + rng.gen_range(0.0..0.01))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Largest relative error, over inputs, between tape gradients and central differences.
fn worst_error(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss, &vars, false).unwrap();
    let analytic: Vec<Tensor> = grads.iter().map(|&v| g.value(v).clone()).collect();
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.item(l)
    };
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let mut probe = inputs.to_vec();
        let fd = finite_diff_grad(
            |t| {
                probe[i] = t.clone();
                eval(&probe)
            },
            &inputs[i],
            FD_STEP,
        );
        worst = worst.max(relative_error(analytic[i].data(), fd.data()));
    }
    worst
}

/// Conv block, pooling, a dense layer and a log-softmax loss, all through `record`.
fn composite(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, impl Fn(&mut Graph, &[Var]) -> Var) {
    let cin = rng.gen_range(1..=3);
    let geom = Conv2d {
        batch: 2,
        height: 6,
        width: 6,
        in_channels: cin,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let cout = 2;
    let inputs = vec![
        normal(rng, &[2, 6, 6, cin], 1.0),
        normal(rng, &[9 * cin, cout], 0.5),
        normal(rng, &[cout], 0.1),
        normal(rng, &[9 * cout, 3], 0.5),
    ];
    let labels = Tensor::one_hot(&[rng.gen_range(0..3), rng.gen_range(0..3)], 3);
    let build = move |g: &mut Graph, v: &[Var]| {
        let attrs = OpAttrs {
            conv: Some(geom),
            ..OpAttrs::default()
        };
        let y = g.record(OpKind::Conv2d, &v[..3], &attrs).unwrap();
        let y = g.record(OpKind::Relu, &[y], &OpAttrs::default()).unwrap();
        let y = g.record(OpKind::MaxPool, &[y], &OpAttrs::default()).unwrap();
        let shape = OpAttrs {
            shape: Some(vec![2, 9 * cout]),
            ..OpAttrs::default()
        };
        let y = g.record(OpKind::Reshape, &[y], &shape).unwrap();
        let y = g.record(OpKind::MatMul, &[y, v[3]], &OpAttrs::default()).unwrap();
        let p = g.record(OpKind::Softmax, &[y], &OpAttrs::default()).unwrap();
        let lp = g.record(OpKind::Log, &[p], &OpAttrs::default()).unwrap();
        let t = g.constant(labels.clone());
        let l = g.record(OpKind::Mul, &[lp, t], &OpAttrs::default()).unwrap();
        let l = g.record(OpKind::Mean, &[l], &OpAttrs::default()).unwrap();
        let neg = OpAttrs {
            scalar: Some(-1.0),
            ..OpAttrs::default()
        };
        g.record(OpKind::ScalarMul, &[l], &neg).unwrap()
    };
    (inputs, build)
}

pub fn op_gradients() -> Outcome {
    const NETWORKS: u64 = 50;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst = (0.0f64, "none");
    let mut checked = 0;
    for seed in 0..NETWORKS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC1 ^ (seed << 8));
        for kind in OpKind::ALL {
            let case = Case::random(kind, &mut rng);
            let err = worst_error(&case.inputs, |g, v| case.build(g, v));
            ensure!(
                err <= TOL,
                "network {seed}, {}: relative error {err:.3e} > {TOL:e}",
                kind.name()
            );
            if err > worst.0 {
                worst = (err, kind.name());
            }
            checked += 1;
        }
        let (inputs, build) = composite(&mut rng);
        let err = worst_error(&inputs, build);
        ensure!(
            err <= TOL,
            "network {seed}, composite: relative error {err:.3e} > {TOL:e}"
        );
        if err > worst.0 {
            worst = (err, "composite");
        }
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1} s, limit 120 s");
    Ok(format!(
        "{checked} checks over {} op kinds, max relative error {:.2e} ({})",
        OpKind::ALL.len(),
        worst.0,
        worst.1
    ))
}

/// Builds a random multitask/label-generator pair small enough for a full
/// finite-difference sweep, with nonzero biases.
fn random_instance(rng: &mut ChaCha8Rng, seed: u64) -> (MultiTaskNet, LabelGenNet, Instance) {
    let d = rng.gen_range(3..=6);
    let hidden = rng.gen_range(3..=8);
    let p = rng.gen_range(2..=4);
    let psi: Vec<usize> = (0..p).map(|_| rng.gen_range(1..=3)).collect();
    let hierarchy = Hierarchy::new(psi).unwrap();
    let arch = Architecture::Mlp { hidden: vec![hidden] };
    let input = InputShape::flat(d);
    let mut net = MultiTaskNet::new(&arch, input, p, hierarchy.total(), seed).unwrap();
    let mut gen = LabelGenNet::new(&arch, input, hierarchy.clone(), seed ^ 0x5eed).unwrap();
    for params in [net.params_mut(), gen.params_mut()] {
        let names: Vec<String> = params.names().to_vec();
        for n in names.iter().filter(|n| n.ends_with(".bias")) {
            let b = params.get_mut(n).unwrap();
            let len = b.len();
            *b = normal(rng, &[len], 0.5);
        }
    }
    let n = rng.gen_range(4..=10);
    let images = normal(rng, &[n, 1, 1, d], 1.0);
    let labels = (0..n).map(|_| rng.gen_range(0..p)).collect();
    let gamma = *[0.0, 1.0, 2.0, 2.5].choose(rng).unwrap();
    let inst = Instance {
        images,
        labels,
        alpha: rng.gen_range(0.05..0.5),
        lambda: rng.gen_range(0.0..1.0),
        gamma,
        hierarchy,
    };
    (net, gen, inst)
}

pub fn meta_gradients() -> Outcome {
    const INSTANCES: usize = 20;
    const TOL: f64 = 1e-3;
    const KINK_MARGIN: f64 = 1e-3;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let (mut done, mut resampled, mut seed) = (0, 0, 0u64);
    let (mut worst, mut worst_value, mut max_params) = (0.0f64, 0.0f64, 0);
    while done < INSTANCES {
        seed += 1;
        let (net, gen, inst) = random_instance(&mut rng, seed);
        let mlp = TwoHeadMlp::from_params(net.params());
        let g2 = Generator::from_params(gen.params());
        let theta2 = g2.flatten();
        if inst.kink_distance(&mlp, &g2) < KINK_MARGIN {
            resampled += 1;
            continue;
        }
        let params = net.params().numel() + gen.params().numel();
        ensure!(params <= 1000, "instance {seed} has {params} parameters");
        max_params = max_params.max(params);

        let lib = meta_gradient(
            &net,
            &gen,
            &inst.images,
            &inst.labels,
            inst.alpha,
            inst.lambda,
            TaskLoss::focal(inst.gamma),
        )
        .map_err(|e| format!("instance {seed}: {e}"))?;
        let value = inst.meta_loss(&mlp, &g2);
        worst_value = worst_value.max((value - lib.loss).abs() / value.abs().max(1.0));
        let fd = finite_diff_grad(
            |t| inst.meta_loss(&mlp, &Generator::from_flat(&g2, t.data())),
            &Tensor::vector(theta2),
            FD_STEP,
        );
        let analytic = lib.grads.flatten();
        ensure!(
            analytic.len() == fd.len(),
            "instance {seed}: {} gradient entries for {} parameters",
            analytic.len(),
            fd.len()
        );
        let err = relative_error(&analytic, fd.data());
        ensure!(err <= TOL, "instance {seed}: relative error {err:.3e} > {TOL:e}");
        worst = worst.max(err);
        done += 1;
    }
    ensure!(
        worst_value < 1e-10,
        "meta loss differs from the oracle by {worst_value:.3e}"
    );
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.1} s, limit 300 s");
    Ok(format!(
        "{INSTANCES} instances (≤ {max_params} parameters, {resampled} resampled near ReLU kinks), max relative error {worst:.2e}"
    ))
}
