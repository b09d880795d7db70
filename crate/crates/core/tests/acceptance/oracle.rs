//! A one-hidden-layer multitask network and label generator written out by
//! hand on plain `f64` matrices, with a hand-derived backward pass for the
//! inner gradient. Shares nothing with the tape beyond reading initial weights.

use maxl::autograd::Tensor;
use maxl::hierarchy::Hierarchy;
use maxl::nn::ParamSet;

const FLOOR: f64 = 1e-12;

/// Row-major matrix.
#[derive(Clone, Debug)]
pub struct M {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl M {
    fn zeros(r: usize, c: usize) -> Self {
        Self {
            r,
            c,
            d: vec![0.0; r * c],
        }
    }

    fn from_tensor(t: &Tensor, r: usize, c: usize) -> Self {
        assert_eq!(t.len(), r * c);
        Self {
            r,
            c,
            d: t.data().to_vec(),
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.d[i * self.c + j] = v;
    }

    /// `a · b`, `aᵀ · b` or `a · bᵀ` per the flags.
    fn mul(a: &M, ta: bool, b: &M, tb: bool) -> M {
        let (ar, ac) = if ta { (a.c, a.r) } else { (a.r, a.c) };
        let (br, bc) = if tb { (b.c, b.r) } else { (b.r, b.c) };
        assert_eq!(ac, br);
        let ga = |i, k| if ta { a.at(k, i) } else { a.at(i, k) };
        let gb = |k, j| if tb { b.at(j, k) } else { b.at(k, j) };
        let mut out = M::zeros(ar, bc);
        for i in 0..ar {
            for j in 0..bc {
                out.set(i, j, (0..ac).map(|k| ga(i, k) * gb(k, j)).sum());
            }
        }
        out
    }

    fn add_row(mut self, b: &[f64]) -> M {
        for i in 0..self.r {
            for j in 0..self.c {
                self.d[i * self.c + j] += b[j];
            }
        }
        self
    }

    fn col_sums(&self) -> Vec<f64> {
        (0..self.c).map(|j| (0..self.r).map(|i| self.at(i, j)).sum()).collect()
    }

    fn relu(&self) -> M {
        M {
            d: self.d.iter().map(|&v| v.max(0.0)).collect(),
            ..*self
        }
    }

    fn softmax(&self) -> M {
        let mut out = self.clone();
        for i in 0..self.r {
            let row = &mut out.d[i * self.c..(i + 1) * self.c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - m).exp());
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        out
    }

    fn axpy(&self, alpha: f64, x: &M) -> M {
        M {
            d: self.d.iter().zip(&x.d).map(|(a, b)| a + alpha * b).collect(),
            ..*self
        }
    }
}

fn axpy(a: &[f64], alpha: f64, x: &[f64]) -> Vec<f64> {
    a.iter().zip(x).map(|(a, b)| a + alpha * b).collect()
}

/// `−(1/N) Σ y (1−p)^γ log p`.
fn focal(p: &M, y: &M, gamma: f64) -> f64 {
    let s: f64 =
        p.d.iter()
            .zip(&y.d)
            .map(|(&p, &y)| {
                let p = p.max(FLOOR);
                y * (1.0 - p).powf(gamma) * p.ln()
            })
            .sum();
    -s / p.r as f64
}

/// Derivative of [`focal`] with respect to `p`.
fn focal_grad(p: &M, y: &M, gamma: f64) -> M {
    let n = p.r as f64;
    M {
        d: p.d
            .iter()
            .zip(&y.d)
            .map(|(&p, &y)| {
                let mut t = (1.0 - p).powf(gamma) / p;
                if gamma != 0.0 {
                    t -= gamma * (1.0 - p).powf(gamma - 1.0) * p.ln();
                }
                -y * t / n
            })
            .collect(),
        ..*p
    }
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
fn softmax_back(p: &M, dp: &M) -> M {
    let mut out = M::zeros(p.r, p.c);
    for i in 0..p.r {
        let dot: f64 = (0..p.c).map(|j| p.at(i, j) * dp.at(i, j)).sum();
        for j in 0..p.c {
            out.set(i, j, p.at(i, j) * (dp.at(i, j) - dot));
        }
    }
    out
}

fn take(params: &ParamSet, name: &str) -> Tensor {
    params
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .clone()
}

fn assert_order(params: &ParamSet, expected: &[&str]) {
    let names: Vec<&str> = params.names().iter().map(String::as_str).collect();
    assert_eq!(names, expected, "unexpected parameter layout");
}

/// Shared hidden layer with a primary and an auxiliary softmax head.
#[derive(Clone, Debug)]
pub struct TwoHeadMlp {
    w: M,
    b: Vec<f64>,
    wp: M,
    bp: Vec<f64>,
    wa: M,
    ba: Vec<f64>,
}

struct Forward {
    z: M,
    h: M,
    p: M,
    a: M,
}

impl TwoHeadMlp {
    pub fn from_params(params: &ParamSet) -> Self {
        assert_order(
            params,
            &[
                "trunk.fc0.weight",
                "trunk.fc0.bias",
                "primary.weight",
                "primary.bias",
                "aux.weight",
                "aux.bias",
            ],
        );
        let mat = |name: &str| {
            let t = take(params, name);
            M::from_tensor(&t, t.shape()[0], t.shape()[1])
        };
        Self {
            w: mat("trunk.fc0.weight"),
            b: take(params, "trunk.fc0.bias").into_data(),
            wp: mat("primary.weight"),
            bp: take(params, "primary.bias").into_data(),
            wa: mat("aux.weight"),
            ba: take(params, "aux.bias").into_data(),
        }
    }

    fn forward(&self, x: &M) -> Forward {
        let z = M::mul(x, false, &self.w, false).add_row(&self.b);
        let h = z.relu();
        let p = M::mul(&h, false, &self.wp, false).add_row(&self.bp).softmax();
        let a = M::mul(&h, false, &self.wa, false).add_row(&self.ba).softmax();
        Forward { z, h, p, a }
    }

    /// Gradient of `focal(primary, yp) + focal(aux, ya)`, in parameter order.
    fn inner_grad(&self, x: &M, yp: &M, ya: &M, gamma: f64) -> TwoHeadMlp {
        let f = self.forward(x);
        let dp = softmax_back(&f.p, &focal_grad(&f.p, yp, gamma));
        let da = softmax_back(&f.a, &focal_grad(&f.a, ya, gamma));
        let mut dh = M::mul(&dp, false, &self.wp, true).axpy(1.0, &M::mul(&da, false, &self.wa, true));
        for (g, &z) in dh.d.iter_mut().zip(&f.z.d) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        TwoHeadMlp {
            w: M::mul(x, true, &dh, false),
            b: dh.col_sums(),
            wp: M::mul(&f.h, true, &dp, false),
            bp: dp.col_sums(),
            wa: M::mul(&f.h, true, &da, false),
            ba: da.col_sums(),
        }
    }

    /// `self − alpha · g`.
    fn step(&self, g: &TwoHeadMlp, alpha: f64) -> TwoHeadMlp {
        TwoHeadMlp {
            w: self.w.axpy(-alpha, &g.w),
            b: axpy(&self.b, -alpha, &g.b),
            wp: self.wp.axpy(-alpha, &g.wp),
            bp: axpy(&self.bp, -alpha, &g.bp),
            wa: self.wa.axpy(-alpha, &g.wa),
            ba: axpy(&self.ba, -alpha, &g.ba),
        }
    }
}

/// Hidden layer, then a linear head whose softmax is restricted to the
/// primary class's auxiliary block.
#[derive(Clone, Debug)]
pub struct Generator {
    w: M,
    b: Vec<f64>,
    wg: M,
    bg: Vec<f64>,
}

impl Generator {
    pub fn from_params(params: &ParamSet) -> Self {
        assert_order(
            params,
            &["backbone.fc0.weight", "backbone.fc0.bias", "gen.weight", "gen.bias"],
        );
        let w = take(params, "backbone.fc0.weight");
        let wg = take(params, "gen.weight");
        Self {
            w: M::from_tensor(&w, w.shape()[0], w.shape()[1]),
            b: take(params, "backbone.fc0.bias").into_data(),
            wg: M::from_tensor(&wg, wg.shape()[0], wg.shape()[1]),
            bg: take(params, "gen.bias").into_data(),
        }
    }

    /// All parameters in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w.d, &self.b, &self.wg.d, &self.bg]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    /// Same shapes as `like`, values from `flat`.
    pub fn from_flat(like: &Generator, flat: &[f64]) -> Self {
        let mut out = like.clone();
        let mut rest = flat;
        for dst in [&mut out.w.d, &mut out.b, &mut out.wg.d, &mut out.bg] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        assert!(rest.is_empty());
        out
    }

    /// Pre-activations and masked-softmax labels.
    fn labels(&self, x: &M, labels: &[usize], psi: &Hierarchy) -> (M, M) {
        let z = M::mul(x, false, &self.w, false).add_row(&self.b);
        let logits = M::mul(&z.relu(), false, &self.wg, false).add_row(&self.bg);
        let mut out = M::zeros(logits.r, logits.c);
        for (i, &y) in labels.iter().enumerate() {
            let block = psi.block(y).unwrap();
            let m = block.clone().map(|k| logits.at(i, k)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = block.clone().map(|k| (logits.at(i, k) - m).exp()).sum();
            for k in block {
                out.set(i, k, (logits.at(i, k) - m).exp() / z);
            }
        }
        (z, out)
    }
}

/// One meta-gradient problem: a batch and the run constants.
pub struct Instance {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub hierarchy: Hierarchy,
}

impl Instance {
    fn x(&self) -> M {
        let n = self.labels.len();
        M::from_tensor(&self.images, n, self.images.len() / n)
    }

    fn one_hot(&self) -> M {
        let p = self.hierarchy.num_primary();
        let mut y = M::zeros(self.labels.len(), p);
        for (i, &l) in self.labels.iter().enumerate() {
            y.set(i, l, 1.0);
        }
        y
    }

    fn looked_ahead(&self, net: &TwoHeadMlp, gen: &Generator) -> (M, TwoHeadMlp) {
        let x = self.x();
        let (_, ya) = gen.labels(&x, &self.labels, &self.hierarchy);
        let g = net.inner_grad(&x, &self.one_hot(), &ya, self.gamma);
        (ya, net.step(&g, self.alpha))
    }

    /// Primary focal loss after one SGD step on the combined loss, plus
    /// `λ · Σ m̄ log m̄` of the generated labels' batch mean.
    pub fn meta_loss(&self, net: &TwoHeadMlp, gen: &Generator) -> f64 {
        let (ya, plus) = self.looked_ahead(net, gen);
        let outer = focal(&plus.forward(&self.x()).p, &self.one_hot(), self.gamma);
        let n = ya.r as f64;
        let entropy: f64 = ya
            .col_sums()
            .iter()
            .map(|&s| {
                let m = s / n;
                m * m.max(FLOOR).ln()
            })
            .sum();
        outer + self.lambda * entropy
    }

    /// Smallest |pre-activation| of any ReLU whose input moves with the
    /// generator's parameters, or at which the inner gradient is taken.
    pub fn kink_distance(&self, net: &TwoHeadMlp, gen: &Generator) -> f64 {
        let x = self.x();
        let (zg, _) = gen.labels(&x, &self.labels, &self.hierarchy);
        let (_, plus) = self.looked_ahead(net, gen);
        [net.forward(&x).z, zg, plus.forward(&x).z]
            .iter()
            .flat_map(|m| m.d.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}
