use std::rc::Rc;

use super::conv::Conv2d;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Marks a padded position in a gather index list; reads as zero.
pub const PAD: u32 = u32::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    ScalarMul(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    Relu(usize),
    Clamp(usize, f64, f64),
    Maximum(usize, usize),
    Sum(usize),
    Fill(usize),
    RepeatRows(usize),
    SumRows(usize),
    RepeatCols(usize),
    SumCols(usize),
    Softmax(usize),
    Reshape(usize),
    Gather(usize, Rc<[u32]>),
    Scatter(usize, Rc<[u32]>),
    /// `g * (x > 0)`, the rectifier's backward map.
    StepMul(usize, usize),
    /// `a + b` with `b` broadcast along every leading axis of `a`.
    BiasAdd(usize, usize),
    /// Convolution without bias, `[N, H, W, C] -> [N, OH, OW, C_out]`.
    Conv {
        x: usize,
        w: usize,
        geom: Conv2d,
    },
    /// Adjoint of `Conv` in its input: `[N, OH, OW, C_out] -> [N, H, W, C]`.
    ConvInput {
        g: usize,
        w: usize,
        geom: Conv2d,
    },
    /// Adjoint of `Conv` in its weight: `[K*K*C, C_out]`.
    ConvWeight {
        x: usize,
        g: usize,
        geom: Conv2d,
    },
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Maximum(a, b) => [Some(a), Some(b)],
            MatMul { a, b, .. } => [Some(a), Some(b)],
            ScalarMul(a, _) | AddScalar(a) | Exp(a) | Log(a) | Powf(a, _) | Relu(a) => [Some(a), None],
            Clamp(a, _, _) | Sum(a) | Fill(a) | RepeatRows(a) | SumRows(a) => [Some(a), None],
            RepeatCols(a) | SumCols(a) | Softmax(a) | Reshape(a) => [Some(a), None],
            Gather(a, _) | Scatter(a, _) => [Some(a), None],
            StepMul(a, b) | BiasAdd(a, b) => [Some(a), Some(b)],
            Conv { x, w, .. } => [Some(x), Some(w)],
            ConvInput { g, w, .. } => [Some(g), Some(w)],
            ConvWeight { x, g, .. } => [Some(x), Some(g)],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Eagerly evaluated computation tape.
///
/// Every operation computes its value immediately and appends a node, so node
/// order is a topological order. Backward rules are themselves recorded as
/// graph operations, which makes returned gradients differentiable.
pub struct Graph {
    nodes: Vec<Node>,
    released_upto: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            released_upto: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().flatten().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, Tensor::from_parts(shape, data))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(Op::Add(a.0, b.0), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(Op::Sub(a.0, b.0), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(Op::Mul(a.0, b.0), a, b, |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.binary(Op::Div(a.0, b.0), a, b, |x, y| x / y))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise-max", a, b)?;
        Ok(self.binary(Op::Maximum(a.0, b.0), a, b, f64::max))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must be 2-D, got {sa:?} and {sb:?}"),
            ));
        }
        let (ar, ac) = (sa[0], sa[1]);
        let (br, bc) = (sb[0], sb[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions differ: {sa:?}{} x {sb:?}{}",
                    if ta { "ᵀ" } else { "" },
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let out = gemm(self.data(a), (ar, ac), ta, self.data(b), (br, bc), tb);
        Ok(self.push(
            Op::MatMul { a: a.0, b: b.0, ta, tb },
            Tensor::from_parts(vec![m, n], out),
        ))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::ScalarMul(a.0, c), a, |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scalar_mul(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::AddScalar(a.0), a, |x| x + c)
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a.0), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a.0), a, f64::ln)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(Op::Powf(a.0, p), a, |x| x.powf(p))
    }

    /// Rectifier. Its derivative is a step mask, so the second derivative is zero
    /// everywhere, including at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu(a.0), a, |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(a.0, lo, hi), a, |x| x.clamp(lo, hi))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Op::Sum(a.0), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scalar_mul(s, 1.0 / n)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn fill(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(Error::shape(
                "fill",
                format!("source must hold one value, got {:?}", self.shape(a)),
            ));
        }
        let v = self.data(a)[0];
        Ok(self.push(Op::Fill(a.0), Tensor::full(shape, v)))
    }

    /// `[c] -> [n, c]`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(Error::shape(
                "repeat-rows",
                format!("expected 1-D, got {:?}", self.shape(a)),
            ));
        }
        let row = self.data(a);
        let c = row.len();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Ok(self.push(Op::RepeatRows(a.0), Tensor::from_parts(vec![n, c], data)))
    }

    /// `[..., c] -> [c]`, summing over every leading axis.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let c = match *self.shape(a) {
            [.., c] if self.shape(a).len() >= 2 => c,
            ref s => return Err(Error::shape("sum-rows", format!("expected at least 2-D, got {s:?}"))),
        };
        let n = if c == 0 { 0 } else { self.value(a).len() / c };
        let mut out = vec![0.0; c];
        let d = self.data(a);
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(&d[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        Ok(self.push(Op::SumRows(a.0), Tensor::from_parts(vec![c], out)))
    }

    /// `[n] -> [n, c]`, repeating each value along a row.
    pub fn repeat_cols(&mut self, a: Var, c: usize) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(Error::shape(
                "repeat-cols",
                format!("expected 1-D, got {:?}", self.shape(a)),
            ));
        }
        let d = self.data(a);
        let n = d.len();
        let mut data = Vec::with_capacity(n * c);
        for &v in d {
            data.extend(std::iter::repeat_n(v, c));
        }
        Ok(self.push(Op::RepeatCols(a.0), Tensor::from_parts(vec![n, c], data)))
    }

    /// `[n, c] -> [n]`, summing each row.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.dims2("sum-cols", a)?;
        let d = self.data(a);
        let out = (0..n).map(|r| d[r * c..(r + 1) * c].iter().sum()).collect();
        Ok(self.push(Op::SumCols(a.0), Tensor::from_parts(vec![n], out)))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.dims2("softmax", a)?;
        let d = self.data(a);
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &d[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * c..(r + 1) * c];
            let mut z = 0.0;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in dst.iter_mut() {
                *o /= z;
            }
        }
        Ok(self.push(Op::Softmax(a.0), Tensor::from_parts(vec![n, c], out)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.data(a).to_vec());
        Ok(self.push(Op::Reshape(a.0), value))
    }

    /// `out[i] = a[index[i]]`, or zero where `index[i] == PAD`.
    pub fn gather(&mut self, a: Var, index: Rc<[u32]>, shape: &[usize]) -> Result<Var> {
        let len = self.value(a).len();
        if numel(shape) != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for output shape {shape:?}", index.len()),
            ));
        }
        if index.iter().any(|&i| i != PAD && i as usize >= len) {
            return Err(Error::shape("gather", format!("index out of range for {len} elements")));
        }
        let d = self.data(a);
        let out = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { d[i as usize] })
            .collect();
        Ok(self.push(Op::Gather(a.0, index), Tensor::from_parts(shape.to_vec(), out)))
    }

    /// Records a gather whose in-range `index` and output `value` the caller already computed.
    pub(crate) fn push_gather(&mut self, a: Var, index: Rc<[u32]>, value: Tensor) -> Var {
        debug_assert_eq!(index.len(), value.len());
        self.push(Op::Gather(a.0, index), value)
    }

    /// Adjoint of [`gather`](Self::gather): accumulates `a[i]` into `out[index[i]]`.
    pub fn scatter(&mut self, a: Var, index: Rc<[u32]>, shape: &[usize]) -> Result<Var> {
        let len = numel(shape);
        if self.value(a).len() != index.len() {
            return Err(Error::shape(
                "scatter",
                format!("{} indices for {} values", index.len(), self.value(a).len()),
            ));
        }
        if index.iter().any(|&i| i != PAD && i as usize >= len) {
            return Err(Error::shape(
                "scatter",
                format!("index out of range for {len} elements"),
            ));
        }
        let mut out = vec![0.0; len];
        for (&i, &v) in index.iter().zip(self.data(a)) {
            if i != PAD {
                out[i as usize] += v;
            }
        }
        Ok(self.push(Op::Scatter(a.0, index), Tensor::from_parts(shape.to_vec(), out)))
    }

    /// `g` where `x > 0`, zero elsewhere.
    pub fn step_mul(&mut self, g: Var, x: Var) -> Result<Var> {
        self.same_shape("step-mul", g, x)?;
        Ok(self.binary(Op::StepMul(g.0, x.0), g, x, |v, x| if x > 0.0 { v } else { 0.0 }))
    }

    /// Adds `b: [c]` to every row of `a: [..., c]`.
    pub fn bias_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = *self.shape(a).last().unwrap_or(&0);
        if self.shape(b) != [c] || self.shape(a).len() < 2 {
            return Err(Error::shape(
                "bias-add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bias = self.data(b);
        let data = self
            .data(a)
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::BiasAdd(a.0, b.0), Tensor::from_parts(shape, data)))
    }

    fn check_conv(&self, geom: &Conv2d, x: Option<Var>, w: Option<Var>, out: Option<Var>) -> Result<usize> {
        geom.validate()?;
        let cout = match (w, out) {
            (Some(w), _) => {
                let ws = self.shape(w);
                if ws.len() != 2 || ws[0] != geom.patch_len() {
                    return Err(Error::shape(
                        "conv2d",
                        format!("weight {ws:?} does not match patch length {}", geom.patch_len()),
                    ));
                }
                ws[1]
            }
            (None, Some(o)) => *self.shape(o).last().unwrap_or(&0),
            (None, None) => unreachable!("conv operand without weight or output"),
        };
        if let Some(x) = x {
            let expect = [geom.batch, geom.height, geom.width, geom.in_channels];
            if self.shape(x) != expect {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {:?} does not match geometry {expect:?}", self.shape(x)),
                ));
            }
        }
        if let Some(o) = out {
            let expect = geom.output_shape(cout);
            if self.shape(o) != expect {
                return Err(Error::shape(
                    "conv2d",
                    format!("output gradient {:?} does not match {expect:?}", self.shape(o)),
                ));
            }
        }
        Ok(cout)
    }

    /// Bias-free convolution of `x: [N, H, W, C]` with `w: [K*K*C, C_out]`.
    pub fn conv(&mut self, x: Var, w: Var, geom: &Conv2d) -> Result<Var> {
        let cout = self.check_conv(geom, Some(x), Some(w), None)?;
        let y = geom.apply(self.data(x), self.data(w), cout);
        Ok(self.push(
            Op::Conv {
                x: x.0,
                w: w.0,
                geom: *geom,
            },
            Tensor::from_parts(geom.output_shape(cout).to_vec(), y),
        ))
    }

    /// Gradient of `<g, conv(x, w)>` with respect to `x`.
    pub fn conv_input(&mut self, g: Var, w: Var, geom: &Conv2d) -> Result<Var> {
        let cout = self.check_conv(geom, None, Some(w), Some(g))?;
        let x = geom.input_grad(self.data(g), self.data(w), cout);
        let shape = vec![geom.batch, geom.height, geom.width, geom.in_channels];
        Ok(self.push(
            Op::ConvInput {
                g: g.0,
                w: w.0,
                geom: *geom,
            },
            Tensor::from_parts(shape, x),
        ))
    }

    /// Gradient of `<g, conv(x, w)>` with respect to `w`.
    pub fn conv_weight(&mut self, x: Var, g: Var, geom: &Conv2d) -> Result<Var> {
        let cout = self.check_conv(geom, Some(x), None, Some(g))?;
        let w = geom.weight_grad(self.data(x), self.data(g), cout);
        Ok(self.push(
            Op::ConvWeight {
                x: x.0,
                g: g.0,
                geom: *geom,
            },
            Tensor::from_parts(vec![geom.patch_len(), cout], w),
        ))
    }

    fn dims2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [n, c] => Ok((n, c)),
            ref s => Err(Error::shape(op, format!("expected 2-D, got {s:?}"))),
        }
    }

    fn mask(&mut self, a: Var, f: impl Fn(f64) -> bool) -> Var {
        let m = self.value(a).map(|x| if f(x) { 1.0 } else { 0.0 });
        self.constant(m)
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// Backward rules are recorded on this graph, so the returned gradients are
    /// nodes that can be differentiated again. With `retain == false` the forward
    /// part of the graph up to `loss` is released and any later backward pass
    /// that needs it fails with [`Error::DetachedLoss`].
    pub fn backward(&mut self, loss: Var, wrt: &[Var], retain: bool) -> Result<Vec<Var>> {
        let root = loss.0;
        if root >= self.nodes.len() || root < self.released_upto {
            return Err(Error::DetachedLoss(root));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }

        let mut relevant = vec![false; root + 1];
        for w in wrt {
            if w.0 <= root {
                relevant[w.0] = true;
            }
        }
        for i in 0..=root {
            if !relevant[i] {
                relevant[i] = self.nodes[i].op.inputs().iter().flatten().any(|&j| relevant[j]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; root + 1];
        if relevant[root] {
            let seed = Tensor::ones(self.shape(loss));
            grads[root] = Some(self.constant(seed));
        }
        for i in (0..=root).rev() {
            if !relevant[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            if i < self.released_upto {
                return Err(Error::DetachedLoss(root));
            }
            for (j, gj) in self.vjp(i, g, &relevant)? {
                grads[j] = Some(match grads[j] {
                    None => gj,
                    Some(prev) => self.add(prev, gj)?,
                });
            }
        }

        let out = wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(*w));
                    self.constant(z)
                }
            })
            .collect();
        if !retain {
            self.released_upto = self.released_upto.max(root + 1);
        }
        Ok(out)
    }

    /// Vector-Jacobian product of node `i` with upstream gradient `g`, for the
    /// inputs flagged in `relevant`.
    fn vjp(&mut self, i: usize, g: Var, relevant: &[bool]) -> Result<Vec<(usize, Var)>> {
        let op = self.nodes[i].op.clone();
        let out = Var(i);
        let mut res = Vec::with_capacity(2);
        let want = |j: usize| relevant[j];
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, self.neg(g)));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    res.push((a, self.mul(g, Var(b))?));
                }
                if want(b) {
                    res.push((b, self.mul(g, Var(a))?));
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    res.push((a, self.div(g, Var(b))?));
                }
                if want(b) {
                    let t = self.mul(g, out)?;
                    let t = self.div(t, Var(b))?;
                    res.push((b, self.neg(t)));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                if want(a) {
                    let ga = if ta {
                        self.matmul_t(Var(b), g, tb, true)?
                    } else {
                        self.matmul_t(g, Var(b), false, !tb)?
                    };
                    res.push((a, ga));
                }
                if want(b) {
                    let gb = if tb {
                        self.matmul_t(g, Var(a), true, ta)?
                    } else {
                        self.matmul_t(Var(a), g, !ta, false)?
                    };
                    res.push((b, gb));
                }
            }
            Op::ScalarMul(a, c) => res.push((a, self.scalar_mul(g, c))),
            Op::AddScalar(a) => res.push((a, g)),
            Op::Exp(a) => res.push((a, self.mul(g, out)?)),
            Op::Log(a) => res.push((a, self.div(g, Var(a))?)),
            Op::Powf(a, p) => {
                if p == 1.0 {
                    res.push((a, g));
                } else if p != 0.0 {
                    let d = if p == 2.0 { Var(a) } else { self.powf(Var(a), p - 1.0) };
                    let d = self.scalar_mul(d, p);
                    res.push((a, self.mul(g, d)?));
                }
            }
            Op::Relu(a) => res.push((a, self.step_mul(g, Var(a))?)),
            Op::Clamp(a, lo, hi) => {
                let m = self.mask(Var(a), |x| (lo..=hi).contains(&x));
                res.push((a, self.mul(g, m)?));
            }
            Op::Maximum(a, b) => {
                let keep_a: Vec<f64> = self
                    .data(Var(a))
                    .iter()
                    .zip(self.data(Var(b)))
                    .map(|(x, y)| if x >= y { 1.0 } else { 0.0 })
                    .collect();
                let shape = self.shape(Var(a)).to_vec();
                if want(a) {
                    let m = self.constant(Tensor::from_parts(shape.clone(), keep_a.clone()));
                    res.push((a, self.mul(g, m)?));
                }
                if want(b) {
                    let inv = keep_a.iter().map(|k| 1.0 - k).collect();
                    let m = self.constant(Tensor::from_parts(shape, inv));
                    res.push((b, self.mul(g, m)?));
                }
            }
            Op::Sum(a) => {
                let shape = self.shape(Var(a)).to_vec();
                res.push((a, self.fill(g, &shape)?));
            }
            Op::Fill(a) => {
                let s = self.sum(g);
                let shape = self.shape(Var(a)).to_vec();
                res.push((a, self.reshape(s, &shape)?));
            }
            Op::RepeatRows(a) => res.push((a, self.sum_rows(g)?)),
            Op::SumRows(a) => {
                let shape = self.shape(Var(a)).to_vec();
                let c = shape[shape.len() - 1];
                let rows = self.repeat_rows(g, numel(&shape) / c.max(1))?;
                let rows = if shape.len() == 2 {
                    rows
                } else {
                    self.reshape(rows, &shape)?
                };
                res.push((a, rows));
            }
            Op::RepeatCols(a) => res.push((a, self.sum_cols(g)?)),
            Op::SumCols(a) => {
                let c = self.shape(Var(a))[1];
                res.push((a, self.repeat_cols(g, c)?));
            }
            Op::Softmax(a) => {
                let c = self.shape(Var(a))[1];
                let gy = self.mul(g, out)?;
                let s = self.sum_cols(gy)?;
                let s = self.repeat_cols(s, c)?;
                let d = self.sub(g, s)?;
                res.push((a, self.mul(out, d)?));
            }
            Op::Reshape(a) => {
                let shape = self.shape(Var(a)).to_vec();
                res.push((a, self.reshape(g, &shape)?));
            }
            Op::Gather(a, index) => {
                let shape = self.shape(Var(a)).to_vec();
                res.push((a, self.scatter(g, index, &shape)?));
            }
            Op::Scatter(a, index) => {
                let shape = self.shape(Var(a)).to_vec();
                res.push((a, self.gather(g, index, &shape)?));
            }
            Op::StepMul(a, x) => {
                // zero almost everywhere in `x`
                if want(a) {
                    res.push((a, self.step_mul(g, Var(x))?));
                }
            }
            Op::BiasAdd(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, self.sum_rows(g)?));
                }
            }
            Op::Conv { x, w, geom } => {
                if want(x) {
                    res.push((x, self.conv_input(g, Var(w), &geom)?));
                }
                if want(w) {
                    res.push((w, self.conv_weight(Var(x), g, &geom)?));
                }
            }
            Op::ConvInput { g: up, w, geom } => {
                if want(up) {
                    res.push((up, self.conv(g, Var(w), &geom)?));
                }
                if want(w) {
                    res.push((w, self.conv_weight(g, Var(up), &geom)?));
                }
            }
            Op::ConvWeight { x, g: up, geom } => {
                if want(x) {
                    res.push((x, self.conv_input(Var(up), g, &geom)?));
                }
                if want(up) {
                    res.push((up, self.conv(Var(x), g, &geom)?));
                }
            }
        }
        Ok(res)
    }
}

/// `op(a) · op(b)` for row-major `a: [ar, ac]`, `b: [br, bc]`, where `op`
/// transposes when the flag is set. Callers check the inner dimensions.
pub(crate) fn gemm(
    a: &[f64],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[f64],
    (br, bc): (usize, usize),
    tb: bool,
) -> Vec<f64> {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    let mut out = Vec::with_capacity(m * n);
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    assert!(a.len() >= ar * ac && b.len() >= br * bc);
    // SAFETY: the slices hold `ar*ac` and `br*bc` elements and the strides
    // describe in-bounds row-major or transposed views. With beta = 0 the
    // kernel writes every element of `out` without reading it.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
        out.set_len(m * n);
    }
    out
}

/// A strided matrix view into `data` starting at `offset`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    offset: usize,
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    pub(crate) fn new(data: &'a [f64], offset: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rs, cs }
    }

    fn check(&self, rows: usize, cols: usize) {
        assert!(self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len());
    }
}

/// `c[m, n] = a · b + beta * c` where `c` starts at `c_off` with row stride
/// `rsc` and unit column stride. Rows of `c` must not overlap (`rsc >= n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: Mat,
    b: Mat,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(rsc >= n && c_off + (m - 1) * rsc + n <= c.len());
    if k == 0 {
        for r in 0..m {
            c[c_off + r * rsc..c_off + r * rsc + n]
                .iter_mut()
                .for_each(|v| *v *= beta);
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    // SAFETY: every view was bounds-checked above and rows of `c` are disjoint.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            1,
        );
    }
}
