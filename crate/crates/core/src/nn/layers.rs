use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParamSet;
use crate::autograd::{Conv2d, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Trunk family shared by both networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Fully connected ReLU layers of the given widths.
    Mlp { hidden: Vec<usize> },
    /// Two 3x3 conv + ReLU + 2x2 max-pool blocks, then one dense ReLU layer.
    ConvNet4 { conv: [usize; 2], dense: usize },
}

impl Architecture {
    pub fn mlp() -> Self {
        Architecture::Mlp { hidden: vec![256, 256] }
    }

    pub fn convnet4() -> Self {
        Architecture::ConvNet4 {
            conv: [32, 64],
            dense: 128,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Architecture::ConvNet4 { .. })
    }

    /// Lays a `[N, C, H, W]` image batch out the way the first layer expects:
    /// `[N, C*H*W]` for the MLP, channels-last `[N, H, W, C]` for the ConvNet.
    pub fn input_tensor(&self, images: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = match *images.shape() {
            [n, c, h, w] => [n, c, h, w],
            [n, d] if !self.is_conv() => return images.clone().reshape(&[n, d]),
            ref s => return Err(Error::shape("input", format!("expected [N, C, H, W], got {s:?}"))),
        };
        if !self.is_conv() {
            return images.clone().reshape(&[n, c * h * w]);
        }
        if c == 1 {
            return images.clone().reshape(&[n, h, w, 1]);
        }
        let src = images.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[((b * h + y) * w + x) * c + ch] = src[((b * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
        Tensor::new(vec![n, h, w, c], out)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Mlp { hidden } => {
                let h: Vec<String> = hidden.iter().map(usize::to_string).collect();
                write!(f, "mlp({})", h.join(","))
            }
            Architecture::ConvNet4 { conv, dense } => {
                write!(f, "convnet-4({},{},{})", conv[0], conv[1], dense)
            }
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Accepts `mlp`, `mlp(w1,w2,...)`, `convnet-4` and `convnet-4(c1,c2,dense)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let unknown = || Error::UnknownArchitecture(s.to_string());
        let (name, widths) = match s.find('(') {
            Some(i) if s.ends_with(')') => {
                let inner = &s[i + 1..s.len() - 1];
                let widths = inner
                    .split(',')
                    .map(|w| w.trim().parse::<usize>().ok().filter(|&w| w > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(unknown)?;
                (&s[..i], Some(widths))
            }
            Some(_) => return Err(unknown()),
            None => (s, None),
        };
        match (name, widths) {
            ("mlp", None) => Ok(Architecture::mlp()),
            ("mlp", Some(hidden)) if !hidden.is_empty() => Ok(Architecture::Mlp { hidden }),
            ("convnet-4", None) => Ok(Architecture::convnet4()),
            ("convnet-4", Some(w)) if w.len() == 3 => Ok(Architecture::ConvNet4 {
                conv: [w[0], w[1]],
                dense: w[2],
            }),
            _ => Err(unknown()),
        }
    }
}

/// Per-sample input dimensions `C x H x W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// A flat feature vector of length `dim`.
    pub fn flat(dim: usize) -> Self {
        Self::new(1, 1, dim)
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl FromStr for InputShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad input shape `{s}`")))?;
        match dims[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Self::new(c, h, w)),
            _ => Err(Error::InvalidArgument(format!("bad input shape `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Dense {
        w: usize,
        b: usize,
    },
    /// 3x3 valid convolution, bias, ReLU, 2x2 max-pool.
    ConvBlock {
        w: usize,
        b: usize,
        kernel: usize,
    },
    Relu,
    Flatten,
}

/// Sequential layers whose parameters live in a [`ParamSet`] and are passed in
/// at call time, so the same stack can run on substituted (virtual) parameters.
#[derive(Clone, Debug)]
pub struct Stack {
    layers: Vec<Layer>,
    out_dim: usize,
}

const CONV_KERNEL: usize = 3;

pub(crate) fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl Stack {
    /// Builds the trunk for `arch` and registers its parameters under `prefix`.
    pub(crate) fn trunk(
        arch: &Architecture,
        input: InputShape,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let out_dim;
        match arch {
            Architecture::Mlp { hidden } => {
                let mut width = input.numel();
                for (i, &h) in hidden.iter().enumerate() {
                    layers.push(Self::dense(params, &format!("{prefix}.fc{i}"), width, h, rng));
                    layers.push(Layer::Relu);
                    width = h;
                }
                out_dim = width;
            }
            Architecture::ConvNet4 { conv, dense } => {
                let (mut h, mut w, mut c) = (input.height, input.width, input.channels);
                for (i, &out) in conv.iter().enumerate() {
                    if h < CONV_KERNEL + 1 || w < CONV_KERNEL + 1 {
                        return Err(Error::InvalidArgument(format!("input {input} too small for convnet-4")));
                    }
                    let fan_in = CONV_KERNEL * CONV_KERNEL * c;
                    let wi = params.push(
                        format!("{prefix}.conv{i}.weight"),
                        he_normal(rng, &[fan_in, out], fan_in),
                        true,
                    );
                    let bi = params.push(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[out]), false);
                    layers.push(Layer::ConvBlock {
                        w: wi,
                        b: bi,
                        kernel: CONV_KERNEL,
                    });
                    h = (h - CONV_KERNEL).div_ceil(2);
                    w = (w - CONV_KERNEL).div_ceil(2);
                    c = out;
                }
                layers.push(Layer::Flatten);
                layers.push(Self::dense(params, &format!("{prefix}.fc"), h * w * c, *dense, rng));
                layers.push(Layer::Relu);
                out_dim = *dense;
            }
        }
        Ok(Self { layers, out_dim })
    }

    fn dense(params: &mut ParamSet, name: &str, fan_in: usize, out: usize, rng: &mut impl Rng) -> Layer {
        let w = params.push(format!("{name}.weight"), he_normal(rng, &[fan_in, out], fan_in), true);
        let b = params.push(format!("{name}.bias"), Tensor::zeros(&[out]), false);
        Layer::Dense { w, b }
    }

    /// Output feature width.
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = match *layer {
                Layer::Dense { w, b } => linear(g, x, p[w], p[b])?,
                Layer::ConvBlock { w, b, kernel } => {
                    let [n, h, wd, c] = match *g.shape(x) {
                        [n, h, wd, c] => [n, h, wd, c],
                        ref s => return Err(Error::shape("conv2d", format!("expected [N,H,W,C], got {s:?}"))),
                    };
                    let geom = Conv2d {
                        batch: n,
                        height: h,
                        width: wd,
                        in_channels: c,
                        kernel,
                        stride: 1,
                        padding: 0,
                    };
                    // Pooling commutes with a per-channel bias and with ReLU,
                    // so both run on the pooled map.
                    let y = g.conv(x, p[w], &geom)?;
                    let y = g.max_pool2d(y, 2)?;
                    let y = g.bias_add(y, p[b])?;
                    g.relu(y)
                }
                Layer::Relu => g.relu(x),
                Layer::Flatten => {
                    let s = g.shape(x);
                    let n = s[0];
                    let rest = s[1..].iter().product();
                    g.reshape(x, &[n, rest])?
                }
            };
        }
        Ok(x)
    }
}

/// `x · W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.bias_add(y, b)
}

/// A dense head registered under `name`; returns `(weight, bias)` indices.
pub(crate) fn head(params: &mut ParamSet, name: &str, fan_in: usize, out: usize, rng: &mut impl Rng) -> (usize, usize) {
    let w = params.push(format!("{name}.weight"), he_normal(rng, &[fan_in, out], fan_in), true);
    let b = params.push(format!("{name}.bias"), Tensor::zeros(&[out]), false);
    (w, b)
}
