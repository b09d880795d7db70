use std::fmt;
use std::str::FromStr;

use super::conv::Conv2d;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Operation kinds accepted by [`Graph::record`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv2d,
    Relu,
    Log,
    Exp,
    Power,
    Sum,
    Mean,
    Softmax,
    Reshape,
    MaxPool,
    ElementwiseMax,
    ScalarMul,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Power,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Softmax,
        OpKind::Reshape,
        OpKind::MaxPool,
        OpKind::ElementwiseMax,
        OpKind::ScalarMul,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Power => "power",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Softmax => "softmax",
            OpKind::Reshape => "reshape",
            OpKind::MaxPool => "max-pool",
            OpKind::ElementwiseMax => "elementwise-max",
            OpKind::ScalarMul => "scalar-mul",
        }
    }

    /// Number of input variables.
    pub fn arity(self) -> usize {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => 2,
            OpKind::MatMul | OpKind::ElementwiseMax => 2,
            OpKind::Conv2d => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Extra parameters for [`Graph::record`].
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    /// Exponent for `power`, factor for `scalar-mul`.
    pub scalar: Option<f64>,
    /// Target shape for `reshape`.
    pub shape: Option<Vec<usize>>,
    /// Geometry for `conv2d`.
    pub conv: Option<Conv2d>,
    /// Window for `max-pool` (default 2).
    pub pool: Option<usize>,
}

impl Graph {
    /// Records one operation by kind. Typed methods such as [`Graph::add`] are
    /// the usual entry points; this dispatcher exists for data-driven callers.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::shape(
                "record",
                format!("{kind} takes {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        let need_scalar = || {
            attrs
                .scalar
                .ok_or_else(|| Error::InvalidArgument(format!("{kind} requires a scalar attribute")))
        };
        match kind {
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Div => self.div(inputs[0], inputs[1]),
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Conv2d => {
                let geom = attrs
                    .conv
                    .ok_or_else(|| Error::InvalidArgument("conv2d requires geometry".into()))?;
                self.conv2d(inputs[0], inputs[1], inputs[2], &geom)
            }
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Log => Ok(self.log(inputs[0])),
            OpKind::Exp => Ok(self.exp(inputs[0])),
            OpKind::Power => Ok(self.powf(inputs[0], need_scalar()?)),
            OpKind::Sum => Ok(self.sum(inputs[0])),
            OpKind::Mean => Ok(self.mean(inputs[0])),
            OpKind::Softmax => self.softmax(inputs[0]),
            OpKind::Reshape => {
                let shape = attrs
                    .shape
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("reshape requires a shape".into()))?;
                self.reshape(inputs[0], shape)
            }
            OpKind::MaxPool => self.max_pool2d(inputs[0], attrs.pool.unwrap_or(2)),
            OpKind::ElementwiseMax => self.maximum(inputs[0], inputs[1]),
            OpKind::ScalarMul => Ok(self.scalar_mul(inputs[0], need_scalar()?)),
        }
    }
}
