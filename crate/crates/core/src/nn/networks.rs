use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{head, linear, Architecture, InputShape, Stack};
use super::params::ParamSet;
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::losses::mask_softmax;

/// Shared trunk with a primary and an auxiliary SoftMax head (hard parameter sharing).
///
/// Parameters are ordered trunk first, then the primary head, then the
/// auxiliary head.
#[derive(Clone, Debug)]
pub struct MultiTaskNet {
    arch: Architecture,
    input: InputShape,
    num_primary: usize,
    total_aux: usize,
    params: ParamSet,
    trunk: Stack,
    trunk_params: usize,
    primary_head: (usize, usize),
    aux_head: (usize, usize),
}

/// Graph nodes produced by one multi-task forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MultiTaskOutput {
    pub features: Var,
    pub primary: Var,
    pub aux: Var,
}

impl MultiTaskNet {
    pub fn new(
        arch: &Architecture,
        input: InputShape,
        num_primary: usize,
        total_aux: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_primary < 2 || total_aux < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 primary and 2 auxiliary classes, got {num_primary} and {total_aux}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let trunk = Stack::trunk(arch, input, &mut params, "trunk", &mut rng)?;
        let trunk_params = params.len();
        let primary_head = head(&mut params, "primary", trunk.out_dim(), num_primary, &mut rng);
        let aux_head = head(&mut params, "aux", trunk.out_dim(), total_aux, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            input,
            num_primary,
            total_aux,
            params,
            trunk,
            trunk_params,
            primary_head,
            aux_head,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn num_primary(&self) -> usize {
        self.num_primary
    }

    pub fn total_aux(&self) -> usize {
        self.total_aux
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.out_dim()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Positions of the shared-trunk parameters in [`params`](Self::params).
    pub fn trunk_param_range(&self) -> Range<usize> {
        0..self.trunk_params
    }

    /// Positions of the primary-head parameters.
    pub fn primary_head_range(&self) -> Range<usize> {
        self.primary_head.0..self.primary_head.1 + 1
    }

    /// Positions of the auxiliary-head parameters.
    pub fn aux_head_range(&self) -> Range<usize> {
        self.aux_head.0..self.aux_head.1 + 1
    }

    /// Full forward pass with parameters `p` (aligned with [`params`](Self::params)).
    /// `x` must already be laid out by [`Architecture::input_tensor`].
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<MultiTaskOutput> {
        let features = self.trunk.forward(g, p, x)?;
        let primary = self.head_probs(g, p, features, self.primary_head)?;
        let aux = self.head_probs(g, p, features, self.aux_head)?;
        Ok(MultiTaskOutput { features, primary, aux })
    }

    /// Trunk features and primary-head probabilities only.
    pub fn forward_primary(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let features = self.trunk.forward(g, p, x)?;
        let primary = self.head_probs(g, p, features, self.primary_head)?;
        Ok((features, primary))
    }

    fn head_probs(&self, g: &mut Graph, p: &[Var], features: Var, (w, b): (usize, usize)) -> Result<Var> {
        let logits = linear(g, features, p[w], p[b])?;
        g.softmax(logits)
    }

    /// Evaluates the network on an `[N, C, H, W]` batch without tracking gradients.
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(self.arch.input_tensor(images)?);
        let out = self.forward(&mut g, &p, x)?;
        Ok((
            g.value(out.features).clone(),
            g.value(out.primary).clone(),
            g.value(out.aux).clone(),
        ))
    }
}

/// Builds a [`MultiTaskNet`] from an architecture name such as `mlp` or `convnet-4`.
pub fn build_multitask_net(
    arch: &str,
    input: InputShape,
    num_primary: usize,
    total_aux: usize,
    seed: u64,
) -> Result<MultiTaskNet> {
    MultiTaskNet::new(&arch.parse()?, input, num_primary, total_aux, seed)
}

/// Backbone plus a `K`-logit head finalised by Mask SoftMax over the block of
/// each sample's primary class.
#[derive(Clone, Debug)]
pub struct LabelGenNet {
    arch: Architecture,
    input: InputShape,
    hierarchy: Hierarchy,
    params: ParamSet,
    backbone: Stack,
    head: (usize, usize),
}

impl LabelGenNet {
    pub fn new(arch: &Architecture, input: InputShape, hierarchy: Hierarchy, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Stack::trunk(arch, input, &mut params, "backbone", &mut rng)?;
        let head = head(&mut params, "gen", backbone.out_dim(), hierarchy.total(), &mut rng);
        Ok(Self {
            arch: arch.clone(),
            input,
            hierarchy,
            params,
            backbone,
            head,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> InputShape {
        self.input
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Number of generated auxiliary classes.
    pub fn output_len(&self) -> usize {
        self.hierarchy.total()
    }

    /// Auxiliary label distributions `[N, K]` for inputs `x` with primary labels `labels`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.logits(g, p, x)?;
        let mask = self.hierarchy.mask_batch(labels)?;
        mask_softmax(g, logits, &mask)
    }

    /// Raw head outputs before masking.
    pub fn logits(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let features = self.backbone.forward(g, p, x)?;
        linear(g, features, p[self.head.0], p[self.head.1])
    }

    /// Soft auxiliary labels for an `[N, C, H, W]` batch, without tracking gradients.
    pub fn generate(&self, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(self.arch.input_tensor(images)?);
        let y = self.forward(&mut g, &p, x, labels)?;
        Ok(g.value(y).clone())
    }
}

/// Builds a [`LabelGenNet`] from an architecture name.
pub fn build_labelgen_net(arch: &str, input: InputShape, hierarchy: Hierarchy, seed: u64) -> Result<LabelGenNet> {
    LabelGenNet::new(&arch.parse()?, input, hierarchy, seed)
}
