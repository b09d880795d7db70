use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameters in a stable order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    decay: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its position. `decay` marks tensors that
    /// take weight decay (weights, not biases).
    pub fn push(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn decays(&self, i: usize) -> bool {
        self.decay[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::shape(
                "assign-flat",
                format!("{} values for {} parameters", flat.len(), self.numel()),
            ));
        }
        let mut at = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamSet`]; `None` marks a missing entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    entries: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn new(entries: Vec<Option<Tensor>>) -> Self {
        Self { entries }
    }

    /// Reads the values of gradient nodes returned by [`Graph::backward`].
    pub fn from_graph(g: &Graph, grads: &[Var]) -> Self {
        Self {
            entries: grads.iter().map(|&v| Some(g.value(v).clone())).collect(),
        }
    }

    pub fn get(&self, i: usize) -> Option<&Tensor> {
        self.entries.get(i).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}
