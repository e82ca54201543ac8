//! Minimal differentiable tensor engine used by the transcriber and
//! reconstructor.

mod attention;
mod gemm;
mod graph;
mod ops;

pub use attention::local_relative_attention;
pub use graph::{Gradients, Graph, Tensor, Var};
pub use ops::{bce_mean, concat, mse_mean, Conv2dSpec};

/// A named, ordered collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Registers every parameter on `graph`: as leaves when `trainable`,
    /// otherwise as constants (a frozen copy for the current pass).
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Vec<Var<'g>> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    graph.leaf(v.clone())
                } else {
                    graph.constant(v.clone())
                }
            })
            .collect()
    }

    /// Flat (parameter, element) addressing, used by checkpoints and
    /// gradient checks.
    pub fn get_flat(&self, index: usize) -> Option<f64> {
        let (p, e) = self.locate(index)?;
        self.values[p].iter().nth(e).copied()
    }

    pub fn set_flat(&mut self, index: usize, value: f64) -> bool {
        match self.locate(index) {
            Some((p, e)) => {
                if let Some(slot) = self.values[p].iter_mut().nth(e) {
                    *slot = value;
                    true
                } else {
                    false
                }
            }
            None => false,
        }
    }

    fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (p, v) in self.values.iter().enumerate() {
            if index < v.len() {
                return Some((p, index));
            }
            index -= v.len();
        }
        None
    }

    /// Gradients for variables produced by [`ParamSet::bind`], laid out like
    /// `self` (zeros where nothing flowed).
    pub fn collect_grads(&self, grads: &mut Gradients, vars: &[Var<'_>]) -> ParamSet {
        assert_eq!(vars.len(), self.values.len(), "collect_grads: variable count");
        Self {
            names: self.names.clone(),
            values: vars.iter().map(|&v| grads.take_or_zeros(v)).collect(),
        }
    }

    /// A set with the same names and shapes filled with zeros.
    pub fn zeros_like(&self) -> ParamSet {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Tensor::zeros(v.raw_dim())).collect(),
        }
    }

    /// Sum of squared elements.
    pub fn sq_norm(&self) -> f64 {
        self.values.iter().flat_map(|v| v.iter()).map(|x| x * x).sum()
    }
}
