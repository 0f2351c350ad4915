use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered parameter declarations of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
}

impl ParamLayout {
    /// Declares a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    /// Draws initial values in declaration order.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let tensors = self
            .specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("valid std");
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Tensor::new(s.shape.clone(), data).expect("spec shape matches data")
            })
            .collect();
        ParamStore {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        }
    }

    /// Every parameter set to zero.
    pub fn zeros(&self) -> ParamStore {
        ParamStore {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            tensors: self.specs.iter().map(|s| Tensor::zeros(&s.shape)).collect(),
        }
    }

    /// Checks that `store` has exactly this layout's names and shapes.
    pub fn check(&self, store: &ParamStore) -> Result<()> {
        if store.tensors.len() != self.specs.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, found {}",
                self.specs.len(),
                store.tensors.len()
            )));
        }
        for ((spec, name), t) in self.specs.iter().zip(&store.names).zip(&store.tensors) {
            if &spec.name != name || spec.shape != t.shape {
                return Err(Error::shape(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape, spec.name, spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Named parameter tensors; gradients live in each tensor's `grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Inserts every parameter into `g` as a leaf; `trainable` controls
    /// whether gradients are computed for them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let mut leaf = t.clone();
                leaf.grad = None;
                g.leaf(leaf.with_requires_grad(trainable))
            })
            .collect()
    }

    /// Copies gradients of the bound leaves out of `g` (zeros where no
    /// gradient reached a parameter).
    pub fn take_grads(&mut self, g: &Graph, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            t.grad = Some(g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec));
        }
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }
}
