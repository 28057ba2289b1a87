use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter declarations while a network is being assembled.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    scope: Vec<String>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    /// Runs `f` inside a named scope.
    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.push_scope(name);
        let out = f(self);
        self.pop_scope();
        out
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let mut full = self.scope.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.specs.push(ParamSpec {
            name: full,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Parameter values keyed by [`ParamId`]. A placeholder store carries
/// shapes only and backs shape-inference passes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    specs: Vec<ParamSpec>,
    values: Vec<Vec<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let values = specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => vec![F::zero(); s.numel()],
                Init::Ones => vec![F::one(); s.numel()],
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    (0..s.numel())
                        .map(|_| F::from_f64_lossy(normal.sample(rng)))
                        .collect()
                }
            })
            .collect();
        ParamStore {
            specs: specs.to_vec(),
            values,
        }
    }

    pub fn placeholder(specs: &[ParamSpec]) -> Self {
        ParamStore {
            specs: specs.to_vec(),
            values: vec![Vec::new(); specs.len()],
        }
    }

    pub fn from_values(specs: &[ParamSpec], values: Vec<Vec<F>>) -> Result<Self> {
        if specs.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                values.len()
            )));
        }
        for (s, v) in specs.iter().zip(&values) {
            if s.numel() != v.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} expects {} values, found {}",
                    s.name,
                    s.numel(),
                    v.len()
                )));
            }
        }
        Ok(ParamStore {
            specs: specs.to_vec(),
            values,
        })
    }

    pub fn is_placeholder(&self) -> bool {
        self.specs.iter().zip(&self.values).any(|(s, v)| v.len() != s.numel())
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Vec<F>] {
        &self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            specs: self.specs.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| G::from_f64_lossy(x.to_f64().unwrap())).collect())
                .collect(),
        }
    }
}

/// Per-parameter gradients produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub(crate) fn new(n: usize) -> Self {
        Gradients { grads: vec![None; n] }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[F]) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }

    /// Gradient of `id`, or `None` when the loss does not depend on it.
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.grads[id.0].as_deref()
    }
}
