//! Named parameter declarations, storage, and binding into a graph.

use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
}

/// A parameter the model will allocate: name, shape, and initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Draws the initial value from the stream `init/<name>` under `seed`.
    pub fn initialize<T: Element>(&self, seed: u64) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = rng::stream(seed, &format!("init/{}", self.name));
                Tensor::from_fn(&self.shape, |_| T::from_f64(rng.random_range(-bound..bound)))
            }
        }
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_decls(decls: &[ParamDecl], seed: u64) -> Self {
        let mut store = Self::new();
        for d in decls {
            store
                .insert(d.name.clone(), d.initialize(seed))
                .expect("declarations carry unique names");
        }
        store
    }

    pub fn insert(&mut self, name: String, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Zero-valued store with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (n, t) in &self.entries {
            out.insert(n.clone(), Tensor::zeros(t.shape())).expect("unique");
        }
        out
    }

    /// Checks that `self` matches `decls` name-for-name and shape-for-shape.
    pub fn check_layout(&self, decls: &[ParamDecl]) -> Result<()> {
        if self.entries.len() != decls.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, found {}",
                decls.len(),
                self.entries.len()
            )));
        }
        for d in decls {
            let t = self
                .get(&d.name)
                .ok_or_else(|| Error::shape(format!("missing parameter {}", d.name)))?;
            if t.shape() != d.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                )));
            }
        }
        Ok(())
    }

    /// Places every tensor into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), g.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Parameter name → graph leaf, produced by [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter {name} is not bound")))
    }

    /// Copies the gradient of every bound parameter out of `g`.
    pub fn grads<T: Element>(&self, g: &Graph<T>, like: &ParamStore<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, t) in like.iter() {
            let grad = self
                .vars
                .get(name)
                .and_then(|&v| g.grad(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.to_string(), grad).expect("unique");
        }
        out
    }
}
