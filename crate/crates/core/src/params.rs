//! Named parameter tensors and their binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the truncated-normal weight initialiser.
pub const INIT_STD: f64 = 0.02;

/// Ordered collection of named tensors. Order is insertion order and is
/// what checkpoints and optimiser state follow.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.position(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Contract(format!("unknown parameter `{name}`"))),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// True when both stores hold the same names with the same shapes in
    /// the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        Bound { store: self, vars }
    }
}

/// A [`ParamStore`] placed on a tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after `backward`, aligned with the store order; parameters
    /// the loss did not reach get zeros.
    pub fn grads(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Normal(0, std) resampled until it falls within two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break x;
        }
    })
}

/// Adds `{prefix}.weight: [fan_in, fan_out]` and `{prefix}.bias: [fan_out]`.
pub fn add_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.weight"), trunc_normal(&[fan_in, fan_out], INIT_STD, rng))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
}

pub fn add_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    store.insert(format!("{prefix}.weight"), Tensor::full(&[width], 1.0))?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]))
}

/// `x · W + b` for the `{prefix}` linear layer.
pub fn linear(tape: &mut Tape, p: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Affine layer norm over the last axis.
pub fn layer_norm(tape: &mut Tape, p: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = tape.layer_norm(x, LAYER_NORM_EPS)?;
    let y = tape.mul(y, g)?;
    tape.add(y, b)
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Parameters exempt from weight decay: biases, norms, the class token and
/// positional embeddings.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.contains("norm") || name == "cls_token" || name == "pos_embed"
}
