//! Named parameter storage and the layers shared by the text encoder and the
//! hypernetwork.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{AttentionOpts, Graph, Mode, Real, Tensor, Var};

/// Ordered map from parameter name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Euclidean norm over parameters whose name starts with `prefix`.
    pub fn norm(&self, prefix: &str) -> f64 {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.l2_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Sub-store of every parameter whose name starts with `prefix`.
    pub fn filter(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Records every tensor as a graph leaf; `trainable` decides which ones
    /// carry gradients.
    pub fn bind<U: Real>(&self, g: &mut Graph<U>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.cast(), trainable(n))))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Standard deviation used for transformer-style linear and embedding weights.
pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut R,
) {
    store.insert(format!("{prefix}.w"), normal_tensor(rng, &[fan_in, fan_out], INIT_STD));
    if bias {
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[width], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[width]));
}

/// `x · W (+ b)` over the last axis of a 2-d or 3-d input.
pub(crate) fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let shape = g.shape(x).to_vec();
    let width = *shape.last().ok_or_else(|| Error::invalid("linear on scalar"))?;
    let rows = shape.iter().product::<usize>() / width.max(1);
    let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, width])? };
    let mut y = g.matmul(flat, w)?;
    if let Ok(b) = p.get(&format!("{prefix}.b")) {
        y = g.add(y, b)?;
    }
    if shape.len() != 2 {
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = g.shape(w)[1];
        y = g.reshape(y, &out_shape)?;
    }
    Ok(y)
}

pub(crate) fn layer_norm<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{prefix}.g"))?;
    let beta = p.get(&format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gamma, beta)?)
}

/// Pre-norm transformer encoder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub(crate) fn validate(&self, owner: &str) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(
                format!("{owner}.heads"),
                format!("width {} not divisible by {} heads", self.width, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("{owner}.dropout"), "must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub(crate) fn init_transformer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &TransformerConfig,
    rng: &mut R,
) {
    let w = cfg.width;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.layer{l}");
        init_layer_norm(store, &format!("{p}.ln1"), w);
        // a key bias shifts each query's scores by a constant, which softmax ignores
        for name in ["q", "k", "v", "o"] {
            init_linear(store, &format!("{p}.attn.{name}"), w, w, name != "k", rng);
        }
        init_layer_norm(store, &format!("{p}.ln2"), w);
        init_linear(store, &format!("{p}.ff1"), w, cfg.ff, true, rng);
        init_linear(store, &format!("{p}.ff2"), cfg.ff, w, true, rng);
    }
}

/// Runs `x: [B, T, W]` through the stack. Dropout sits on the attention
/// output, the feed-forward hidden activation and the feed-forward output.
#[allow(clippy::too_many_arguments)]
pub(crate) fn transformer<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    cfg: &TransformerConfig,
    mut x: Var,
    attn: &AttentionOpts,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    for l in 0..cfg.layers {
        let pre = format!("{prefix}.layer{l}");
        let h = layer_norm(g, p, &format!("{pre}.ln1"), x)?;
        let q = linear(g, p, &format!("{pre}.attn.q"), h)?;
        let k = linear(g, p, &format!("{pre}.attn.k"), h)?;
        let v = linear(g, p, &format!("{pre}.attn.v"), h)?;
        let a = g.attention(q, k, v, attn)?;
        let a = linear(g, p, &format!("{pre}.attn.o"), a)?;
        let a = g.dropout(a, cfg.dropout, mode, rng)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, p, &format!("{pre}.ln2"), x)?;
        let f = linear(g, p, &format!("{pre}.ff1"), h)?;
        let f = g.gelu(f)?;
        let f = g.dropout(f, cfg.dropout, mode, rng)?;
        let f = linear(g, p, &format!("{pre}.ff2"), f)?;
        let f = g.dropout(f, cfg.dropout, mode, rng)?;
        x = g.add(x, f)?;
    }
    Ok(x)
}
