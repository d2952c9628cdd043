//! Named parameter storage, layer helpers and the Adam/AdamW optimizers.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameters keyed by dotted name, iterated in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    /// Panics with the missing name; stores are validated on construction/load.
    pub fn expect(&self, name: &str) -> &Tensor<S> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Moves every tensor of `other` in under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore<S>) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> ParamStore<S> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// CRC32 over names and little-endian bytes of all tensors under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for (k, v) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            buf.clear();
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize()
    }
}

/// Binds store entries to graph leaves for one forward pass.
pub struct Binder<'a, S: Scalar> {
    store: &'a ParamStore<S>,
    trainable: &'a dyn Fn(&str) -> bool,
    bound: HashMap<String, Var>,
}

pub fn all_trainable(_: &str) -> bool {
    true
}

pub fn none_trainable(_: &str) -> bool {
    false
}

impl<'a, S: Scalar> Binder<'a, S> {
    pub fn new(store: &'a ParamStore<S>, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Binder {
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    /// Every parameter bound as a constant.
    pub fn frozen(store: &'a ParamStore<S>) -> Self {
        Binder::new(store, &none_trainable)
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph<S>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self.store.expect(name).clone();
        let v = if (self.trainable)(name) {
            g.param(t)
        } else {
            g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Gradients for every bound trainable parameter that received one.
    pub fn collect(&self, grads: &Gradients<S>) -> BTreeMap<String, Tensor<S>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|t| (k.clone(), t.clone())))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}

pub fn init_uniform<S: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| S::lit(rng.gen_range(-bound..=bound))).collect(),
    )
}

/// Uniform init with variance `1 / fan_in`.
pub fn init_fan_in<S: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    init_uniform(rng, shape, (3.0 / fan_in as f64).sqrt())
}

pub fn add_linear<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) {
    store.insert(format!("{name}.w"), init_fan_in(rng, &[d_in, d_out], d_in));
    store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
}

pub fn add_conv<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut impl Rng,
    name: &str,
    kernel: usize,
    cin: usize,
    cout: usize,
) {
    store.insert(
        format!("{name}.w"),
        init_fan_in(rng, &[kernel, kernel, cin, cout], kernel * kernel * cin),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub fn add_layer_norm<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[d], S::one()));
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

pub fn linear<S: Scalar>(g: &mut Graph<S>, p: &mut Binder<S>, name: &str, x: Var) -> Var {
    let w = p.var(g, &format!("{name}.w"));
    let b = p.var(g, &format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add_tiled(y, b)
}

pub fn conv<S: Scalar>(g: &mut Graph<S>, p: &mut Binder<S>, name: &str, x: Var, stride: usize) -> Var {
    let w = p.var(g, &format!("{name}.w"));
    let b = p.var(g, &format!("{name}.b"));
    let k = g.shape(w)[0];
    g.conv2d(x, w, Some(b), stride, k / 2)
}

pub fn layer_norm<S: Scalar>(g: &mut Graph<S>, p: &mut Binder<S>, name: &str, x: Var) -> Var {
    let gamma = p.var(g, &format!("{name}.g"));
    let beta = p.var(g, &format!("{name}.b"));
    g.layer_norm(x, gamma, beta, 1e-5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient for Adam, decoupled decay for AdamW.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            weight_decay: 0.01,
            ..OptimizerConfig::adam(lr)
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(lr),
            OptimizerKind::AdamW => Self::adamw(lr),
        }
    }
}

/// Adam/AdamW with bias-corrected moments, state keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<S> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<S>>,
    pub second: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let pd = param.data_mut();
            for i in 0..pd.len() {
                let p = pd[i].as_f64();
                let mut gi = grad.data()[i].as_f64();
                if c.kind == OptimizerKind::Adam {
                    gi += c.weight_decay * p;
                }
                let mi = c.beta1 * m.data()[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = S::lit(mi);
                v.data_mut()[i] = S::lit(vi);
                let mut delta = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                if c.kind == OptimizerKind::AdamW {
                    delta += c.weight_decay * p;
                }
                pd[i] = S::lit(p - c.lr * delta);
            }
        }
    }
}
