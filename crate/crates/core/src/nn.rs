//! Parameter storage and the small layer library the networks are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, LN_EPS};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Precondition(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Precondition(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every tensor whose name starts with `prefix` into `self`
    /// under the name with the prefix removed.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.tensors {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape, 1.0));
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    /// Glorot-uniform weights.
    pub fn xavier<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_linear<R: Rng>(&mut self, prefix: &str, din: usize, dout: usize, rng: &mut R) {
        self.xavier(&format!("{prefix}.w"), &[din, dout], din, dout, rng);
        self.zeros(&format!("{prefix}.b"), &[dout]);
    }

    pub fn init_layer_norm(&mut self, prefix: &str, d: usize) {
        self.ones(&format!("{prefix}.g"), &[d]);
        self.zeros(&format!("{prefix}.b"), &[d]);
    }

    pub fn init_conv<R: Rng>(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, rng: &mut R) {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        self.normal(&format!("{prefix}.w"), &[cout, cin, k, k], std, rng);
        self.zeros(&format!("{prefix}.b"), &[cout]);
    }

    /// Q/K/V/O projections of width `d`.
    pub fn init_attention<R: Rng>(&mut self, prefix: &str, d: usize, rng: &mut R) {
        for p in ["q", "k", "v", "o"] {
            self.init_linear(&format!("{prefix}.{p}"), d, d, rng);
        }
    }

    pub fn init_gru<R: Rng>(&mut self, prefix: &str, din: usize, hidden: usize, rng: &mut R) {
        for gate in ["z", "r", "n"] {
            self.init_linear(&format!("{prefix}.x{gate}"), din, hidden, rng);
            self.init_linear(&format!("{prefix}.h{gate}"), hidden, hidden, rng);
        }
    }
}

/// Binds parameters of a [`ParamStore`] onto a tape on first use.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter, after `tape.backward`.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| v.grad().map(|g| (k.clone(), g)))
            .collect()
    }

    pub fn linear(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.get(&format!("{prefix}.w"))?)?
            .add_row(self.get(&format!("{prefix}.b"))?)
    }

    pub fn layer_norm(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(
            self.get(&format!("{prefix}.g"))?,
            self.get(&format!("{prefix}.b"))?,
            LN_EPS,
        )
    }

    pub fn conv(&self, prefix: &str, x: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        x.conv2d(
            self.get(&format!("{prefix}.w"))?,
            self.get(&format!("{prefix}.b"))?,
            stride,
            pad,
        )
    }

    /// Multi-head attention with learned projections. `heads` must divide the width.
    pub fn attention(&self, prefix: &str, query: Var<'t>, memory: Var<'t>, heads: usize) -> Result<Var<'t>> {
        let q = self.linear(&format!("{prefix}.q"), query)?;
        let k = self.linear(&format!("{prefix}.k"), memory)?;
        let v = self.linear(&format!("{prefix}.v"), memory)?;
        let ctx = split_head_attention(q, k, v, heads)?;
        self.linear(&format!("{prefix}.o"), ctx)
    }

    /// One GRU step on row vectors `x [1×in]`, `h [1×hidden]`.
    pub fn gru_cell(&self, prefix: &str, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let gate = |g: &str| -> Result<Var<'t>> {
            self.linear(&format!("{prefix}.x{g}"), x)?
                .add(self.linear(&format!("{prefix}.h{g}"), h)?)
        };
        let z = gate("z")?.sigmoid();
        let r = gate("r")?.sigmoid();
        let n = self
            .linear(&format!("{prefix}.xn"), x)?
            .add(r.mul(self.linear(&format!("{prefix}.hn"), h)?)?)?
            .tanh();
        z.one_minus().mul(n)?.add(z.mul(h)?)
    }
}

/// Attention without projections, split into `heads` column groups. With one
/// head the scale is the full width.
pub fn split_head_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let d = q.shape()[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Precondition(format!("{heads} heads do not divide width {d}")));
    }
    if heads == 1 {
        return q.attention(k, v, d);
    }
    let hd = d / heads;
    let dv = v.shape()[1] / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * hd, hd)?;
        let kh = k.slice_cols(h * hd, hd)?;
        let vh = v.slice_cols(h * dv, dv)?;
        outs.push(qh.attention(kh, vh, hd)?);
    }
    q.tape().concat_cols(&outs)
}
