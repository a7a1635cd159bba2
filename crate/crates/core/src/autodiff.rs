//! Tape-based reverse-mode differentiation over whole-tensor operations.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, so node ids are already topologically sorted and the backward pass
//! is a single reverse sweep. Parameters are borrowed from a [`ParamSet`]
//! rather than copied onto the tape.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::tensor::{
    self, conv2d, conv2d_backward_parts, linear, log_softmax, max_pool_spatial_with_index,
    subregion_mean_pool, BicubicPlan, Region, Scalar, Tensor, TensorError, Unary,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract error: {0}")]
    Contract(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    Linear {
        weight: Var,
        input: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    RegionPool(Var, Region),
    MaxPool(Var, Vec<usize>),
    ZeroChannel(Var, usize),
    Gather {
        table: Var,
        row: usize,
    },
    Bicubic(Var, Arc<BicubicPlan>),
    Reshape(Var),
    Sum(Var),
    /// `-log softmax(logits)[target]`; keeps the softmax for the backward pass.
    Nll {
        logits: Var,
        target: usize,
        probs: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<'a, T: Scalar> {
    op: Op<T>,
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, Var>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_lookup: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Which side of every non-smooth point the recorded forward pass fell
    /// on: one entry per ReLU input element (positive or not) and per
    /// max-pool winner index. Two passes with equal patterns lie on the same
    /// smooth piece.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary(Unary::Relu, x) => {
                    out.extend(self.nodes[x.0].value.data().iter().map(|v| (v.as_f64() > 0.0) as usize));
                }
                Op::MaxPool(_, idx) => out.extend_from_slice(idx),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, op: Op<T>, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, Cow::Owned(value), requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, Cow::Owned(value), false)
    }

    /// Unregistered leaf whose gradient is tracked and can be read back
    /// through [`Backward::grad`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, Cow::Owned(value), true)
    }

    /// Registers a named trainable tensor. Repeated registration of the same
    /// name returns the existing node.
    pub fn param(&mut self, name: &str, value: &'a Tensor<T>) -> Var {
        if let Some(&v) = self.param_lookup.get(name) {
            return v;
        }
        let v = self.push(Op::Leaf, Cow::Borrowed(value), true);
        self.params.push((name.to_string(), v));
        self.param_lookup.insert(name.to_string(), v);
        v
    }

    pub fn registered_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
        )?;
        Ok(self.push_op(
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
            out,
            &[input, kernel, bias],
        ))
    }

    pub fn linear(&mut self, weight: Var, input: Var, bias: Var) -> Result<Var> {
        let out = linear(self.value(weight), self.value(input), self.value(bias))?;
        Ok(self.push_op(
            Op::Linear {
                weight,
                input,
                bias,
            },
            out,
            &[weight, input, bias],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::binary(tensor::Binary::Add, self.value(a), self.value(b))?;
        Ok(self.push_op(Op::Add(a, b), out, &[a, b]))
    }

    /// Sums a non-empty list left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| AutodiffError::Contract("add_all needs at least one term".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::binary(tensor::Binary::Hadamard, self.value(a), self.value(b))?;
        Ok(self.push_op(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Var {
        let out = tensor::unary(op, self.value(a));
        self.push_op(Op::Unary(op, a), out, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.unary(Unary::OneMinus, a)
    }

    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        let (_, h, w) = self.value(a).dims3()?;
        self.region_pool(a, Region::full(h, w))
    }

    pub fn region_pool(&mut self, a: Var, region: Region) -> Result<Var> {
        let out = subregion_mean_pool(self.value(a), region)?;
        Ok(self.push_op(Op::RegionPool(a, region), out, &[a]))
    }

    pub fn max_pool(&mut self, a: Var) -> Result<Var> {
        let (out, idx) = max_pool_spatial_with_index(self.value(a))?;
        Ok(self.push_op(Op::MaxPool(a, idx), out, &[a]))
    }

    /// Copy of a `C×H×W` tensor with one channel clamped to zero.
    pub fn zero_channel(&mut self, a: Var, channel: usize) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        if channel >= c {
            return Err(TensorError::Index(format!(
                "channel {channel} out of range for {c} channels"
            ))
            .into());
        }
        let mut out = self.value(a).clone();
        out.data_mut()[channel * h * w..(channel + 1) * h * w].fill(T::zero());
        Ok(self.push_op(Op::ZeroChannel(a, channel), out, &[a]))
    }

    /// Slice `row` of the leading axis.
    pub fn gather(&mut self, table: Var, row: usize) -> Result<Var> {
        let out = self.value(table).row(row)?;
        Ok(self.push_op(Op::Gather { table, row }, out, &[table]))
    }

    pub fn bicubic(&mut self, a: Var, plan: Arc<BicubicPlan>) -> Result<Var> {
        let out = plan.apply(self.value(a))?;
        Ok(self.push_op(Op::Bicubic(a, plan), out, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push_op(Op::Reshape(a), out, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(Op::Sum(a), out, &[a])
    }

    /// Negative log-probability of `target` under `softmax(logits)`.
    pub fn nll(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lp = log_softmax(self.value(logits))?;
        if target >= lp.len() {
            return Err(TensorError::Index(format!(
                "target {target} out of range for {} classes",
                lp.len()
            ))
            .into());
        }
        let loss = Tensor::scalar(-lp.data()[target]);
        let probs = lp.map(|v| v.exp());
        Ok(self.push_op(
            Op::Nll {
                logits,
                target,
                probs,
            },
            loss,
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        Ok(self
            .backward_seeded(&[(loss, Tensor::ones(self.value(loss).shape()))])?
            .into_gradients())
    }

    /// Reverse sweep from arbitrary upstream gradients on any set of nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Backward<'_, 'a, T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (var, seed) in seeds {
            if seed.shape() != self.value(*var).shape() {
                return Err(AutodiffError::Contract(format!(
                    "seed shape {:?} does not match node shape {:?}",
                    seed.shape(),
                    self.value(*var).shape()
                )));
            }
            accumulate(&mut grads, *var, seed.clone())?;
        }
        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Backward { tape: self, grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node<'a, T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let (gi, gk, gb) = conv2d_backward_parts(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    self.wants(*input),
                    self.wants(*kernel),
                )?;
                if let Some(gi) = gi {
                    accumulate(grads, *input, gi)?;
                }
                if let Some(gk) = gk {
                    accumulate(grads, *kernel, gk)?;
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, gb)?;
                }
            }
            Op::Linear {
                weight,
                input,
                bias,
            } => {
                let w = self.value(*weight);
                let x = self.value(*input);
                let (m, n) = w.dims2()?;
                if self.wants(*weight) {
                    let mut gw = vec![T::zero(); m * n];
                    for (row, &gi) in gw.chunks_mut(n).zip(g.data()) {
                        for (dst, &xv) in row.iter_mut().zip(x.data()) {
                            *dst = gi * xv;
                        }
                    }
                    accumulate(grads, *weight, Tensor::new(&[m, n], gw)?)?;
                }
                if self.wants(*input) {
                    let mut gx = vec![T::zero(); n];
                    for (row, &gi) in w.data().chunks(n).zip(g.data()) {
                        for (dst, &wv) in gx.iter_mut().zip(row) {
                            *dst += gi * wv;
                        }
                    }
                    accumulate(grads, *input, Tensor::vector(gx)?)?;
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, g.clone())?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&gv, &xv), &yv)| gv * op.derivative(xv, yv));
                accumulate(grads, *a, Tensor::new(x.shape(), data.collect())?)?;
            }
            Op::RegionPool(a, region) => {
                let (c, h, w) = self.value(*a).dims3()?;
                let norm = T::from_f64(region.area() as f64);
                let mut out = Tensor::zeros(&[c, h, w]);
                let data = out.data_mut();
                for ch in 0..c {
                    let v = g.data()[ch] / norm;
                    for y in region.y1 - 1..region.y2 {
                        data[ch * h * w + y * w + region.x1 - 1..ch * h * w + y * w + region.x2]
                            .fill(v);
                    }
                }
                accumulate(grads, *a, out)?;
            }
            Op::MaxPool(a, idx) => {
                let (c, h, w) = self.value(*a).dims3()?;
                let mut out = Tensor::zeros(&[c, h, w]);
                for (ch, &pos) in idx.iter().enumerate() {
                    out.data_mut()[ch * h * w + pos] = g.data()[ch];
                }
                accumulate(grads, *a, out)?;
            }
            Op::ZeroChannel(a, channel) => {
                let (_, h, w) = g.dims3()?;
                let mut out = g.clone();
                out.data_mut()[channel * h * w..(channel + 1) * h * w].fill(T::zero());
                accumulate(grads, *a, out)?;
            }
            Op::Gather { table, row } => {
                let t = self.value(*table);
                let size = t.len() / t.shape()[0];
                let mut out = Tensor::zeros(t.shape());
                out.data_mut()[row * size..(row + 1) * size].copy_from_slice(g.data());
                accumulate(grads, *table, out)?;
            }
            Op::Bicubic(a, plan) => {
                accumulate(grads, *a, plan.adjoint(g)?)?;
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.reshape(self.value(*a).shape())?)?;
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv))?;
            }
            Op::Nll {
                logits,
                target,
                probs,
            } => {
                let gv = g.data()[0];
                let mut out = probs.scale(gv);
                out.data_mut()[*target] -= gv;
                accumulate(grads, *logits, out)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Result of a reverse sweep; gives access to the gradient of any node.
pub struct Backward<'t, 'a, T: Scalar> {
    tape: &'t Tape<'a, T>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<'t, 'a, T: Scalar> Backward<'t, 'a, T> {
    /// Gradient of a node; zeros if nothing flowed into it.
    pub fn grad(&self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.tape.value(var).shape()))
    }

    pub fn into_gradients(self) -> Gradients<T> {
        let mut out = Gradients::default();
        for (name, var) in self.tape.registered_params() {
            out.map.insert(name.to_string(), self.grad(var));
        }
        out
    }
}

/// Gradient per parameter name, each shaped like its parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    /// All-zero gradients for every tensor of `params`.
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            map: params
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` in; names missing here are inserted.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(existing) => existing.add_assign(g)?,
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn add_to(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        match self.map.get_mut(name) {
            Some(existing) => existing.add_assign(g)?,
            None => {
                self.map.insert(name.to_string(), g.clone());
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a named tensor.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Like [`ParamSet::get`] but reports the missing name.
    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| AutodiffError::Contract(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// Largest `|a − n| / max(|a|, |n|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    /// Same maximum restricted to each parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    pub coordinates_checked: usize,
    /// Coordinates left out because a perturbation crossed a ReLU kink or
    /// changed a max-pool winner, where finite differences say nothing.
    pub coordinates_skipped: usize,
}

/// Compares analytic gradients of `loss` against central finite differences
/// on a seeded sample of at least `min_samples` parameter coordinates (all
/// of them when there are fewer).
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    loss: F,
    epsilon: f64,
    min_samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &'a ParamSet<f64>) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(AutodiffError::Contract("epsilon must be positive".into()));
    }
    let analytic = {
        let mut tape = Tape::new();
        let out = loss(&mut tape, params)?;
        let mut g = Gradients::zeros_like(params);
        g.accumulate(&tape.backward(out)?)?;
        g
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, p)?;
        Ok(tape.value(out).item()?)
    };

    let coords: Vec<(usize, usize)> = params
        .entries
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, t))| (0..t.len()).map(move |i| (pi, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if coords.len() <= min_samples {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut rng, coords.len(), min_samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: BTreeMap::new(),
        coordinates_checked: 0,
        coordinates_skipped: 0,
    };
    let mut work = params.clone();
    for &ci in &chosen {
        let (pi, i) = coords[ci];
        let name = params.entries[pi].0.clone();
        let original = params.entries[pi].1.data()[i];
        work.entries[pi].1.data_mut()[i] = original + epsilon;
        let plus = eval(&work)?;
        work.entries[pi].1.data_mut()[i] = original - epsilon;
        let minus = eval(&work)?;
        work.entries[pi].1.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic.get(&name).map(|g| g.data()[i]).unwrap_or(0.0);
        let rel = relative_error(a, numeric);
        report.max_rel_error = report.max_rel_error.max(rel);
        let slot = report.per_param.entry(name).or_insert(0.0);
        *slot = slot.max(rel);
        report.coordinates_checked += 1;
    }
    Ok(report)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}
