//! Minimal dense tensor arithmetic with a reverse-mode gradient tape and a
//! finite-difference gradient checker.
//!
//! Everything is 64-bit floating point. The tape records primitive operations
//! (affine maps, pointwise nonlinearities, softmax, concatenation, embedding
//! lookups, and a handful of small reductions); compositions such as LSTM
//! steps and attention are built from these primitives so every derivative is
//! individually testable. A tape is single-threaded; distinct tapes over
//! read-only parameters may run in parallel and never share gradient
//! accumulators.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: left dims {left:?}, right dims {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} requires a vector operand, got dims {dims:?}")]
    NotAVector { op: &'static str, dims: Vec<usize> },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: non-finite input value {value}")]
    NonFinite { op: &'static str, value: f64 },
    #[error("{op}: input must be strictly positive, got {value}")]
    NonPositive { op: &'static str, value: f64 },
    #[error("tensor dims {dims:?} imply {expected} values but {actual} were provided")]
    BadTensor {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor dims {dims:?} contain a zero-sized dimension")]
    ZeroDim { dims: Vec<usize> },
    #[error("{op} needs at least one operand")]
    EmptyOperands { op: &'static str },
    #[error("parameter {name} re-registered with dims {new:?}, previously {old:?}")]
    ParamRedefined {
        name: String,
        old: Vec<usize>,
        new: Vec<usize>,
    },
    #[error("gradient check: eps must be positive, got {0}")]
    InvalidEps(f64),
    #[error("gradient check: loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("backward root must be a scalar, got dims {dims:?}")]
    NonScalarRoot { dims: Vec<usize> },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

/// A dense row-major tensor of `f64` values with an optional same-shape
/// gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Creates a tensor, validating that `product(dims) == values.len()` and
    /// that every dimension is positive.
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self, NumericsError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(NumericsError::ZeroDim { dims });
        }
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(NumericsError::BadTensor {
                dims,
                expected,
                actual: values.len(),
            });
        }
        Ok(Tensor {
            dims,
            values,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            dims: vec![values.len()],
            values,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Adds `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<(), NumericsError> {
        if g.len() != self.values.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "accumulate_grad",
                left: self.dims.clone(),
                right: vec![g.len()],
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (acc, &x) in grad.iter_mut().zip(g) {
            *acc += x;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine {
        w: ValueId,
        x: ValueId,
        b: Option<ValueId>,
    },
    Tanh {
        a: ValueId,
    },
    Sigmoid {
        a: ValueId,
    },
    Ln {
        a: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    AddMany {
        parts: Vec<ValueId>,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        a: ValueId,
        k: f64,
    },
    MulScalar {
        v: ValueId,
        s: ValueId,
    },
    Dot {
        a: ValueId,
        b: ValueId,
    },
    Softmax {
        a: ValueId,
    },
    Concat {
        parts: Vec<ValueId>,
    },
    Lookup {
        table: ValueId,
        index: usize,
    },
    Slice {
        a: ValueId,
        start: usize,
        len: usize,
    },
    Pick {
        a: ValueId,
        index: usize,
    },
    Sum {
        a: ValueId,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    dims: Vec<usize>,
    values: Vec<f64>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to the given value, if that
    /// value influenced the root.
    pub fn get(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// An append-only record of primitive operations supporting exact replay of
/// backpropagation in reverse recording order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, ValueId>,
    param_order: Vec<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn dims(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    fn push(&mut self, op: Op, dims: Vec<usize>, values: Vec<f64>) -> ValueId {
        self.nodes.push(Node { op, dims, values });
        ValueId(self.nodes.len() - 1)
    }

    /// Records a constant/input leaf. Zero-length vectors are permitted so
    /// that empty sequences can flow through `concat`.
    pub fn leaf(&mut self, dims: &[usize], values: Vec<f64>) -> Result<ValueId, NumericsError> {
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(NumericsError::BadTensor {
                dims: dims.to_vec(),
                expected,
                actual: values.len(),
            });
        }
        Ok(self.push(Op::Leaf, dims.to_vec(), values))
    }

    /// Registers a named parameter as a leaf, deduplicating by name so that a
    /// parameter used at many time steps accumulates one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<ValueId, NumericsError> {
        if let Some(&id) = self.params.get(name) {
            if self.nodes[id.0].dims != t.dims {
                return Err(NumericsError::ParamRedefined {
                    name: name.to_string(),
                    old: self.nodes[id.0].dims.clone(),
                    new: t.dims.clone(),
                });
            }
            return Ok(id);
        }
        let id = self.push(Op::Leaf, t.dims.clone(), t.values.clone());
        self.params.insert(name.to_string(), id);
        self.param_order.push(name.to_string());
        Ok(id)
    }

    /// `W x + b` for a matrix `W: [m, n]`, vector `x: [n]`, optional `b: [m]`.
    pub fn affine(
        &mut self,
        w: ValueId,
        x: ValueId,
        b: Option<ValueId>,
    ) -> Result<ValueId, NumericsError> {
        let wd = self.dims(w).to_vec();
        let xd = self.dims(x).to_vec();
        if wd.len() != 2 || xd.len() != 1 || wd[1] != xd[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "affine",
                left: wd,
                right: xd,
            });
        }
        let (m, n) = (wd[0], wd[1]);
        if let Some(b) = b {
            let bd = self.dims(b);
            if bd != [m] {
                return Err(NumericsError::ShapeMismatch {
                    op: "affine",
                    left: wd,
                    right: bd.to_vec(),
                });
            }
        }
        let mut out = vec![0.0; m];
        {
            let wv = self.value(w);
            let xv = self.value(x);
            for i in 0..m {
                let row = &wv[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for j in 0..n {
                    acc += row[j] * xv[j];
                }
                out[i] = acc;
            }
            if let Some(b) = b {
                let bv = self.value(b);
                for i in 0..m {
                    out[i] += bv[i];
                }
            }
        }
        Ok(self.push(Op::Affine { w, x, b }, vec![m], out))
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let out: Vec<f64> = self.value(a).iter().map(|&v| v.tanh()).collect();
        let dims = self.dims(a).to_vec();
        self.push(Op::Tanh { a }, dims, out)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let dims = self.dims(a).to_vec();
        self.push(Op::Sigmoid { a }, dims, out)
    }

    /// Natural logarithm; rejects non-positive inputs so the backward pass is
    /// always finite.
    pub fn ln(&mut self, a: ValueId) -> Result<ValueId, NumericsError> {
        if let Some(&bad) = self.value(a).iter().find(|v| !(**v > 0.0)) {
            return Err(NumericsError::NonPositive { op: "ln", value: bad });
        }
        let out: Vec<f64> = self.value(a).iter().map(|&v| v.ln()).collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push(Op::Ln { a }, dims, out))
    }

    fn check_same_shape(
        &self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
    ) -> Result<(), NumericsError> {
        if self.dims(a) != self.dims(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.dims(a).to_vec(),
                right: self.dims(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.check_same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push(Op::Add { a, b }, dims, out))
    }

    /// Elementwise sum of any number of equal-shape operands.
    pub fn add_many(&mut self, parts: &[ValueId]) -> Result<ValueId, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::EmptyOperands { op: "add_many" });
        };
        for &p in &parts[1..] {
            self.check_same_shape("add_many", first, p)?;
        }
        let mut out = self.value(first).to_vec();
        for &p in &parts[1..] {
            for (acc, &v) in out.iter_mut().zip(self.value(p)) {
                *acc += v;
            }
        }
        let dims = self.dims(first).to_vec();
        Ok(self.push(
            Op::AddMany {
                parts: parts.to_vec(),
            },
            dims,
            out,
        ))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.check_same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push(Op::Mul { a, b }, dims, out))
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&mut self, a: ValueId, k: f64) -> ValueId {
        let out: Vec<f64> = self.value(a).iter().map(|&v| v * k).collect();
        let dims = self.dims(a).to_vec();
        self.push(Op::Scale { a, k }, dims, out)
    }

    /// Multiplication of a vector by a recorded scalar value (dims `[1]`).
    pub fn mul_scalar(&mut self, v: ValueId, s: ValueId) -> Result<ValueId, NumericsError> {
        if self.dims(s) != [1] {
            return Err(NumericsError::NotAVector {
                op: "mul_scalar (scalar operand)",
                dims: self.dims(s).to_vec(),
            });
        }
        let sv = self.value(s)[0];
        let out: Vec<f64> = self.value(v).iter().map(|&x| x * sv).collect();
        let dims = self.dims(v).to_vec();
        Ok(self.push(Op::MulScalar { v, s }, dims, out))
    }

    /// Inner product of two equal-length vectors; the result has dims `[1]`.
    pub fn dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.check_same_shape("dot", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .sum();
        Ok(self.push(Op::Dot { a, b }, vec![1], vec![out]))
    }

    /// Numerically-stable softmax (max subtraction). Rejects NaN/infinite
    /// logits; large-negative masking (e.g. -1e9) is fine and drives the
    /// masked entry to ~0.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId, NumericsError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(NumericsError::EmptyOperands { op: "softmax" });
        }
        if let Some(&bad) = av.iter().find(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                op: "softmax",
                value: bad,
            });
        }
        let max = av.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = av.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|&e| e / z).collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push(Op::Softmax { a }, dims, out))
    }

    /// Concatenation of vectors (zero-length vectors allowed).
    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::EmptyOperands { op: "concat" });
        }
        for &p in parts {
            if self.dims(p).len() != 1 {
                return Err(NumericsError::NotAVector {
                    op: "concat",
                    dims: self.dims(p).to_vec(),
                });
            }
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let dims = vec![out.len()];
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            dims,
            out,
        ))
    }

    /// Row lookup in a `[rows, d]` table; backward touches only that row.
    pub fn lookup(&mut self, table: ValueId, index: usize) -> Result<ValueId, NumericsError> {
        let td = self.dims(table).to_vec();
        if td.len() != 2 {
            return Err(NumericsError::NotAVector {
                op: "lookup (table must be rank 2)",
                dims: td,
            });
        }
        let (rows, d) = (td[0], td[1]);
        if index >= rows {
            return Err(NumericsError::IndexOutOfRange {
                op: "lookup",
                index,
                size: rows,
            });
        }
        let out = self.value(table)[index * d..(index + 1) * d].to_vec();
        Ok(self.push(Op::Lookup { table, index }, vec![d], out))
    }

    pub fn slice(
        &mut self,
        a: ValueId,
        start: usize,
        len: usize,
    ) -> Result<ValueId, NumericsError> {
        let n = self.value(a).len();
        if start + len > n {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                size: n,
            });
        }
        let out = self.value(a)[start..start + len].to_vec();
        Ok(self.push(Op::Slice { a, start, len }, vec![len], out))
    }

    /// Extracts one coordinate as a dims-`[1]` scalar.
    pub fn pick(&mut self, a: ValueId, index: usize) -> Result<ValueId, NumericsError> {
        let n = self.value(a).len();
        if index >= n {
            return Err(NumericsError::IndexOutOfRange {
                op: "pick",
                index,
                size: n,
            });
        }
        let out = vec![self.value(a)[index]];
        Ok(self.push(Op::Pick { a, index }, vec![1], out))
    }

    /// Sum of all entries as a dims-`[1]` scalar.
    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let out = vec![self.value(a).iter().sum()];
        self.push(Op::Sum { a }, vec![1], out)
    }

    /// Reverse-mode sweep from a scalar root. Visits operations in exact
    /// reverse recording order; deterministic given the same tape.
    pub fn backward(&self, root: ValueId) -> Result<Gradients, NumericsError> {
        if self.dims(root) != [1] {
            return Err(NumericsError::NonScalarRoot {
                dims: self.dims(root).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            let node = &self.nodes[i];
            // All inputs of node i strictly precede it on the tape, so they
            // live in `before`.
            let mut acc = |id: ValueId, f: &mut dyn FnMut(&mut [f64])| {
                let len = self.nodes[id.0].values.len();
                let slot = before[id.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Affine { w, x, b } => {
                    let n = self.nodes[x.0].values.len();
                    let m = g.len();
                    let wv = &self.nodes[w.0].values;
                    let xv = &self.nodes[x.0].values;
                    acc(*w, &mut |gw| {
                        for i2 in 0..m {
                            for j in 0..n {
                                gw[i2 * n + j] += g[i2] * xv[j];
                            }
                        }
                    });
                    acc(*x, &mut |gx| {
                        for i2 in 0..m {
                            let row = &wv[i2 * n..(i2 + 1) * n];
                            for j in 0..n {
                                gx[j] += row[j] * g[i2];
                            }
                        }
                    });
                    if let Some(b) = b {
                        acc(*b, &mut |gb| {
                            for i2 in 0..m {
                                gb[i2] += g[i2];
                            }
                        });
                    }
                }
                Op::Tanh { a } => {
                    let y = &node.values;
                    acc(*a, &mut |ga| {
                        for (k, gk) in g.iter().enumerate() {
                            ga[k] += (1.0 - y[k] * y[k]) * gk;
                        }
                    });
                }
                Op::Sigmoid { a } => {
                    let y = &node.values;
                    acc(*a, &mut |ga| {
                        for (k, gk) in g.iter().enumerate() {
                            ga[k] += y[k] * (1.0 - y[k]) * gk;
                        }
                    });
                }
                Op::Ln { a } => {
                    let av = &self.nodes[a.0].values;
                    acc(*a, &mut |ga| {
                        for (k, gk) in g.iter().enumerate() {
                            ga[k] += gk / av[k];
                        }
                    });
                }
                Op::Add { a, b } => {
                    acc(*a, &mut |ga| {
                        for (k, gk) in g.iter().enumerate() {
                            ga[k] += gk;
                        }
                    });
                    acc(*b, &mut |gb| {
                        for (k, gk) in g.iter().enumerate() {
                            gb[k] += gk;
                        }
                    });
                }
                Op::AddMany { parts } => {
                    for &p in parts {
                        acc(p, &mut |gp| {
                            for (k, gk) in g.iter().enumerate() {
                                gp[k] += gk;
                            }
                        });
                    }
                }
                Op::Mul { a, b } => {
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    acc(*a, &mut |ga| {
                        for (k, gk) in g.iter().enumerate() {
                            ga[k] += bv[k] * gk;
                        }
                    });
                    acc(*b, &mut |gb| {
                        for (k, gk) in g.iter().enumerate() {
                            gb[k] += av[k] * gk;
                        }
                    });
                }
                Op::Scale { a, k } => {
                    acc(*a, &mut |ga| {
                        for (idx, gk) in g.iter().enumerate() {
                            ga[idx] += k * gk;
                        }
                    });
                }
                Op::MulScalar { v, s } => {
                    let vv = &self.nodes[v.0].values;
                    let sv = self.nodes[s.0].values[0];
                    acc(*v, &mut |gv| {
                        for (k, gk) in g.iter().enumerate() {
                            gv[k] += sv * gk;
                        }
                    });
                    acc(*s, &mut |gs| {
                        let mut d = 0.0;
                        for (k, gk) in g.iter().enumerate() {
                            d += vv[k] * gk;
                        }
                        gs[0] += d;
                    });
                }
                Op::Dot { a, b } => {
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    let g0 = g[0];
                    acc(*a, &mut |ga| {
                        for (k, &bk) in bv.iter().enumerate() {
                            ga[k] += g0 * bk;
                        }
                    });
                    acc(*b, &mut |gb| {
                        for (k, &ak) in av.iter().enumerate() {
                            gb[k] += g0 * ak;
                        }
                    });
                }
                Op::Softmax { a } => {
                    let y = &node.values;
                    let dot: f64 = g.iter().zip(y).map(|(&gk, &yk)| gk * yk).sum();
                    acc(*a, &mut |ga| {
                        for (k, gk) in g.iter().enumerate() {
                            ga[k] += y[k] * (gk - dot);
                        }
                    });
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].values.len();
                        acc(p, &mut |gp| {
                            for k in 0..len {
                                gp[k] += g[off + k];
                            }
                        });
                        off += len;
                    }
                }
                Op::Lookup { table, index } => {
                    let d = node.values.len();
                    let index = *index;
                    acc(*table, &mut |gt| {
                        for k in 0..d {
                            gt[index * d + k] += g[k];
                        }
                    });
                }
                Op::Slice { a, start, len } => {
                    let (start, len) = (*start, *len);
                    acc(*a, &mut |ga| {
                        for k in 0..len {
                            ga[start + k] += g[k];
                        }
                    });
                }
                Op::Pick { a, index } => {
                    let index = *index;
                    let g0 = g[0];
                    acc(*a, &mut |ga| {
                        ga[index] += g0;
                    });
                }
                Op::Sum { a } => {
                    let g0 = g[0];
                    acc(*a, &mut |ga| {
                        for slot in ga.iter_mut() {
                            *slot += g0;
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Collects gradients for every registered parameter (zero vectors for
    /// parameters the root did not depend on), keyed by parameter name.
    pub fn param_grads(&self, grads: &Gradients) -> GradMap {
        let mut out = GradMap::new();
        for name in &self.param_order {
            let id = self.params[name];
            let g = grads
                .get(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; self.nodes[id.0].values.len()]);
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Gradients keyed by parameter name. `BTreeMap` keeps iteration order (and
/// hence floating-point reduction order) deterministic.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// A named collection of parameter tensors that can be enumerated and
/// perturbed, as needed by [`gradient_check`] and the optimizer.
pub trait ParamCollection {
    /// Parameter names in a fixed canonical order.
    fn param_names(&self) -> Vec<String>;
    fn param(&self, name: &str) -> Option<&Tensor>;
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

impl ParamCollection for BTreeMap<String, Tensor> {
    fn param_names(&self) -> Vec<String> {
        self.keys().cloned().collect()
    }

    fn param(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.get_mut(name)
    }
}

/// Compares analytic gradients against central finite differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` on a random subsample of coordinates
/// (up to `coords_per_tensor` per parameter) and returns the maximum relative
/// error `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `loss_fn` must be deterministic and return both the loss and its analytic
/// gradients; parameters are restored to their original values on return.
pub fn gradient_check<P, F>(
    params: &mut P,
    loss_fn: F,
    eps: f64,
    seed: u64,
    coords_per_tensor: usize,
) -> Result<f64, NumericsError>
where
    P: ParamCollection,
    F: Fn(&P) -> Result<(f64, GradMap), NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::InvalidEps(eps));
    }
    let (loss0, analytic) = loss_fn(params)?;
    if !loss0.is_finite() {
        return Err(NumericsError::NonFiniteLoss(loss0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    for name in params.param_names() {
        let len = params
            .param(&name)
            .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?
            .numel();
        let amount = coords_per_tensor.min(len);
        let picked = rand::seq::index::sample(&mut rng, len, amount);
        for k in picked {
            let orig = params.param(&name).unwrap().values[k];
            params.param_mut(&name).unwrap().values[k] = orig + eps;
            let (lp, _) = loss_fn(params)?;
            params.param_mut(&name).unwrap().values[k] = orig - eps;
            let (lm, _) = loss_fn(params)?;
            params.param_mut(&name).unwrap().values[k] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(NumericsError::NonFiniteLoss(if lp.is_finite() {
                    lm
                } else {
                    lp
                }));
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |g| g[k]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn vec_leaf(tape: &mut Tape, v: &[f64]) -> ValueId {
        tape.leaf(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_mismatched_dims() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, NumericsError::BadTensor { .. }), "{err}");
        let err = Tensor::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, NumericsError::ZeroDim { .. }), "{err}");
    }

    #[test]
    fn tensor_grad_accumulates_and_zeroes() {
        let mut t = Tensor::vector(vec![1.0, 2.0]);
        assert!(t.grad.is_none());
        t.accumulate_grad(&[0.5, -1.0]).unwrap();
        t.accumulate_grad(&[0.5, -1.0]).unwrap();
        assert_eq!(t.grad.as_deref(), Some(&[1.0, -2.0][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0][..]));
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn affine_identity() {
        let mut tape = Tape::new();
        let w = tape
            .leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let x = vec_leaf(&mut tape, &[3.0, 4.0]);
        let b = vec_leaf(&mut tape, &[0.0, 0.0]);
        let y = tape.affine(w, x, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn affine_hand_arithmetic() {
        // [[1,2],[3,4]] · [1,1] + [1,0] = [4, 7]
        let mut tape = Tape::new();
        let w = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = vec_leaf(&mut tape, &[1.0, 1.0]);
        let b = vec_leaf(&mut tape, &[1.0, 0.0]);
        let y = tape.affine(w, x, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[4.0, 7.0]);
    }

    #[test]
    fn affine_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let w = tape.leaf(&[2, 3], vec![0.0; 6]).unwrap();
        let x = vec_leaf(&mut tape, &[1.0, 1.0]);
        let err = tape.affine(w, x, None).unwrap_err();
        match err {
            NumericsError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2]);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn affine_backward_gives_outer_product() {
        // d/dW of sum(W x + b) is the row-replicated x.
        let mut tape = Tape::new();
        let w = tape.leaf(&[2, 2], vec![0.3, -0.2, 0.5, 0.7]).unwrap();
        let x = vec_leaf(&mut tape, &[2.0, -3.0]);
        let b = vec_leaf(&mut tape, &[0.1, 0.2]);
        let y = tape.affine(w, x, Some(b)).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, -3.0, 2.0, -3.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
        // dx_j = sum_i W_ij
        assert_eq!(grads.get(x).unwrap(), &[0.3 + 0.5, -0.2 + 0.7]);
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let z = vec_leaf(&mut tape, &[0.0]);
        let t = tape.tanh(z);
        assert_eq!(tape.value(t), &[0.0]);
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s), &[0.5]);
        let a = vec_leaf(&mut tape, &[2.0, 3.0]);
        let b = vec_leaf(&mut tape, &[4.0, 5.0]);
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m), &[8.0, 15.0]);
        let bad = vec_leaf(&mut tape, &[1.0]);
        assert!(tape.mul(a, bad).is_err());
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0, 1.0, 1.0]);
        let y = tape.softmax(a).unwrap();
        for &v in tape.value(y) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        // softmax([0, ln 3]) = [1/4, 3/4]
        let b = vec_leaf(&mut tape, &[0.0, 3.0_f64.ln()]);
        let y2 = tape.softmax(b).unwrap();
        assert_abs_diff_eq!(tape.value(y2)[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(y2)[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_large_negative_mask_drives_entry_to_zero() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[0.4, -1e9, 0.1]);
        let y = tape.softmax(a).unwrap();
        assert_eq!(tape.value(y)[1], 0.0);
        let sum: f64 = tape.value(y).iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[0.0, f64::NAN]);
        assert!(tape.softmax(a).is_err());
        let b = vec_leaf(&mut tape, &[0.0, f64::INFINITY]);
        assert!(tape.softmax(b).is_err());
    }

    #[test]
    fn concat_basic_empty_and_backward() {
        let mut tape = Tape::new();
        let a = vec_leaf(&mut tape, &[1.0]);
        let b = vec_leaf(&mut tape, &[2.0]);
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0]);

        let empty = tape.leaf(&[0], vec![]).unwrap();
        let d = vec_leaf(&mut tape, &[5.0]);
        let e = tape.concat(&[empty, d]).unwrap();
        assert_eq!(tape.value(e), &[5.0]);

        // backward splits the incoming gradient
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let y = vec_leaf(&mut tape, &[3.0]);
        let cat = tape.concat(&[x, y]).unwrap();
        let w = vec_leaf(&mut tape, &[10.0, 20.0, 30.0]);
        let prod = tape.mul(cat, w).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[10.0, 20.0]);
        assert_eq!(grads.get(y).unwrap(), &[30.0]);
    }

    #[test]
    fn lookup_row_bounds_and_sparse_backward() {
        let mut tape = Tape::new();
        let table = tape.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let row = tape.lookup(table, 1).unwrap();
        assert_eq!(tape.value(row), &[3.0, 4.0]);
        assert!(matches!(
            tape.lookup(table, 2),
            Err(NumericsError::IndexOutOfRange { .. })
        ));
        let loss = tape.sum(row);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let w = tape.leaf(&[3, 3], (0..9).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
        let x = vec_leaf(&mut tape, &[0.3, -0.2, 0.9]);
        let h = tape.affine(w, x, None).unwrap();
        let t = tape.tanh(h);
        let sm = tape.softmax(t).unwrap();
        let p = tape.pick(sm, 1).unwrap();
        let loss = tape.ln(p).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(w).unwrap(), g2.get(w).unwrap());
        assert_eq!(g1.get(x).unwrap(), g2.get(x).unwrap());
    }

    #[test]
    fn param_registration_dedupes_by_name() {
        let mut tape = Tape::new();
        let t = Tensor::vector(vec![1.0, 2.0]);
        let a = tape.param("w", &t).unwrap();
        let b = tape.param("w", &t).unwrap();
        assert_eq!(a, b);
        let other = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            tape.param("w", &other),
            Err(NumericsError::ParamRedefined { .. })
        ));
    }

    /// Finite-difference check for a scalar loss built from a single-tensor
    /// parameter map.
    fn fd_check(
        params: BTreeMap<String, Tensor>,
        build: impl Fn(&mut Tape, &BTreeMap<String, Tensor>) -> ValueId,
    ) -> f64 {
        let mut params = params;
        gradient_check(
            &mut params,
            |p| {
                let mut tape = Tape::new();
                let loss = build(&mut tape, p);
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss)[0], tape.param_grads(&grads)))
            },
            1e-5,
            7,
            usize::MAX,
        )
        .unwrap()
    }

    fn one_param(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), t);
        m
    }

    #[test]
    fn fd_affine_chain() {
        let mut params = one_param(
            "w",
            Tensor::new(vec![3, 2], vec![0.3, -0.8, 0.5, 0.2, -0.1, 0.9]).unwrap(),
        );
        params.insert("x".into(), Tensor::vector(vec![0.7, -0.4]));
        params.insert("b".into(), Tensor::vector(vec![0.05, -0.02, 0.11]));
        let err = fd_check(params, |tape, p| {
            let w = tape.param("w", &p["w"]).unwrap();
            let x = tape.param("x", &p["x"]).unwrap();
            let b = tape.param("b", &p["b"]).unwrap();
            let y = tape.affine(w, x, Some(b)).unwrap();
            let t = tape.tanh(y);
            tape.sum(t)
        });
        assert!(err < 1e-6, "affine/tanh fd error {err}");
    }

    #[test]
    fn fd_sigmoid_mul_dot() {
        let mut params = one_param("a", Tensor::vector(vec![0.3, -0.6, 0.9]));
        params.insert("b".into(), Tensor::vector(vec![-0.2, 0.4, 0.1]));
        let err = fd_check(params, |tape, p| {
            let a = tape.param("a", &p["a"]).unwrap();
            let b = tape.param("b", &p["b"]).unwrap();
            let sa = tape.sigmoid(a);
            let m = tape.mul(sa, b).unwrap();
            let d = tape.dot(m, b).unwrap();
            tape.sum(d)
        });
        assert!(err < 1e-6, "sigmoid/mul/dot fd error {err}");
    }

    #[test]
    fn fd_softmax_ln_pick() {
        let params = one_param("z", Tensor::vector(vec![0.2, -0.5, 0.9, 0.1]));
        let err = fd_check(params, |tape, p| {
            let z = tape.param("z", &p["z"]).unwrap();
            let sm = tape.softmax(z).unwrap();
            let picked = tape.pick(sm, 2).unwrap();
            tape.ln(picked).unwrap()
        });
        assert!(err < 1e-6, "softmax/ln/pick fd error {err}");
    }

    #[test]
    fn fd_concat_slice_scale_mul_scalar() {
        let mut params = one_param("a", Tensor::vector(vec![0.3, -0.1]));
        params.insert("b".into(), Tensor::vector(vec![0.8, 0.2, -0.4]));
        let err = fd_check(params, |tape, p| {
            let a = tape.param("a", &p["a"]).unwrap();
            let b = tape.param("b", &p["b"]).unwrap();
            let cat = tape.concat(&[a, b]).unwrap();
            let sl = tape.slice(cat, 1, 3).unwrap();
            let sc = tape.scale(sl, -1.7);
            let s = tape.pick(cat, 0).unwrap();
            let ms = tape.mul_scalar(sc, s).unwrap();
            tape.sum(ms)
        });
        assert!(err < 1e-6, "concat/slice/scale/mul_scalar fd error {err}");
    }

    #[test]
    fn fd_lookup_add_many() {
        let params = one_param(
            "table",
            Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap(),
        );
        let err = fd_check(params, |tape, p| {
            let table = tape.param("table", &p["table"]).unwrap();
            let r0 = tape.lookup(table, 0).unwrap();
            let r2 = tape.lookup(table, 2).unwrap();
            let r2b = tape.lookup(table, 2).unwrap();
            let s = tape.add_many(&[r0, r2, r2b]).unwrap();
            let t = tape.tanh(s);
            tape.sum(t)
        });
        assert!(err < 1e-6, "lookup/add_many fd error {err}");
    }

    #[test]
    fn gradient_check_quadratic_matches_analytic() {
        // loss = sum(theta^2), analytic gradient [2, 4] at theta = [1, 2].
        let mut params = one_param("theta", Tensor::vector(vec![1.0, 2.0]));
        let err = gradient_check(
            &mut params,
            |p| {
                let theta = &p["theta"];
                let loss: f64 = theta.values.iter().map(|v| v * v).sum();
                let mut grads = GradMap::new();
                grads.insert(
                    "theta".into(),
                    theta.values.iter().map(|v| 2.0 * v).collect(),
                );
                Ok((loss, grads))
            },
            1e-5,
            3,
            usize::MAX,
        )
        .unwrap();
        assert!(err < 1e-8, "quadratic fd error {err}");
    }

    #[test]
    fn gradient_check_rejects_bad_eps_and_non_finite_loss() {
        let mut params = one_param("theta", Tensor::vector(vec![1.0]));
        let err = gradient_check(
            &mut params,
            |_| Ok((0.0, GradMap::new())),
            0.0,
            1,
            usize::MAX,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::InvalidEps(_)));
        let err = gradient_check(
            &mut params,
            |_| Ok((f64::NAN, GradMap::new())),
            1e-5,
            1,
            usize::MAX,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonFiniteLoss(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            raw in proptest::collection::vec(-1.0f64..1.0, 1..12),
            shift in -3.0f64..3.0,
        ) {
            let mut tape = Tape::new();
            let a = tape.leaf(&[raw.len()], raw.clone()).unwrap();
            let y = tape.softmax(a).unwrap();
            let sum: f64 = tape.value(y).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);

            let shifted: Vec<f64> = raw.iter().map(|v| v + shift).collect();
            let b = tape.leaf(&[raw.len()], shifted).unwrap();
            let y2 = tape.softmax(b).unwrap();
            let argmax = |v: &[f64]| {
                v.iter().enumerate().fold((0usize, f64::NEG_INFINITY), |best, (i, &x)| {
                    if x > best.1 { (i, x) } else { best }
                }).0
            };
            prop_assert_eq!(argmax(tape.value(y)), argmax(tape.value(y2)));
            for (p, q) in tape.value(y).iter().zip(tape.value(y2)) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn fd_random_composite(values in proptest::collection::vec(-1.0f64..1.0, 4..8)) {
            // affine -> sigmoid -> softmax -> ln(pick) over random inputs.
            let n = values.len();
            let mut w_vals = Vec::with_capacity(n * n);
            for i in 0..n * n {
                w_vals.push(((i as f64) * 0.37).sin() * 0.5);
            }
            let mut params = BTreeMap::new();
            params.insert("x".to_string(), Tensor::vector(values));
            params.insert("w".to_string(), Tensor::new(vec![n, n], w_vals).unwrap());
            let mut params = params;
            let err = gradient_check(
                &mut params,
                |p| {
                    let mut tape = Tape::new();
                    let w = tape.param("w", &p["w"])?;
                    let x = tape.param("x", &p["x"])?;
                    let h = tape.affine(w, x, None)?;
                    let s = tape.sigmoid(h);
                    let sm = tape.softmax(s)?;
                    let picked = tape.pick(sm, 0)?;
                    let loss = tape.ln(picked)?;
                    let grads = tape.backward(loss)?;
                    Ok((tape.value(loss)[0], tape.param_grads(&grads)))
                },
                1e-5,
                11,
                usize::MAX,
            ).unwrap();
            prop_assert!(err < 1e-5, "composite fd error {}", err);
        }
    }
}
