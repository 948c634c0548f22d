//! Reverse-mode differentiation over a linear record of tensor ops.
//!
//! Nodes are appended in execution order, so walking the record backwards
//! visits every node after all of its consumers. Parameters enter the tape
//! by reference; no weights are copied to run a forward pass.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ops::{self, AttentionShape, LayerNormCache};
use super::param::{Gradients, Parameter};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache<T>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<T>,
    },
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
    Bce {
        probs: Var,
        labels: Vec<T>,
        weights: Vec<T>,
    },
}

struct Node<'a, T: Clone> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<usize>,
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    recording: bool,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// A tape that records ops for [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; nothing is kept for differentiation.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool, param: Option<usize>) -> Var {
        let needs_grad = needs_grad && self.recording;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(Cow::Owned(value), op, needs, None)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false, None)
    }

    /// A free leaf whose gradient is reported by [`Gradients::var`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true, None)
    }

    /// Borrows a parameter; it is differentiated only when trainable.
    pub fn param(&mut self, id: usize, p: &'a Parameter<T>) -> Var {
        self.push(Cow::Borrowed(&p.value), Op::Leaf, p.trainable, Some(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_row(self.value(x), self.value(bias))?;
        Ok(self.derived(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x * w + b` for a dense layer with `w: in x out`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.derived(out, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.derived(out, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.derived(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.derived(out, Op::Sigmoid(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (out, cache) = ops::layer_norm_cached(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.derived(out, Op::LayerNorm { x, gain, bias, cache }, &[x, gain, bias]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = ops::softmax_rows(self.value(x));
        self.derived(out, Op::Softmax(x), &[x])
    }

    /// Row gather; used both for embedding lookup and for picking rows out
    /// of activations.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = ops::embedding_lookup(self.value(table), ids)?;
        Ok(self.derived(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool], shape: AttentionShape) -> Result<Var> {
        let (out, probs) = ops::multi_head_attention(self.value(q), self.value(k), self.value(v), key_mask, shape)?;
        Ok(self.derived(out, Op::Attention { q, k, v, shape, probs }, &[q, k, v]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_cols(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.derived(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::lit(t.len().max(1) as f64));
        self.derived(out, Op::Mean(x), &[x])
    }

    /// Weighted binary cross-entropy of a probability column.
    pub fn bce(&mut self, probs: Var, labels: &[T], weights: &[T]) -> Result<Var> {
        let loss = ops::weighted_bce(self.value(probs).data(), labels, weights)?;
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            &[probs],
        ))
    }

    /// Propagates d(loss)/d(node) from a scalar `loss` back to every leaf
    /// that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::contract("backward on a tape that was not recording"));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape().to_vec(), T::one()));
        let mut params = BTreeMap::new();
        let mut vars = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match node.param {
                    Some(pid) => {
                        params.insert(pid, g);
                    }
                    None => {
                        vars.insert(i, g);
                    }
                }
                continue;
            }
            for (input, contribution) in self.local_grads(node, &g)? {
                if !self.needs(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { params, vars })
    }

    fn local_grads(&self, node: &Node<'a, T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), g, self.needs(*a), self.needs(*b));
                out.extend(da.map(|t| (*a, t)));
                out.extend(db.map(|t| (*b, t)));
            }
            Op::AddRow(x, b) => {
                out.push((*x, g.clone()));
                if self.needs(*b) {
                    let shape = self.value(*b).shape().to_vec();
                    out.push((*b, Tensor::new(shape, ops::column_sums(g))?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, ops::mul(g, self.value(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, ops::mul(g, self.value(*a))?));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.map(|v| v * *f))),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| gi * ops::gelu_derivative(xi))
                    .collect();
                out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                    .collect();
                out.push((*x, Tensor::new(y.shape().to_vec(), data)?));
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let gain_t = self.value(*gain);
                let (dx, dgain, dbias) = ops::layer_norm_backward(g, gain_t, cache);
                out.push((*x, dx));
                out.push((*gain, Tensor::new(gain_t.shape().to_vec(), dgain)?));
                out.push((*bias, Tensor::new(self.value(*bias).shape().to_vec(), dbias)?));
            }
            Op::Softmax(x) => out.push((*x, ops::softmax_backward(&node.value, g))),
            Op::Gather { table, ids } => {
                out.push((*table, ops::scatter_rows(self.value(*table).shape(), ids, g)));
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (dq, dk, dv) =
                    ops::attention_backward(self.value(*q), self.value(*k), self.value(*v), probs, *shape, g);
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let rows = g.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                out.push((*a, Tensor::new(vec![rows, ca], da)?));
                out.push((*b, Tensor::new(vec![rows, cb], db)?));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                out.push((*x, Tensor::filled(shape, g.data()[0])));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let n = T::lit(xv.len().max(1) as f64);
                out.push((*x, Tensor::filled(xv.shape().to_vec(), g.data()[0] / n)));
            }
            Op::Bce { probs, labels, weights } => {
                let pv = self.value(*probs);
                let data = ops::weighted_bce_backward(pv.data(), labels, weights, g.data()[0]);
                out.push((*probs, Tensor::new(pv.shape().to_vec(), data)?));
            }
        }
        Ok(out)
    }
}
