//! Minimal reverse-mode automatic differentiation over dense n-dimensional
//! f64 arrays. Every loss and network in this repo is built on it.
//!
//! Tensors are immutable values; an op returns a fresh tensor that records
//! its producing operation and parents whenever any input participates in
//! gradient tracking. [`Tensor::backward`] walks that acyclic graph once and
//! accumulates gradients additively, so calling it twice without clearing
//! doubles every gradient. A graph lives until the tensors holding it drop,
//! which the training loops do once per optimizer step.
//!
//! All ops are deterministic: identical inputs produce bit-identical outputs
//! regardless of thread count (see `kernels` for the parallelism rule).
//! A single graph must be built and differentiated by one logical thread;
//! independent graphs may be evaluated in parallel.

pub mod adam;
pub mod gradcheck;
pub(crate) mod kernels;

pub use adam::{adam_step, AdamConfig, Parameter};

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Add,
    Mul,
    Relu,
    Tanh,
    L1,
    Bce,
    Matmul,
    TransposeLast,
    Permute(Vec<usize>),
    Reshape,
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    Softmax,
    LayerNorm { eps: f64 },
    Embed { ids: Arc<Vec<u32>> },
    Conv2d { stride: usize },
    Upsample2,
    ResizeBilinear,
    Sum,
    Mean,
    CrossEntropy { targets: Arc<Vec<u32>> },
    StraightThrough,
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<Tensor>,
}

#[derive(Debug)]
struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
    requires_grad: bool,
}

/// Dense n-dimensional f64 array, optionally recording its producing op.
#[derive(Clone, Debug)]
pub struct Tensor {
    inner: Arc<Inner>,
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, values: Vec<f64>, node: Option<Node>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(product(&shape), values.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values,
                grad: Mutex::new(None),
                node,
                requires_grad,
            }),
        }
    }

    /// Constant leaf (not tracked by backward).
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if product(shape) != values.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} values, got {}", shape, product(shape), values.len()),
            ));
        }
        Ok(Tensor::build(shape.to_vec(), values, None, false))
    }

    /// Differentiable leaf.
    pub fn var(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if product(shape) != values.len() {
            return Err(Error::shape(
                "var",
                format!("shape {:?} wants {} values, got {}", shape, product(shape), values.len()),
            ));
        }
        Ok(Tensor::build(shape.to_vec(), values, None, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; product(shape)], None, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::build(vec![1], vec![v], None, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn len(&self) -> usize {
        self.inner.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    fn id(&self) -> u64 {
        self.inner.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.values[0]
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Constant copy sharing no graph history (stop-gradient).
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.inner.values.clone(), None, false)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn make(op: Op, parents: Vec<Tensor>, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        let requires = parents.iter().any(Tensor::requires_grad);
        let node = if requires { Some(Node { op, parents }) } else { None };
        Tensor::build(shape, values, node, requires)
    }

    // ── element-wise ops ────────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_broadcast("add", self, rhs, |a, b| a + b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        binary_broadcast("mul", self, rhs, |a, b| a * b)
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        self.mul(&Tensor::scalar(c)).expect("scalar broadcast")
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.add(&rhs.scale(-1.0))
    }

    pub fn relu(&self) -> Tensor {
        let values = self.values().iter().map(|&v| v.max(0.0)).collect();
        Tensor::make(Op::Relu, vec![self.clone()], self.shape().to_vec(), values)
    }

    pub fn tanh(&self) -> Tensor {
        let values = self.values().iter().map(|&v| v.tanh()).collect();
        Tensor::make(Op::Tanh, vec![self.clone()], self.shape().to_vec(), values)
    }

    /// Element-wise absolute difference |a - b|.
    pub fn l1(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                "l1",
                format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let values = self
            .values()
            .iter()
            .zip(rhs.values())
            .map(|(&a, &b)| (a - b).abs())
            .collect();
        Ok(Tensor::make(
            Op::L1,
            vec![self.clone(), rhs.clone()],
            self.shape().to_vec(),
            values,
        ))
    }

    /// Element-wise binary cross-entropy of sigmoid(self) against targets
    /// in [0, 1], computed in the numerically stable logit form.
    pub fn bce(&self, targets: &Tensor) -> Result<Tensor> {
        if self.shape() != targets.shape() {
            return Err(Error::shape(
                "bce",
                format!("{:?} vs {:?}", self.shape(), targets.shape()),
            ));
        }
        if self.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bce logits"));
        }
        let values = self
            .values()
            .iter()
            .zip(targets.values())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .collect();
        Ok(Tensor::make(
            Op::Bce,
            vec![self.clone(), targets.clone()],
            self.shape().to_vec(),
            values,
        ))
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if product(shape) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::make(
            Op::Reshape,
            vec![self.clone()],
            shape.to_vec(),
            self.values().to_vec(),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let nd = self.shape().len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!(
                "permute: {:?} is not a permutation of {} axes",
                perm, nd
            )));
        }
        let mut values = vec![0.0; self.len()];
        kernels::permute(self.values(), self.shape(), perm, &mut values);
        let out_shape = perm.iter().map(|&p| self.shape()[p]).collect();
        Ok(Tensor::make(
            Op::Permute(perm.to_vec()),
            vec![self.clone()],
            out_shape,
            values,
        ))
    }

    /// Swap the last two axes (rank 2 or 3).
    pub fn transpose_last(&self) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::shape("transpose_last", format!("rank {} < 2", nd)));
        }
        let (batch, r, c) = last_two(self.shape());
        let mut values = vec![0.0; self.len()];
        kernels::transpose_last(self.values(), batch, r, c, &mut values);
        let mut out_shape = self.shape().to_vec();
        out_shape.swap(nd - 1, nd - 2);
        Ok(Tensor::make(
            Op::TransposeLast,
            vec![self.clone()],
            out_shape,
            values,
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {} range {}..{} of {:?}", axis, start, start + len, shape),
            ));
        }
        let outer = product(&shape[..axis]);
        let mid = shape[axis];
        let inner = product(&shape[axis + 1..]);
        let mut values = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            values.extend_from_slice(&self.values()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::make(
            Op::Slice { axis, start, len },
            vec![self.clone()],
            out_shape,
            values,
        ))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let nd = first.shape().len();
        if axis >= nd {
            return Err(Error::shape("concat", format!("axis {} of rank {}", axis, nd)));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != nd
                || p.shape()[..axis] != first.shape()[..axis]
                || p.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {}", p.shape(), first.shape(), axis),
                ));
            }
            axis_total += p.shape()[axis];
        }
        let outer = product(&first.shape()[..axis]);
        let inner = product(&first.shape()[axis + 1..]);
        let mut values = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let mid = p.shape()[axis];
                let base = o * mid * inner;
                values.extend_from_slice(&p.values()[base..base + mid * inner]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        Ok(Tensor::make(
            Op::Concat { axis },
            parts.iter().map(|&p| p.clone()).collect(),
            out_shape,
            values,
        ))
    }

    // ── contractions and structured ops ─────────────────────────────────

    /// Matrix product: [m,k]x[k,n], or batched [b,m,k]x[b,k,n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let (batch, m, k, n) = match (ls.len(), rs.len()) {
            (2, 2) if ls[1] == rs[0] => (1, ls[0], ls[1], rs[1]),
            (3, 3) if ls[0] == rs[0] && ls[2] == rs[1] => (ls[0], ls[1], ls[2], rs[2]),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", ls, rs),
                ))
            }
        };
        let mut values = vec![0.0; batch * m * n];
        kernels::matmul(self.values(), rhs.values(), batch, m, k, n, &mut values);
        let out_shape = if ls.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(Tensor::make(
            Op::Matmul,
            vec![self.clone(), rhs.clone()],
            out_shape,
            values,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let w = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank 0".to_string()))?;
        let mut values = vec![0.0; self.len()];
        kernels::softmax_rows(self.values(), w, &mut values);
        Ok(Tensor::make(
            Op::Softmax,
            vec![self.clone()],
            self.shape().to_vec(),
            values,
        ))
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layernorm", "rank 0".to_string()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layernorm",
                format!("gamma {:?} beta {:?} for width {}", gamma.shape(), beta.shape(), d),
            ));
        }
        let mut values = vec![0.0; self.len()];
        for (dst, src) in values.chunks_mut(d).zip(self.values().chunks(d)) {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ((o, &v), (&g, &b)) in dst
                .iter_mut()
                .zip(src)
                .zip(gamma.values().iter().zip(beta.values()))
            {
                *o = (v - mean) * inv * g + b;
            }
        }
        Ok(Tensor::make(
            Op::LayerNorm { eps },
            vec![self.clone(), gamma.clone(), beta.clone()],
            self.shape().to_vec(),
            values,
        ))
    }

    /// Row lookup: self is a [vocab, dim] table, output is [ids.len(), dim].
    pub fn embed(&self, ids: &[u32]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("embed", format!("table rank {:?}", shape)));
        }
        let (v, d) = (shape[0], shape[1]);
        let mut values = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { value: id, limit: v });
            }
            values.extend_from_slice(&self.values()[id as usize * d..(id as usize + 1) * d]);
        }
        Ok(Tensor::make(
            Op::Embed { ids: Arc::new(ids.to_vec()) },
            vec![self.clone()],
            vec![ids.len(), d],
            values,
        ))
    }

    /// 3x3 convolution with zero padding 1. Input [b,c,h,w], weight
    /// [oc,c,3,3], bias [oc]; stride 1 or 2.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} weight {:?}", xs, ws),
            ));
        }
        if ws[1] != xs[1] || bias.shape() != [ws[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} weight {:?} bias {:?}", xs, ws, bias.shape()),
            ));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(format!("conv2d: unsupported stride {}", stride)));
        }
        let dims = kernels::ConvDims::new(xs[0], xs[1], xs[2], xs[3], ws[0], stride);
        let mut values = vec![0.0; dims.batch * dims.out_ch * dims.oh * dims.ow];
        kernels::conv2d(self.values(), weight.values(), bias.values(), &dims, &mut values);
        let out_shape = vec![dims.batch, dims.out_ch, dims.oh, dims.ow];
        Ok(Tensor::make(
            Op::Conv2d { stride },
            vec![self.clone(), weight.clone(), bias.clone()],
            out_shape,
            values,
        ))
    }

    /// Nearest-neighbour 2x spatial upsample of [b,c,h,w].
    pub fn upsample2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample2", format!("{:?}", s)));
        }
        let planes = s[0] * s[1];
        let mut values = vec![0.0; self.len() * 4];
        kernels::upsample2(self.values(), planes, s[2], s[3], &mut values);
        Ok(Tensor::make(
            Op::Upsample2,
            vec![self.clone()],
            vec![s[0], s[1], s[2] * 2, s[3] * 2],
            values,
        ))
    }

    /// Bilinear resize of the last two axes.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || oh == 0 || ow == 0 {
            return Err(Error::shape("resize", format!("{:?} -> {}x{}", s, oh, ow)));
        }
        let (planes, h, w) = last_two(s);
        let mut values = vec![0.0; planes * oh * ow];
        kernels::resize_bilinear(self.values(), planes, h, w, oh, ow, &mut values);
        let mut out_shape = s.to_vec();
        let nd = s.len();
        out_shape[nd - 2] = oh;
        out_shape[nd - 1] = ow;
        Ok(Tensor::make(
            Op::ResizeBilinear,
            vec![self.clone()],
            out_shape,
            values,
        ))
    }

    // ── reductions and losses ───────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        Tensor::make(Op::Sum, vec![self.clone()], vec![1], vec![s])
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        let n = self.len().max(1) as f64;
        Tensor::make(Op::Mean, vec![self.clone()], vec![1], vec![s / n])
    }

    /// Per-row negative log-likelihood of integer targets under softmax of
    /// [n, vocab] logits; output shape [n].
    pub fn cross_entropy(&self, targets: &[u32]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, {} targets", s, targets.len()),
            ));
        }
        let v = s[1];
        let mut values = Vec::with_capacity(targets.len());
        for (row, &t) in self.values().chunks(v).zip(targets) {
            if t as usize >= v {
                return Err(Error::TokenOutOfRange { value: t, limit: v });
            }
            values.push(kernels::log_sum_exp(row) - row[t as usize]);
        }
        Ok(Tensor::make(
            Op::CrossEntropy { targets: Arc::new(targets.to_vec()) },
            vec![self.clone()],
            vec![s[0]],
            values,
        ))
    }

    /// Forward values replaced by `values`; gradient passes through to
    /// `self` unchanged. The quantizer's straight-through estimator.
    pub(crate) fn straight_through(&self, values: Vec<f64>) -> Result<Tensor> {
        if values.len() != self.len() {
            return Err(Error::shape(
                "straight_through",
                format!("{} values for {:?}", values.len(), self.shape()),
            ));
        }
        Ok(Tensor::make(
            Op::StraightThrough,
            vec![self.clone()],
            self.shape().to_vec(),
            values,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode pass from a scalar root. Gradients land in every
    /// tracked ancestor and add to whatever is already stored there.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarRoot(self.len()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        // Postorder DFS over the tracked subgraph: parents finish first, so
        // the reversed order processes every consumer before its producer.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, next_parent)) = stack.last_mut() {
            let parent = t
                .inner
                .node
                .as_ref()
                .and_then(|n| n.parents.get(*next_parent))
                .cloned();
            match parent {
                Some(p) => {
                    *next_parent += 1;
                    if p.requires_grad() && visited.insert(p.id()) {
                        stack.push((p, 0));
                    }
                }
                None => {
                    order.push(t.clone());
                    stack.pop();
                }
            }
        }
        let mut flow: HashMap<u64, Vec<f64>> = HashMap::new();
        flow.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let g = match flow.remove(&t.id()) {
                Some(g) => g,
                None => continue,
            };
            t.accumulate_grad(&g);
            if let Some(node) = &t.inner.node {
                op_backward(t, node, &g, &mut |idx: usize, contrib: Vec<f64>| {
                    let p = &node.parents[idx];
                    debug_assert_eq!(contrib.len(), p.len());
                    flow.entry(p.id())
                        .and_modify(|buf| {
                            for (b, &v) in buf.iter_mut().zip(&contrib) {
                                *b += v;
                            }
                        })
                        .or_insert(contrib);
                });
            }
        }
        Ok(())
    }
}

/// (product of leading axes, second-to-last, last).
fn last_two(shape: &[usize]) -> (usize, usize, usize) {
    let nd = shape.len();
    (product(&shape[..nd - 2]), shape[nd - 2], shape[nd - 1])
}

/// Shared add/mul path. Operands must have equal shapes, or one must be a
/// scalar or a trailing-shape of the other (leading-batch broadcast).
fn binary_broadcast(
    name: &'static str,
    lhs: &Tensor,
    rhs: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let op = match name {
        "add" => Op::Add,
        _ => Op::Mul,
    };
    let (big, small, big_is_lhs) = if lhs.len() >= rhs.len() {
        (lhs, rhs, true)
    } else {
        (rhs, lhs, false)
    };
    let compatible = big.shape() == small.shape()
        || small.len() == 1
        || (small.len() > 0
            && big.len() % small.len() == 0
            && big.shape().ends_with(small.shape()));
    if !compatible {
        return Err(Error::shape(
            name,
            format!("{:?} vs {:?}", lhs.shape(), rhs.shape()),
        ));
    }
    let sv = small.values();
    let values = big
        .values()
        .chunks(sv.len())
        .flat_map(|chunk| {
            chunk.iter().zip(sv).map(|(&bv, &svv)| {
                if big_is_lhs {
                    f(bv, svv)
                } else {
                    f(svv, bv)
                }
            })
        })
        .collect();
    Ok(Tensor::make(
        op,
        vec![lhs.clone(), rhs.clone()],
        big.shape().to_vec(),
        values,
    ))
}

/// Sum `g` over leading chunks down to `small_len` elements.
fn reduce_to(g: &[f64], small_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    for chunk in g.chunks(small_len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

/// Broadcast-aware product of upstream grad with the other operand.
fn mul_grad(g: &[f64], other: &[f64], target_len: usize) -> Vec<f64> {
    if other.len() == g.len() {
        let full: Vec<f64> = g.iter().zip(other).map(|(&a, &b)| a * b).collect();
        if target_len == g.len() {
            full
        } else {
            reduce_to(&full, target_len)
        }
    } else {
        // other is the small operand, broadcast across chunks
        let full: Vec<f64> = g
            .chunks(other.len())
            .flat_map(|chunk| chunk.iter().zip(other).map(|(&a, &b)| a * b))
            .collect();
        if target_len == g.len() {
            full
        } else {
            reduce_to(&full, target_len)
        }
    }
}

fn op_backward(out: &Tensor, node: &Node, g: &[f64], sink: &mut dyn FnMut(usize, Vec<f64>)) {
    let parents = &node.parents;
    match &node.op {
        Op::Add => {
            for (i, p) in parents.iter().enumerate() {
                if p.requires_grad() {
                    if p.len() == g.len() {
                        sink(i, g.to_vec());
                    } else {
                        sink(i, reduce_to(g, p.len()));
                    }
                }
            }
        }
        Op::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                sink(0, mul_grad(g, b.values(), a.len()));
            }
            if b.requires_grad() {
                sink(1, mul_grad(g, a.values(), b.len()));
            }
        }
        Op::Relu => {
            let x = parents[0].values();
            sink(
                0,
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect(),
            );
        }
        Op::Tanh => {
            let y = out.values();
            sink(0, g.iter().zip(y).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect());
        }
        Op::L1 => {
            let (a, b) = (parents[0].values(), parents[1].values());
            let signed: Vec<f64> = g
                .iter()
                .zip(a.iter().zip(b))
                .map(|(&gv, (&av, &bv))| gv * (av - bv).signum() * if av == bv { 0.0 } else { 1.0 })
                .collect();
            if parents[0].requires_grad() {
                sink(0, signed.clone());
            }
            if parents[1].requires_grad() {
                sink(1, signed.iter().map(|&v| -v).collect());
            }
        }
        Op::Bce => {
            let (z, y) = (parents[0].values(), parents[1].values());
            if parents[0].requires_grad() {
                sink(
                    0,
                    g.iter()
                        .zip(z.iter().zip(y))
                        .map(|(&gv, (&zv, &yv))| gv * (sigmoid(zv) - yv))
                        .collect(),
                );
            }
            if parents[1].requires_grad() {
                sink(1, g.iter().zip(z).map(|(&gv, &zv)| -gv * zv).collect());
            }
        }
        Op::Matmul => {
            let (a, b) = (&parents[0], &parents[1]);
            let (batch, m, k) = match a.shape().len() {
                2 => (1, a.shape()[0], a.shape()[1]),
                _ => (a.shape()[0], a.shape()[1], a.shape()[2]),
            };
            let n = *b.shape().last().unwrap();
            if a.requires_grad() {
                // dA = G . B^T
                let mut bt = vec![0.0; b.len()];
                kernels::transpose_last(b.values(), batch, k, n, &mut bt);
                let mut da = vec![0.0; a.len()];
                kernels::matmul(g, &bt, batch, m, n, k, &mut da);
                sink(0, da);
            }
            if b.requires_grad() {
                // dB = A^T . G
                let mut at = vec![0.0; a.len()];
                kernels::transpose_last(a.values(), batch, m, k, &mut at);
                let mut db = vec![0.0; b.len()];
                kernels::matmul(&at, g, batch, k, m, n, &mut db);
                sink(1, db);
            }
        }
        Op::TransposeLast => {
            let (batch, r, c) = last_two(out.shape());
            let mut d = vec![0.0; g.len()];
            kernels::transpose_last(g, batch, r, c, &mut d);
            sink(0, d);
        }
        Op::Permute(perm) => {
            let inv = kernels::invert_perm(perm);
            let mut d = vec![0.0; g.len()];
            kernels::permute(g, out.shape(), &inv, &mut d);
            sink(0, d);
        }
        Op::Reshape => sink(0, g.to_vec()),
        Op::Slice { axis, start, len } => {
            let pshape = parents[0].shape();
            let outer = product(&pshape[..*axis]);
            let mid = pshape[*axis];
            let inner = product(&pshape[*axis + 1..]);
            let mut d = vec![0.0; parents[0].len()];
            for o in 0..outer {
                let dst = (o * mid + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            sink(0, d);
        }
        Op::Concat { axis } => {
            let outer = product(&out.shape()[..*axis]);
            let inner = product(&out.shape()[*axis + 1..]);
            let total_mid = out.shape()[*axis];
            let mut offset = 0;
            for (i, p) in parents.iter().enumerate() {
                let mid = p.shape()[*axis];
                if p.requires_grad() {
                    let mut d = vec![0.0; p.len()];
                    for o in 0..outer {
                        let src = (o * total_mid + offset) * inner;
                        let dst = o * mid * inner;
                        d[dst..dst + mid * inner].copy_from_slice(&g[src..src + mid * inner]);
                    }
                    sink(i, d);
                }
                offset += mid;
            }
        }
        Op::Softmax => {
            let w = *out.shape().last().unwrap();
            let mut d = vec![0.0; g.len()];
            kernels::softmax_backward(out.values(), g, w, &mut d);
            sink(0, d);
        }
        Op::LayerNorm { eps } => {
            let d_width = *out.shape().last().unwrap();
            let x = parents[0].values();
            let gamma = parents[1].values();
            let rows = x.len() / d_width;
            let mut dx = vec![0.0; x.len()];
            let mut dgamma = vec![0.0; d_width];
            let mut dbeta = vec![0.0; d_width];
            let mut xhat = vec![0.0; d_width];
            let mut dxhat = vec![0.0; d_width];
            for r in 0..rows {
                let xs = &x[r * d_width..(r + 1) * d_width];
                let gs = &g[r * d_width..(r + 1) * d_width];
                let mean = xs.iter().sum::<f64>() / d_width as f64;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d_width as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d_width {
                    xhat[j] = (xs[j] - mean) * inv;
                    dxhat[j] = gs[j] * gamma[j];
                }
                let sum_dxhat: f64 = dxhat.iter().sum();
                let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                let df = d_width as f64;
                for j in 0..d_width {
                    dgamma[j] += gs[j] * xhat[j];
                    dbeta[j] += gs[j];
                    dx[r * d_width + j] =
                        inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                }
            }
            if parents[0].requires_grad() {
                sink(0, dx);
            }
            if parents[1].requires_grad() {
                sink(1, dgamma);
            }
            if parents[2].requires_grad() {
                sink(2, dbeta);
            }
        }
        Op::Embed { ids } => {
            let d_width = parents[0].shape()[1];
            let mut dt = vec![0.0; parents[0].len()];
            for (row, &id) in g.chunks(d_width).zip(ids.iter()) {
                let base = id as usize * d_width;
                for (o, &v) in dt[base..base + d_width].iter_mut().zip(row) {
                    *o += v;
                }
            }
            sink(0, dt);
        }
        Op::Conv2d { stride } => {
            let xs = parents[0].shape();
            let ws = parents[1].shape();
            let dims = kernels::ConvDims::new(xs[0], xs[1], xs[2], xs[3], ws[0], *stride);
            if parents[0].requires_grad() {
                let mut dx = vec![0.0; parents[0].len()];
                kernels::conv2d_backward_input(g, parents[1].values(), &dims, &mut dx);
                sink(0, dx);
            }
            if parents[1].requires_grad() {
                let mut dw = vec![0.0; parents[1].len()];
                kernels::conv2d_backward_weight(parents[0].values(), g, &dims, &mut dw);
                sink(1, dw);
            }
            if parents[2].requires_grad() {
                let mut db = vec![0.0; parents[2].len()];
                kernels::conv2d_backward_bias(g, &dims, &mut db);
                sink(2, db);
            }
        }
        Op::Upsample2 => {
            let s = parents[0].shape();
            let mut d = vec![0.0; parents[0].len()];
            kernels::upsample2_backward(g, s[0] * s[1], s[2], s[3], &mut d);
            sink(0, d);
        }
        Op::ResizeBilinear => {
            let (planes, h, w) = last_two(parents[0].shape());
            let (_, oh, ow) = last_two(out.shape());
            let mut d = vec![0.0; parents[0].len()];
            kernels::resize_bilinear_backward(g, planes, h, w, oh, ow, &mut d);
            sink(0, d);
        }
        Op::Sum => sink(0, vec![g[0]; parents[0].len()]),
        Op::Mean => {
            let n = parents[0].len().max(1) as f64;
            sink(0, vec![g[0] / n; parents[0].len()]);
        }
        Op::CrossEntropy { targets } => {
            let v = parents[0].shape()[1];
            let z = parents[0].values();
            let mut d = vec![0.0; z.len()];
            for (r, (&t, &gr)) in targets.iter().zip(g).enumerate() {
                let row = &z[r * v..(r + 1) * v];
                let lse = kernels::log_sum_exp(row);
                for (j, (&zv, o)) in row.iter().zip(&mut d[r * v..(r + 1) * v]).enumerate() {
                    let p = (zv - lse).exp();
                    *o = gr * (p - if j == t as usize { 1.0 } else { 0.0 });
                }
            }
            sink(0, d);
        }
        Op::StraightThrough => sink(0, g.to_vec()),
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ── spec-level op dispatcher ───────────────────────────────────────────

/// The public op vocabulary, dispatched by [`forward_op`].
#[derive(Debug, Clone)]
pub enum OpKind {
    Matmul,
    Conv2d { stride: usize },
    Add,
    Mul,
    Relu,
    Softmax,
    LayerNorm { eps: f64 },
    EmbedLookup,
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    Mean,
    Sum,
    CrossEntropy,
    Bce,
    L1,
}

fn want(inputs: &[&Tensor], n: usize, op: &'static str) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::invalid(format!("{}: expected {} inputs, got {}", op, n, inputs.len())));
    }
    Ok(())
}

fn as_ids(t: &Tensor, op: &'static str) -> Result<Vec<u32>> {
    t.values()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::invalid(format!("{}: non-integral index {}", op, v)))
            }
        })
        .collect()
}

/// Uniform entry point over the op vocabulary; the typed methods on
/// [`Tensor`] are the idiomatic path.
pub fn forward_op(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind {
        OpKind::Matmul => {
            want(inputs, 2, "matmul")?;
            inputs[0].matmul(inputs[1])
        }
        OpKind::Conv2d { stride } => {
            want(inputs, 3, "conv2d")?;
            inputs[0].conv2d(inputs[1], inputs[2], *stride)
        }
        OpKind::Add => {
            want(inputs, 2, "add")?;
            inputs[0].add(inputs[1])
        }
        OpKind::Mul => {
            want(inputs, 2, "mul")?;
            inputs[0].mul(inputs[1])
        }
        OpKind::Relu => {
            want(inputs, 1, "relu")?;
            Ok(inputs[0].relu())
        }
        OpKind::Softmax => {
            want(inputs, 1, "softmax")?;
            inputs[0].softmax()
        }
        OpKind::LayerNorm { eps } => {
            want(inputs, 3, "layernorm")?;
            inputs[0].layer_norm(inputs[1], inputs[2], *eps)
        }
        OpKind::EmbedLookup => {
            want(inputs, 2, "embed-lookup")?;
            inputs[0].embed(&as_ids(inputs[1], "embed-lookup")?)
        }
        OpKind::Slice { axis, start, len } => {
            want(inputs, 1, "slice")?;
            inputs[0].slice(*axis, *start, *len)
        }
        OpKind::Concat { axis } => Tensor::concat(inputs, *axis),
        OpKind::Mean => {
            want(inputs, 1, "mean")?;
            Ok(inputs[0].mean())
        }
        OpKind::Sum => {
            want(inputs, 1, "sum")?;
            Ok(inputs[0].sum())
        }
        OpKind::CrossEntropy => {
            want(inputs, 2, "cross_entropy")?;
            inputs[0].cross_entropy(&as_ids(inputs[1], "cross_entropy")?)
        }
        OpKind::Bce => {
            want(inputs, 2, "bce")?;
            inputs[0].bce(inputs[1])
        }
        OpKind::L1 => {
            want(inputs, 2, "l1")?;
            inputs[0].l1(inputs[1])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "index {}: {} vs {}", i, x, y);
        }
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert_close(x.softmax().unwrap().values(), &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut vals = Vec::new();
        for i in 0..60 {
            vals.push(((i * 2654435761_usize) % 1009) as f64 / 100.0 - 5.0);
        }
        let x = Tensor::from_vec(&[5, 12], vals).unwrap();
        let s = x.softmax().unwrap();
        for row in s.values().chunks(12) {
            assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "row sum {sum}");
        }
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(x.relu().values(), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_ones() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![1.0; 6]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().values(), &[3.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn backward_sum_is_ones() {
        let x = Tensor::var(&[3], vec![1.0, -2.0, 5.0]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_mean_square() {
        // d/dx mean(x*x) = 2x/n; x = [1, 2] -> [1, 2]
        let x = Tensor::var(&[2], vec![1.0, 2.0]).unwrap();
        x.mul(&x).unwrap().mean().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = Tensor::var(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            x.relu().backward(),
            Err(Error::NonScalarRoot(2))
        ));
    }

    #[test]
    fn backward_twice_doubles() {
        let x = Tensor::var(&[3], vec![0.5, 1.5, -0.5]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn grads_accumulate_across_paths() {
        // y = x + x -> dy/dx = 2
        let x = Tensor::var(&[1], vec![3.0]).unwrap();
        x.add(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn ops_are_deterministic() {
        let vals: Vec<f64> = (0..4096).map(|i| ((i * 2654435761_usize) % 997) as f64 / 997.0 - 0.5).collect();
        let a = Tensor::from_vec(&[64, 64], vals.clone()).unwrap();
        let b = Tensor::from_vec(&[64, 64], vals).unwrap();
        let c1 = a.matmul(&b).unwrap();
        let c2 = a.matmul(&b).unwrap();
        let bits1: Vec<u64> = c1.values().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = c2.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn broadcast_bias_add() {
        let x = Tensor::var(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::var(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.values(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        y.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_concat_inverse() {
        let x = Tensor::from_vec(&[2, 4], (0..8).map(|v| v as f64).collect()).unwrap();
        let a = x.slice(1, 0, 2).unwrap();
        let b = x.slice(1, 2, 2).unwrap();
        let back = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(back.values(), x.values());
    }

    #[test]
    fn embed_rows_and_scatter() {
        let table = Tensor::var(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = table.embed(&[2, 0, 2]).unwrap();
        assert_eq!(out.values(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        out.sum().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let table = Tensor::var(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(table.embed(&[3]).is_err());
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let logits = Tensor::var(&[1, 3], vec![2.0, 1.0, 0.1]).unwrap();
        let loss = logits.cross_entropy(&[0]).unwrap();
        let lse = (2.0f64.exp() + 1.0f64.exp() + 0.1f64.exp()).ln();
        assert!((loss.values()[0] - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_finite() {
        let z = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        let y = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert!(matches!(z.bce(&y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn straight_through_gradient_identity() {
        let x = Tensor::var(&[3], vec![0.2, 0.4, 0.6]).unwrap();
        let q = x.straight_through(vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(q.values(), &[0.0, 0.5, 1.0]);
        let w = Tensor::from_vec(&[3], vec![3.0, -1.0, 2.0]).unwrap();
        q.mul(&w).unwrap().sum().backward().unwrap();
        let gx = x.grad().unwrap();
        let gq = q.grad().unwrap();
        assert_eq!(gx.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   gq.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn forward_op_dispatch_covers_vocabulary() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            forward_op(&OpKind::Matmul, &[&a, &b]).unwrap().values(),
            a.values()
        );
        assert_eq!(
            forward_op(&OpKind::Relu, &[&a]).unwrap().values(),
            &[1.0, 0.0, 0.5, 2.0]
        );
        let ids = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let emb = forward_op(&OpKind::EmbedLookup, &[&b, &ids]).unwrap();
        assert_eq!(emb.values(), &[0.0, 1.0, 1.0, 0.0]);
        let s = forward_op(&OpKind::Sum, &[&a]).unwrap();
        assert_eq!(s.item(), 2.5);
    }
}
