//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`] holding the
//! forward value and whatever the backward rule needs. Node ids grow
//! monotonically, so walking the tape in reverse id order is a valid
//! reverse topological order and each node is visited exactly once.
//!
//! ```
//! use tempora_core::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().trainable());
//! let loss = x.mul(x).unwrap().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_layout, gemm_nn, gemm_nt, gemm_tn_acc, Real, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, T),
    Softmax {
        x: usize,
        layout: (usize, usize, usize),
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Relu(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reduce {
        x: usize,
        layout: (usize, usize, usize),
        mean: bool,
    },
    SumAll(usize),
    Reshape(usize),
    Narrow {
        x: usize,
        layout: (usize, usize, usize),
        start: usize,
    },
    GatherRows {
        x: usize,
        ids: Vec<usize>,
    },
    ScatterRows {
        x: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Counts of structural events recorded while building a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    pub self_attention_calls: usize,
    pub cross_attention_calls: usize,
    /// Token-expert evaluations performed by mixture-of-experts layers.
    pub expert_invocations: usize,
}

/// Records operations for one forward pass and replays them backwards.
///
/// A tape and the vars borrowed from it stay on one thread.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Vec<T>>>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    stats: Cell<TapeStats>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            params: RefCell::new(HashMap::new()),
            stats: Cell::new(TapeStats::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> TapeStats {
        self.stats.get()
    }

    pub fn record(&self, f: impl FnOnce(&mut TapeStats)) {
        let mut s = self.stats.get();
        f(&mut s);
        self.stats.set(s);
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Adds a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let rg = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, rg)
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn node_shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Clears gradients from a previous backward so it may run again.
    pub fn zero_grad(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// A differentiable var the loss does not depend on gets zeros; a
    /// constant gets `None`.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let grads = grads.as_ref()?;
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        if !node.requires_grad {
            return None;
        }
        let data = grads[v.id]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
        Some(Tensor::new(&node.shape, data).expect("grad shape"))
    }

    /// Gradients of every parameter leaf on this tape, ordered by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        let grads = self.grads.borrow();
        let Some(grads) = grads.as_ref() else {
            return Vec::new();
        };
        let nodes = self.nodes.borrow();
        let mut out: Vec<(ParamId, Vec<T>)> = self
            .params
            .borrow()
            .iter()
            .map(|(&pid, &node)| {
                let g = grads[node]
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); nodes[node].value.len()]);
                (pid, g)
            })
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    /// Adds this tape's parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (pid, g) in self.param_grads() {
            store.get_mut(pid).accumulate_grad(&g)?;
        }
        Ok(())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node_shape(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Borrow of the forward value.
    pub fn data(&self) -> Ref<'t, [T]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape")
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    pub fn matmul(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.tape.nodes.borrow();
            gemm_nn(&nodes[self.id].value, &nodes[rhs.id].value, &mut out, m, k, n);
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(vec![m, n], out, Op::MatMul(self.id, rhs.id), rg))
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.tape.nodes.borrow();
            gemm_nt(&nodes[self.id].value, &nodes[rhs.id].value, &mut out, m, k, n);
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(vec![m, n], out, Op::MatMulNt(self.id, rhs.id), rg))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "transpose needs rank 2".into(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let out = {
            let d = self.data();
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            out
        };
        Ok(self.unary(vec![n, m], out, Op::Transpose(self.id)))
    }

    fn binary(
        &self,
        rhs: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        mk: impl FnOnce(usize, usize, Broadcast) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        let bc = Broadcast::new(&sa, &sb).ok_or(Error::Shape {
            op: name,
            lhs: sa,
            rhs: sb,
        })?;
        let mut out = vec![T::zero(); bc.numel()];
        {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            bc.for_each(|o, i, j| out[o] = f(a[i], b[j]));
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(bc.out.clone(), out, mk(self.id, rhs.id, bc), rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let out = self.data().iter().map(|&v| v * c).collect();
        self.unary(self.shape(), out, Op::Scale(self.id, c))
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("softmax axis {axis} out of range"),
            });
        }
        let layout = axis_layout(&s, axis);
        let out = softmax_forward(&self.data(), layout);
        Ok(self.unary(s, out, Op::Softmax { x: self.id, layout }))
    }

    pub fn softmax_last(&self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        self.softmax(r - 1)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let s = self.shape();
        let n = *s.last().unwrap();
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: s,
                rhs: gamma.shape(),
            });
        }
        let rows = self.data().len() / n;
        let eps = T::of(LAYER_NORM_EPS);
        let mut out = vec![T::zero(); rows * n];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (
                &nodes[self.id].value,
                &nodes[gamma.id].value,
                &nodes[beta.id].value,
            );
            let nf = T::of(n as f64);
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let rstd = T::one() / (var + eps).sqrt();
                for j in 0..n {
                    out[r * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            s,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, T> {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        let out = self
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()))
            .collect();
        self.unary(self.shape(), out, Op::Gelu(self.id))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let out = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.unary(self.shape(), out, Op::Relu(self.id))
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "embedding needs a [V, d] table and at least one id".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::TargetOutOfRange {
                id: bad,
                position: ids.iter().position(|&i| i == bad).unwrap(),
                vocab: s[0],
            });
        }
        let d = s[1];
        let out = {
            let table = self.data();
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&table[i * d..(i + 1) * d]);
            }
            out
        };
        Ok(self.unary(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let s = self.shape();
        if ids.is_empty() || ids.iter().any(|&i| i >= s[0]) {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("gather_rows with ids {ids:?}"),
            });
        }
        let w = self.data().len() / s[0];
        let out = {
            let x = self.data();
            let mut out = Vec::with_capacity(ids.len() * w);
            for &i in ids {
                out.extend_from_slice(&x[i * w..(i + 1) * w]);
            }
            out
        };
        let mut shape = s;
        shape[0] = ids.len();
        Ok(self.unary(
            shape,
            out,
            Op::GatherRows {
                x: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Places row `i` of `self` at row `ids[i]` of a zero tensor with `rows` rows.
    /// `ids` must be distinct.
    pub fn scatter_rows(&self, ids: &[usize], rows: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        let mut seen = vec![false; rows];
        for &i in ids {
            if i >= rows || seen[i] {
                return Err(Error::InvalidShape {
                    shape: s,
                    reason: format!("scatter_rows ids {ids:?} into {rows} rows"),
                });
            }
            seen[i] = true;
        }
        if ids.len() != s[0] {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: s,
                rhs: vec![ids.len()],
            });
        }
        let w = self.data().len() / s[0];
        let mut out = vec![T::zero(); rows * w];
        {
            let x = self.data();
            for (r, &i) in ids.iter().enumerate() {
                out[i * w..(i + 1) * w].copy_from_slice(&x[r * w..(r + 1) * w]);
            }
        }
        let mut shape = s;
        shape[0] = rows;
        Ok(self.unary(
            shape,
            out,
            Op::ScatterRows {
                x: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let tape = first.tape;
        let s0 = first.shape();
        if axis >= s0.len() {
            return Err(Error::InvalidShape {
                shape: s0,
                reason: format!("concat axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for p in parts {
            first.same_tape(p);
            let s = p.shape();
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: s0,
                    rhs: s,
                });
            }
            total += s[axis];
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let nodes = tape.nodes.borrow();
            for o in 0..outer {
                for p in parts {
                    let n = &nodes[p.id];
                    let chunk = n.shape[axis] * inner;
                    out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                }
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            shape,
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        ))
    }

    fn reduce(&self, axis: usize, mean: bool) -> Result<Var<'t, T>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("reduce axis {axis} out of range"),
            });
        }
        let layout @ (outer, n, inner) = axis_layout(&s, axis);
        let mut out = vec![T::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..n {
                    let src = &x[(o * n + i) * inner..(o * n + i + 1) * inner];
                    for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        if mean {
            let nf = T::of(n as f64);
            out.iter_mut().for_each(|v| *v /= nf);
        }
        let mut shape: Vec<usize> = s
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.unary(
            shape,
            out,
            Op::Reduce {
                x: self.id,
                layout,
                mean,
            },
        ))
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce(axis, true)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        self.reduce(axis, false)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let total = self.data().iter().copied().sum();
        self.unary(vec![1], vec![total], Op::SumAll(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let s = self.shape();
        if shape.iter().product::<usize>() != s.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: s,
                rhs: shape.to_vec(),
            });
        }
        let out = self.data().to_vec();
        Ok(self.unary(shape.to_vec(), out, Op::Reshape(self.id)))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("narrow(axis={axis}, start={start}, len={len})"),
            });
        }
        let layout @ (outer, n, inner) = axis_layout(&s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.unary(
            shape,
            out,
            Op::Narrow {
                x: self.id,
                layout,
                start,
            },
        ))
    }

    /// Mean token cross-entropy of `[T, V]` logits against `targets`;
    /// `None` positions are masked out.
    pub fn cross_entropy(&self, targets: &[Option<usize>]) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let v = s[1];
        for (position, t) in targets.iter().enumerate() {
            if let Some(id) = *t {
                if id >= v {
                    return Err(Error::TargetOutOfRange {
                        id,
                        position,
                        vocab: v,
                    });
                }
            }
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "cross_entropy with every position masked".into(),
            });
        }
        let probs = softmax_forward(&self.data(), (s[0], v, 1));
        let mut loss = T::zero();
        {
            let x = self.data();
            for (r, t) in targets.iter().enumerate() {
                if let Some(id) = *t {
                    let row = &x[r * v..(r + 1) * v];
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
                    loss += lse - row[id];
                }
            }
        }
        loss /= T::of(count as f64);
        Ok(self.unary(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }
}

fn softmax_forward<T: Real>(x: &[T], (outer, n, inner): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..n {
                max = max.max(x[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..n {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..n {
                out[at(k)] /= sum;
            }
        }
    }
    out
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize, f: impl FnOnce(&mut [T])) {
    let g = grads[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let rg = |id: usize| nodes[id].requires_grad;
    let len = |id: usize| nodes[id].value.len();
    match &node.op {
        Op::Leaf | Op::Param => {}
        &Op::MatMul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            if rg(a) {
                let mut tmp = vec![T::zero(); m * k];
                gemm_nt(g, &nodes[b].value, &mut tmp, m, n, k);
                acc(grads, a, m * k, |ga| ga.iter_mut().zip(&tmp).for_each(|(x, &y)| *x += y));
            }
            if rg(b) {
                acc(grads, b, k * n, |gb| gemm_tn_acc(&nodes[a].value, g, gb, m, k, n));
            }
        }
        &Op::MatMulNt(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[0];
            if rg(a) {
                let mut tmp = vec![T::zero(); m * k];
                gemm_nn(g, &nodes[b].value, &mut tmp, m, n, k);
                acc(grads, a, m * k, |ga| ga.iter_mut().zip(&tmp).for_each(|(x, &y)| *x += y));
            }
            if rg(b) {
                acc(grads, b, n * k, |gb| gemm_tn_acc(g, &nodes[a].value, gb, m, n, k));
            }
        }
        &Op::Transpose(a) => {
            let (m, n) = (nodes[a].shape[0], nodes[a].shape[1]);
            acc(grads, a, m * n, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            let (a, b) = (*a, *b);
            if rg(a) {
                acc(grads, a, len(a), |ga| bc.for_each(|o, i, _| ga[i] += g[o]));
            }
            if rg(b) {
                acc(grads, b, len(b), |gb| bc.for_each(|o, _, j| gb[j] += sign * g[o]));
            }
        }
        &Op::Mul(a, b, ref bc) => {
            if rg(a) {
                let vb = &nodes[b].value;
                acc(grads, a, len(a), |ga| bc.for_each(|o, i, j| ga[i] += g[o] * vb[j]));
            }
            if rg(b) {
                let va = &nodes[a].value;
                acc(grads, b, len(b), |gb| bc.for_each(|o, i, j| gb[j] += g[o] * va[i]));
            }
        }
        &Op::Scale(a, c) => {
            acc(grads, a, len(a), |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y));
        }
        &Op::Softmax {
            x,
            layout: (outer, n, inner),
        } => {
            let y = &node.value;
            acc(grads, x, len(x), |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let s: T = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] += y[at(k)] * (g[at(k)] - s);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let n = *nodes[x].shape.last().unwrap();
            let rows = mean.len();
            let xv = &nodes[x].value;
            let gv = &nodes[gamma].value;
            let xhat = |r: usize, j: usize| (xv[r * n + j] - mean[r]) * rstd[r];
            if rg(gamma) {
                acc(grads, gamma, n, |gg| {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat(r, j);
                        }
                    }
                });
            }
            if rg(beta) {
                acc(grads, beta, n, |gb| {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                });
            }
            if rg(x) {
                let nf = T::of(n as f64);
                acc(grads, x, rows * n, |gx| {
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            m1 += d;
                            m2 += d * xhat(r, j);
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            gx[r * n + j] += rstd[r] * (d - m1 - xhat(r, j) * m2);
                        }
                    }
                });
            }
        }
        &Op::Gelu(x) => {
            let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
            let xv = &nodes[x].value;
            acc(grads, x, len(x), |gx| {
                for (k, &v) in xv.iter().enumerate() {
                    let t = (c * (v + a * v * v * v)).tanh();
                    let du = c * (T::one() + T::of(3.0) * a * v * v);
                    let d = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                    gx[k] += g[k] * d;
                }
            });
        }
        &Op::Relu(x) => {
            let xv = &nodes[x].value;
            acc(grads, x, len(x), |gx| {
                for (k, &v) in xv.iter().enumerate() {
                    if v > T::zero() {
                        gx[k] += g[k];
                    }
                }
            });
        }
        Op::Embedding { table, ids } | Op::GatherRows { x: table, ids } => {
            let table = *table;
            let w = len(table) / nodes[table].shape[0];
            acc(grads, table, len(table), |gt| {
                for (r, &i) in ids.iter().enumerate() {
                    for (d, &v) in gt[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                        *d += v;
                    }
                }
            });
        }
        Op::ScatterRows { x, ids } => {
            let x = *x;
            let w = len(x) / nodes[x].shape[0];
            acc(grads, x, len(x), |gx| {
                for (r, &i) in ids.iter().enumerate() {
                    for (d, &v) in gx[r * w..(r + 1) * w].iter_mut().zip(&g[i * w..(i + 1) * w]) {
                        *d += v;
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_layout(&node.shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].shape[*axis];
                if rg(p) {
                    acc(grads, p, len(p), |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (d, &v) in gp[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    });
                }
                offset += n;
            }
        }
        &Op::Reduce {
            x,
            layout: (outer, n, inner),
            mean,
        } => {
            let scale = if mean {
                T::one() / T::of(n as f64)
            } else {
                T::one()
            };
            acc(grads, x, len(x), |gx| {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for i in 0..n {
                        let dst = &mut gx[(o * n + i) * inner..(o * n + i + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v * scale;
                        }
                    }
                }
            });
        }
        &Op::SumAll(x) => {
            acc(grads, x, len(x), |gx| gx.iter_mut().for_each(|d| *d += g[0]));
        }
        &Op::Reshape(x) => {
            acc(grads, x, len(x), |gx| gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v));
        }
        &Op::Narrow {
            x,
            layout: (outer, n, inner),
            start,
        } => {
            let l = node.shape.iter().product::<usize>() / (outer * inner);
            acc(grads, x, len(x), |gx| {
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    let src = &g[o * l * inner..(o + 1) * l * inner];
                    for (d, &v) in gx[base..base + l * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let logits = *logits;
            let v = nodes[logits].shape[1];
            let count = targets.iter().filter(|t| t.is_some()).count();
            let scale = g[0] / T::of(count as f64);
            acc(grads, logits, len(logits), |gl| {
                for (r, t) in targets.iter().enumerate() {
                    if let Some(id) = *t {
                        for j in 0..v {
                            let onehot = if j == id { T::one() } else { T::zero() };
                            gl[r * v + j] += (probs[r * v + j] - onehot) * scale;
                        }
                    }
                }
            });
        }
    }
}

/// Index mapping for numpy-style broadcasting of two operands.
#[derive(Clone, Debug)]
struct Broadcast {
    out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    kind: BroadcastKind,
}

#[derive(Clone, Copy, Debug)]
enum BroadcastKind {
    Same,
    /// `b` repeats with period `b.len()` over `a`.
    Suffix(usize),
    General,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out.push(x);
            } else if x == 1 {
                out.push(y);
            } else {
                return None;
            }
        }
        let strides = |p: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if p[i] == 1 { 0 } else { acc };
                acc *= p[i];
            }
            st
        };
        let kind = if a == b {
            BroadcastKind::Same
        } else if pa == out && b.len() <= a.len() && a[a.len() - b.len()..] == *b {
            BroadcastKind::Suffix(b.iter().product())
        } else {
            BroadcastKind::General
        };
        Some(Self {
            a_strides: strides(&pa),
            b_strides: strides(&pb),
            out,
            kind,
        })
    }

    fn numel(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let numel = self.numel();
        match self.kind {
            BroadcastKind::Same => (0..numel).for_each(|o| f(o, o, o)),
            BroadcastKind::Suffix(period) => (0..numel).for_each(|o| f(o, o, o % period)),
            BroadcastKind::General => {
                let rank = self.out.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for o in 0..numel {
                    f(o, ia, ib);
                    let mut d = rank;
                    while d > 0 {
                        d -= 1;
                        idx[d] += 1;
                        ia += self.a_strides[d];
                        ib += self.b_strides[d];
                        if idx[d] < self.out[d] {
                            break;
                        }
                        ia -= self.a_strides[d] * self.out[d];
                        ib -= self.b_strides[d] * self.out[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}
