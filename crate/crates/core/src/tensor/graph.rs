use std::cell::{Cell, Ref, RefCell};

use super::kernels::{axpy, dot, matmul_acc, softmax_row};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a grouped attention call.
///
/// Queries are `groups × queries` rows, keys and values are `groups × keys`
/// rows, and each query row only sees the keys of its own group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub groups: usize,
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
}

impl AttnLayout {
    pub fn single(queries: usize, keys: usize, heads: usize) -> Self {
        AttnLayout {
            groups: 1,
            queries,
            keys,
            heads,
        }
    }
}

pub(super) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        r: usize,
        c: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    ConcatLast {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    ConcatRows {
        xs: Vec<Var>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll {
        x: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Nll {
        probs: Var,
        targets: Vec<usize>,
    },
    ScatterCols {
        w: Var,
        ids: Vec<usize>,
        vocab: usize,
    },
    GateMix {
        alpha: Var,
        pq: Var,
        pv: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        dk: usize,
        dv: usize,
        scale: T,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::Transpose { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Tanh { x }
            | Op::Sigmoid { x }
            | Op::Relu { x }
            | Op::Softmax { x }
            | Op::MeanAxis { x, .. }
            | Op::SumAll { x }
            | Op::Reshape { x } => vec![*x],
            Op::ConcatLast { xs, .. } | Op::ConcatRows { xs } => xs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Nll { probs, .. } => vec![*probs],
            Op::ScatterCols { w, .. } => vec![*w],
            Op::GateMix { alpha, pq, pv } => vec![*alpha, *pq, *pv],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

pub(super) struct Node<T> {
    pub(super) value: Tensor<T>,
    pub(super) op: Op<T>,
    pub(super) requires_grad: bool,
}

/// Records executed operations so their adjoints can be replayed once.
///
/// A graph is built fresh for every forward pass. Calling
/// [`Graph::backward`] a second time without [`Graph::clear`] is rejected.
pub struct Graph<T: Real = f32> {
    pub(super) nodes: RefCell<Vec<Node<T>>>,
    pub(super) grads: RefCell<Vec<Option<Vec<T>>>>,
    pub(super) consumed: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node and gradient buffer.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.grads.borrow_mut().clear();
        self.consumed.set(false);
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Borrow of a recorded value. Drop it before recording further ops.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Attention probabilities saved by an [`Graph::attention`] node, laid out
    /// as `[groups, heads, queries, keys]`.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<T>> {
        match &self.nodes.borrow()[v.0].op {
            Op::Attention { weights, .. } => Some(weights.clone()),
            _ => None,
        }
    }

    /// Layout and saved probabilities of every attention node recorded so
    /// far, in recording order.
    pub fn attention_records(&self) -> Vec<(AttnLayout, Vec<T>)> {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { layout, weights, .. } => Some((*layout, weights.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::shape("matmul", ta.shape(), tb.shape()));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
            (Tensor::new(vec![m, n], out)?, m, k, n)
        };
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (value, r, c) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 {
                return Err(Error::shape("transpose", t.shape(), &[2]));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = t.data()[i * c + j];
                }
            }
            (Tensor::new(vec![c, r], out)?, r, c)
        };
        Ok(self.push(value, Op::Transpose { x, r, c }))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if !broadcastable(ta.shape(), tb.shape()) {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let bn = tb.numel();
        let data = if bn == 0 {
            Vec::new()
        } else {
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % bn]))
                .collect()
        };
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `a + b`; `b` may be broadcast over the leading dimensions of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let value = self.unary(x, |v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        let value = self.unary(x, |v| v + c);
        self.push(value, Op::AddScalar { x })
    }

    pub fn tanh(&self, x: Var) -> Var {
        let value = self.unary(x, |v| v.tanh());
        self.push(value, Op::Tanh { x })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let value = self.unary(x, sigmoid);
        self.push(value, Op::Sigmoid { x })
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = self.unary(x, |v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x })
    }

    /// Softmax over the last dimension.
    ///
    /// `mask` (true = keep) either covers every element or one row, in which
    /// case it is shared by all rows. Masked entries come out exactly zero and
    /// a row with nothing kept is all zeros.
    pub fn softmax(&self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let cols = t.cols();
            if let Some(m) = mask {
                if m.len() != t.numel() && m.len() != cols {
                    return Err(Error::shape("softmax mask", t.shape(), &[m.len()]));
                }
            }
            let mut data = t.data().to_vec();
            if cols > 0 {
                for (r, row) in data.chunks_mut(cols).enumerate() {
                    let keep = mask.map(|m| {
                        if m.len() == cols {
                            m
                        } else {
                            &m[r * cols..(r + 1) * cols]
                        }
                    });
                    softmax_row(row, keep);
                }
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Concatenation along the last dimension.
    pub fn concat_last(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Degenerate("concat of zero tensors".into()));
        }
        let (value, widths) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[xs[0].0].value;
            let lead = &first.shape()[..first.shape().len().saturating_sub(1)];
            let rows = first.rows();
            let mut widths = Vec::with_capacity(xs.len());
            for v in xs {
                let t = &nodes[v.0].value;
                let tl = &t.shape()[..t.shape().len().saturating_sub(1)];
                if tl != lead {
                    return Err(Error::shape("concat_last", first.shape(), t.shape()));
                }
                widths.push(t.cols());
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in xs {
                    data.extend_from_slice(nodes[v.0].value.row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (Tensor::new(shape, data)?, widths)
        };
        Ok(self.push(
            value,
            Op::ConcatLast {
                xs: xs.to_vec(),
                widths,
            },
        ))
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Degenerate("concat of zero tensors".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[xs[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for v in xs {
                let t = &nodes[v.0].value;
                if t.shape().len() != 2 || t.cols() != cols {
                    return Err(Error::shape(
                        "concat_rows",
                        nodes[xs[0].0].value.shape(),
                        t.shape(),
                    ));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        Ok(self.push(value, Op::ConcatRows { xs: xs.to_vec() }))
    }

    /// Arithmetic mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let (value, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if axis >= t.shape().len() {
                return Err(Error::shape("mean_axis", t.shape(), &[axis]));
            }
            let len = t.shape()[axis];
            if len == 0 {
                return Err(Error::Degenerate("mean over an empty axis".into()));
            }
            let outer: usize = t.shape()[..axis].iter().product();
            let inner: usize = t.shape()[axis + 1..].iter().product();
            let inv = T::one() / T::from_f64(len as f64);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    axpy(inv, src, &mut data[o * inner..(o + 1) * inner]);
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            (Tensor::new(shape, data)?, outer, len, inner)
        };
        Ok(self.push(
            value,
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            nodes[x.0].value.data().iter().copied().sum::<T>()
        };
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Row gather: `out[i] = table[ids[i]]`. The adjoint scatter-adds.
    ///
    /// This is the embedding lookup when `table` is a word-embedding matrix.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (value, cols) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.shape().len() != 2 {
                return Err(Error::shape("gather_rows", t.shape(), &[2]));
            }
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(Error::OutOfVocab { id, vocab: rows });
                }
                data.extend_from_slice(t.row(id));
            }
            (Tensor::new(vec![ids.len(), cols], data)?, cols)
        };
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
                cols,
            },
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.tensor(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            check_targets("cross_entropy", t, targets)?;
            let v = t.cols();
            let mut probs = t.data().to_vec();
            let mut loss = T::zero();
            for (r, row) in probs.chunks_mut(v).enumerate() {
                softmax_row(row, None);
                let raw = t.row(r);
                let max = raw.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + raw.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
                loss += lse - raw[targets[r]];
            }
            (loss / T::from_f64(targets.len() as f64), probs)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of `−log probs[target]` for rows that are already
    /// probability vectors.
    pub fn nll(&self, probs: Var, targets: &[usize]) -> Result<Var> {
        let loss = {
            let nodes = self.nodes.borrow();
            let t = &nodes[probs.0].value;
            check_targets("nll", t, targets)?;
            let mut loss = T::zero();
            for (r, &tgt) in targets.iter().enumerate() {
                loss -= clamp_prob(t.row(r)[tgt]).ln();
            }
            loss / T::from_f64(targets.len() as f64)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Scatter-adds the columns of `w: L×S` onto vocabulary ids, giving `L×vocab`.
    pub fn scatter_cols(&self, w: Var, ids: &[usize], vocab: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[w.0].value;
            if t.shape().len() != 2 || t.cols() != ids.len() {
                return Err(Error::shape("scatter_cols", t.shape(), &[ids.len()]));
            }
            if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
                return Err(Error::OutOfVocab { id, vocab });
            }
            let rows = t.rows();
            let mut data = vec![T::zero(); rows * vocab];
            for r in 0..rows {
                for (s, &id) in ids.iter().enumerate() {
                    data[r * vocab + id] += t.row(r)[s];
                }
            }
            Tensor::new(vec![rows, vocab], data)?
        };
        Ok(self.push(
            value,
            Op::ScatterCols {
                w,
                ids: ids.to_vec(),
                vocab,
            },
        ))
    }

    /// Row-wise convex mixture `alpha · pq + (1 − alpha) · pv` with `alpha: L×1`.
    pub fn gate_mix(&self, alpha: Var, pq: Var, pv: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tq, tv) = (&nodes[alpha.0].value, &nodes[pq.0].value, &nodes[pv.0].value);
            if tq.shape() != tv.shape() || tq.shape().len() != 2 {
                return Err(Error::shape("gate_mix", tq.shape(), tv.shape()));
            }
            if ta.numel() != tq.rows() {
                return Err(Error::shape("gate_mix alpha", ta.shape(), tq.shape()));
            }
            // NaN passes through so training reports it as a non-finite loss.
            if let Some(a) = ta.data().iter().find(|&&a| a < T::zero() || a > T::one()) {
                return Err(Error::Contract(format!("mixture gate {a} outside [0, 1]")));
            }
            let cols = tq.cols();
            let data = tq
                .data()
                .iter()
                .zip(tv.data())
                .enumerate()
                .map(|(i, (&q, &v))| {
                    let a = ta.data()[i / cols];
                    a * q + (T::one() - a) * v
                })
                .collect();
            Tensor::new(tq.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::GateMix { alpha, pq, pv }))
    }

    /// Grouped multi-head scaled dot-product attention on projected inputs.
    ///
    /// `q: (G·m)×dk`, `k: (G·M)×dk`, `v: (G·M)×dv`. Each head uses a slice of
    /// `dk/heads` query/key columns, scaled by `1/√(dk/heads)`, and writes its
    /// slice of `dv/heads` output columns. `mask` (true = attend) has
    /// `G·m·M` entries; a query row with every key masked, or a group with no
    /// keys at all, produces zeros.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let AttnLayout {
            groups,
            queries,
            keys,
            heads,
        } = layout;
        let (value, dk, dv, scale, weights) = {
            let nodes = self.nodes.borrow();
            let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let dk = tq.cols();
            let dv = tv.cols();
            if heads == 0
                || tq.shape().len() != 2
                || tk.shape().len() != 2
                || tv.shape().len() != 2
                || tq.rows() != groups * queries
                || tk.rows() != groups * keys
                || tv.rows() != groups * keys
                || (keys > 0 && tk.cols() != dk)
                || dk % heads != 0
                || dv % heads != 0
            {
                return Err(Error::shape("attention", tq.shape(), tk.shape()));
            }
            if let Some(m) = mask {
                if m.len() != groups * queries * keys {
                    return Err(Error::shape(
                        "attention mask",
                        &[groups, queries, keys],
                        &[m.len()],
                    ));
                }
            }
            let (hk, hv) = (dk / heads, dv / heads);
            let scale = T::one() / T::from_f64(hk as f64).sqrt();
            let mut out = vec![T::zero(); groups * queries * dv];
            let mut weights = vec![T::zero(); groups * heads * queries * keys];
            if keys > 0 {
                for g in 0..groups {
                    for h in 0..heads {
                        for i in 0..queries {
                            let qi = g * queries + i;
                            let q_row = &tq.data()[qi * dk + h * hk..qi * dk + (h + 1) * hk];
                            let w_off = ((g * heads + h) * queries + i) * keys;
                            let w = &mut weights[w_off..w_off + keys];
                            for (j, wj) in w.iter_mut().enumerate() {
                                let kj = g * keys + j;
                                *wj = dot(q_row, &tk.data()[kj * dk + h * hk..kj * dk + (h + 1) * hk])
                                    * scale;
                            }
                            softmax_row(w, mask.map(|m| &m[qi * keys..(qi + 1) * keys]));
                            let o = &mut out[qi * dv + h * hv..qi * dv + (h + 1) * hv];
                            for (j, &wj) in w.iter().enumerate() {
                                if wj != T::zero() {
                                    let vj = g * keys + j;
                                    axpy(wj, &tv.data()[vj * dv + h * hv..vj * dv + (h + 1) * hv], o);
                                }
                            }
                        }
                    }
                }
            }
            (
                Tensor::new(vec![groups * queries, dv], out)?,
                dk,
                dv,
                scale,
                weights,
            )
        };
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                dk,
                dv,
                scale,
                weights,
            },
        ))
    }
}

pub(super) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Probabilities below this floor are clamped before taking logs.
pub(super) fn prob_floor<T: Real>() -> T {
    T::from_f64(1e-30).max(T::min_positive_value())
}

pub(super) fn clamp_prob<T: Real>(p: T) -> T {
    p.max(prob_floor())
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn check_targets<T: Real>(op: &'static str, t: &Tensor<T>, targets: &[usize]) -> Result<()> {
    if t.shape().len() != 2 || t.rows() != targets.len() {
        return Err(Error::shape(op, t.shape(), &[targets.len()]));
    }
    if targets.is_empty() {
        return Err(Error::Degenerate(format!("{op} over zero positions")));
    }
    if let Some(&id) = targets.iter().find(|&&id| id >= t.cols()) {
        return Err(Error::OutOfVocab {
            id,
            vocab: t.cols(),
        });
    }
    Ok(())
}
