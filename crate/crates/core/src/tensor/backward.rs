use super::graph::{clamp_prob, prob_floor, Graph, Node, Op, Var};
use super::kernels::{axpy, dot, matmul_at_acc, matmul_bt_acc, softmax_row_adjoint};
use super::{Real, Tensor};
use crate::error::{Error, Result};

impl<T: Real> Graph<T> {
    /// Replays adjoints from the scalar `loss` back to every node that
    /// requires a gradient. May be called once per recorded forward pass.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                propagate(&nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.nodes.borrow()[v.0].value.shape().to_vec();
        Tensor::new(shape, g.clone()).ok()
    }
}

fn slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

/// Accumulates `g` into the gradient of `b`, summing over any broadcast copies.
fn acc_broadcast<T: Real>(dst: &mut [T], g: &[T], f: impl Fn(usize) -> T) {
    let n = dst.len();
    if n == 0 {
        return;
    }
    for (i, &gv) in g.iter().enumerate() {
        dst[i % n] += gv * f(i);
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let out = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (da, db) = (val(*a), val(*b));
            if let Some(ga) = slot(grads, nodes, *a) {
                matmul_bt_acc(g, db, ga, *m, *n, *k);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                matmul_at_acc(da, g, gb, *m, *k, *n);
            }
        }
        Op::Transpose { x, r, c } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ii in 0..*r {
                    for j in 0..*c {
                        gx[ii * c + j] += g[j * r + ii];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                axpy(T::one(), g, ga);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                acc_broadcast(gb, g, |_| T::one());
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                axpy(T::one(), g, ga);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                acc_broadcast(gb, g, |_| -T::one());
            }
        }
        Op::Mul { a, b } => {
            let (da, db) = (val(*a), val(*b));
            let bn = db.len();
            if let Some(ga) = slot(grads, nodes, *a) {
                for (idx, gv) in ga.iter_mut().enumerate() {
                    *gv += g[idx] * db[idx % bn];
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                acc_broadcast(gb, g, |idx| da[idx]);
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                axpy(*c, g, gx);
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                axpy(T::one(), g, gx);
            }
        }
        Op::Tanh { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &y), &gv) in gx.iter_mut().zip(out).zip(g) {
                    *d += gv * (T::one() - y * y);
                }
            }
        }
        Op::Sigmoid { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &y), &gv) in gx.iter_mut().zip(out).zip(g) {
                    *d += gv * y * (T::one() - y);
                }
            }
        }
        Op::Relu { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &y), &gv) in gx.iter_mut().zip(out).zip(g) {
                    if y > T::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Softmax { x } => {
            let cols = node.value.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                if cols > 0 {
                    for ((p, dp), dx) in out
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                    {
                        softmax_row_adjoint(p, dp, dx);
                    }
                }
            }
        }
        Op::ConcatLast { xs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = node.value.rows();
            let mut offset = 0;
            for (x, &w) in xs.iter().zip(widths) {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for r in 0..rows {
                        axpy(
                            T::one(),
                            &g[r * total + offset..r * total + offset + w],
                            &mut gx[r * w..(r + 1) * w],
                        );
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows { xs } => {
            let mut offset = 0;
            for x in xs {
                let n = nodes[x.0].value.numel();
                if let Some(gx) = slot(grads, nodes, *x) {
                    axpy(T::one(), &g[offset..offset + n], gx);
                }
                offset += n;
            }
        }
        Op::MeanAxis {
            x,
            outer,
            len,
            inner,
        } => {
            let inv = T::one() / T::from_f64(*len as f64);
            if let Some(gx) = slot(grads, nodes, *x) {
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        axpy(inv, src, &mut gx[base..base + inner]);
                    }
                }
            }
        }
        Op::SumAll { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::GatherRows { table, ids, cols } => {
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    axpy(
                        T::one(),
                        &g[r * cols..(r + 1) * cols],
                        &mut gt[id * cols..(id + 1) * cols],
                    );
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = nodes[logits.0].value.cols();
            let scale = g[0] / T::from_f64(targets.len() as f64);
            if let Some(gl) = slot(grads, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut gl[r * v..(r + 1) * v];
                    axpy(scale, &probs[r * v..(r + 1) * v], row);
                    row[t] -= scale;
                }
            }
        }
        Op::Nll { probs, targets } => {
            let pv = val(*probs);
            let v = nodes[probs.0].value.cols();
            let scale = g[0] / T::from_f64(targets.len() as f64);
            if let Some(gp) = slot(grads, nodes, *probs) {
                for (r, &t) in targets.iter().enumerate() {
                    let p = pv[r * v + t];
                    // Below the clamp floor the loss is constant in p.
                    if p >= prob_floor() {
                        gp[r * v + t] -= scale / clamp_prob(p);
                    }
                }
            }
        }
        Op::ScatterCols { w, ids, vocab } => {
            let s = ids.len();
            if let Some(gw) = slot(grads, nodes, *w) {
                for (r, grow) in gw.chunks_mut(s.max(1)).enumerate().take(node.value.rows()) {
                    for (j, &id) in ids.iter().enumerate() {
                        grow[j] += g[r * vocab + id];
                    }
                }
            }
        }
        Op::GateMix { alpha, pq, pv } => {
            let (da, dq, dv) = (val(*alpha), val(*pq), val(*pv));
            let cols = node.value.cols();
            if let Some(ga) = slot(grads, nodes, *alpha) {
                for (r, gr) in ga.iter_mut().enumerate() {
                    let lo = r * cols;
                    let mut acc = T::zero();
                    for c in lo..lo + cols {
                        acc += g[c] * (dq[c] - dv[c]);
                    }
                    *gr += acc;
                }
            }
            if let Some(gq) = slot(grads, nodes, *pq) {
                for (c, d) in gq.iter_mut().enumerate() {
                    *d += g[c] * da[c / cols];
                }
            }
            if let Some(gv) = slot(grads, nodes, *pv) {
                for (c, d) in gv.iter_mut().enumerate() {
                    *d += g[c] * (T::one() - da[c / cols]);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            dk,
            dv,
            scale,
            weights,
        } => attention_adjoint(nodes, grads, g, (*q, *k, *v), *layout, *dk, *dv, *scale, weights),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_adjoint<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    (q, k, v): (Var, Var, Var),
    layout: super::AttnLayout,
    dk: usize,
    dv: usize,
    scale: T,
    weights: &[T],
) {
    let (groups, queries, keys, heads) = (layout.groups, layout.queries, layout.keys, layout.heads);
    if keys == 0 {
        return;
    }
    let (hk, hv) = (dk / heads, dv / heads);
    let (tq, tk, tv) = (
        nodes[q.0].value.data(),
        nodes[k.0].value.data(),
        nodes[v.0].value.data(),
    );
    let need_q = nodes[q.0].requires_grad;
    let need_k = nodes[k.0].requires_grad;
    let need_v = nodes[v.0].requires_grad;
    let mut gq = vec![T::zero(); if need_q { tq.len() } else { 0 }];
    let mut gk = vec![T::zero(); if need_k { tk.len() } else { 0 }];
    let mut gv = vec![T::zero(); if need_v { tv.len() } else { 0 }];
    let mut dp = vec![T::zero(); keys];
    let mut ds = vec![T::zero(); keys];
    for gi in 0..groups {
        for h in 0..heads {
            for i in 0..queries {
                let qi = gi * queries + i;
                let w_off = ((gi * heads + h) * queries + i) * keys;
                let w = &weights[w_off..w_off + keys];
                let go = &g[qi * dv + h * hv..qi * dv + (h + 1) * hv];
                for j in 0..keys {
                    let vj = gi * keys + j;
                    let v_row = &tv[vj * dv + h * hv..vj * dv + (h + 1) * hv];
                    dp[j] = dot(go, v_row);
                    if need_v && w[j] != T::zero() {
                        axpy(w[j], go, &mut gv[vj * dv + h * hv..vj * dv + (h + 1) * hv]);
                    }
                }
                ds.iter_mut().for_each(|d| *d = T::zero());
                softmax_row_adjoint(w, &dp, &mut ds);
                let q_row = &tq[qi * dk + h * hk..qi * dk + (h + 1) * hk];
                for (j, &dsj) in ds.iter().enumerate() {
                    if dsj == T::zero() {
                        continue;
                    }
                    let kj = gi * keys + j;
                    let c = dsj * scale;
                    if need_q {
                        axpy(
                            c,
                            &tk[kj * dk + h * hk..kj * dk + (h + 1) * hk],
                            &mut gq[qi * dk + h * hk..qi * dk + (h + 1) * hk],
                        );
                    }
                    if need_k {
                        axpy(c, q_row, &mut gk[kj * dk + h * hk..kj * dk + (h + 1) * hk]);
                    }
                }
            }
        }
    }
    for (var, local) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(dst) = slot(grads, nodes, var) {
            axpy(T::one(), &local, dst);
        }
    }
}
