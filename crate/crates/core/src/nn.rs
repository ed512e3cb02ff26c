//! Parametric building blocks: parameter storage, linear projections,
//! multi-head and stacked attention, and the GRU cell.
//!
//! Blocks only hold [`ParamId`]s. Values live in a [`ParamStore`] and are
//! bound onto a fresh tape by a [`Session`] for every forward pass, so the
//! same block can run in `f32` for training and `f64` for gradient checks.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Deref;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::GradCheckReport;
use crate::tensor::{AttnLayout, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name} registered twice"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Xavier-uniform initialized `rows × cols` matrix.
    pub fn xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::from_f64(rng.random_range(-a..a)))
            .collect();
        self.add(name, Tensor::new(vec![rows, cols], data).expect("shape"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every tensor's values, keeping names and shapes.
    pub fn load_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::shape(
                "load_values",
                &[self.tensors.len()],
                &[values.len()],
            ));
        }
        for (dst, src) in self.tensors.iter().zip(&values) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("load_values", dst.shape(), src.shape()));
            }
        }
        self.tensors = values;
        Ok(())
    }
}

/// One forward pass: a tape plus lazily bound parameter leaves.
///
/// Dereferences to the underlying [`Graph`], so ops are called directly on
/// the session.
pub struct Session<'p, T: Real = f32> {
    graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: bool,
}

impl<'p, T: Real> Session<'p, T> {
    /// Session whose parameters receive gradients.
    pub fn train(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, true)
    }

    /// Session that records no parameter gradients.
    pub fn infer(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'p ParamStore<T>, trainable: bool) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bound: RefCell::new(vec![None; params.len()]),
            trainable,
        }
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    /// Leaf for parameter `id`, created on first use.
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self
            .graph
            .leaf(self.params.get(id).clone(), self.trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients after `backward`; unused parameters get zeros.
    pub fn param_grads(&self) -> Vec<Tensor<T>> {
        let bound = self.bound.borrow();
        self.params
            .tensors()
            .iter()
            .zip(bound.iter())
            .map(|(t, v)| {
                v.and_then(|v| self.graph.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

impl<T: Real> Deref for Session<'_, T> {
    type Target = Graph<T>;

    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

/// `Linear(x) = x·W (+ b)` over the last dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.xavier(format!("{name}.w"), d_in, d_out, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, s: &Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.shape(x);
        if shape.last() != Some(&self.d_in) {
            return Err(Error::shape("linear", &shape, &[self.d_in, self.d_out]));
        }
        let flat = if shape.len() == 2 {
            x
        } else {
            s.reshape(x, &[shape.iter().rev().skip(1).product(), self.d_in])?
        };
        let mut y = s.matmul(flat, s.p(self.w))?;
        if let Some(b) = self.b {
            y = s.add(y, s.p(b))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().expect("rank") = self.d_out;
            s.reshape(y, &out)
        }
    }
}

/// Keys and values already multiplied by a block's `W_k`, `W_v`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedKv {
    pub k: Var,
    pub v: Var,
}

/// Multi-head scaled dot-product attention with output merge.
///
/// `W_q, W_k, W_v` hold all heads side by side (`d × d`); head outputs are
/// concatenated and merged back to `d` by `W_o`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub d: usize,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            wq: store.xavier(format!("{name}.wq"), d, d, rng),
            wk: store.xavier(format!("{name}.wk"), d, d, rng),
            wv: store.xavier(format!("{name}.wv"), d, d, rng),
            wo: store.xavier(format!("{name}.wo"), d, d, rng),
            d,
            heads,
        })
    }

    pub fn project_kv<T: Real>(&self, s: &Session<'_, T>, kv: Var) -> Result<ProjectedKv> {
        Ok(ProjectedKv {
            k: s.matmul(kv, s.p(self.wk))?,
            v: s.matmul(kv, s.p(self.wv))?,
        })
    }

    pub fn project_q<T: Real>(&self, s: &Session<'_, T>, q: Var) -> Result<Var> {
        s.matmul(q, s.p(self.wq))
    }

    pub fn merge<T: Real>(&self, s: &Session<'_, T>, heads_out: Var) -> Result<Var> {
        s.matmul(heads_out, s.p(self.wo))
    }

    /// Attention of already-projected queries over projected keys, before the
    /// output merge. Lets callers average over queries before merging.
    pub fn core<T: Real>(
        &self,
        s: &Session<'_, T>,
        q_proj: Var,
        kv: ProjectedKv,
        layout: AttnLayout,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        s.attention(
            q_proj,
            kv.k,
            kv.v,
            AttnLayout {
                heads: self.heads,
                ..layout
            },
            mask,
        )
    }

    /// Full attention of raw queries over projected keys and values.
    pub fn attend_projected<T: Real>(
        &self,
        s: &Session<'_, T>,
        q: Var,
        kv: ProjectedKv,
        layout: AttnLayout,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let qp = self.project_q(s, q)?;
        let heads = self.core(s, qp, kv, layout, mask)?;
        self.merge(s, heads)
    }

    /// `Attn(q, K, V)` for query rows `q: m×d` against one key set `M×d`.
    pub fn attend<T: Real>(
        &self,
        s: &Session<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let m = s.shape(q)[0];
        let keys = s.shape(k)[0];
        let kp = s.matmul(k, s.p(self.wk))?;
        let vp = s.matmul(v, s.p(self.wv))?;
        self.attend_projected(
            s,
            q,
            ProjectedKv { k: kp, v: vp },
            AttnLayout::single(m, keys, self.heads),
            mask,
        )
    }
}

/// A stack of attention layers applied to an evolving query:
/// `q⁽ˡ⁾ = attend_l(q⁽ˡ⁻¹⁾, K, V) + q⁽ˡ⁻¹⁾`.
#[derive(Clone, Debug)]
pub struct StackedAttention {
    pub layers: Vec<Attention>,
    pub residual: bool,
}

impl StackedAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("attention stack depth must be ≥ 1".into()));
        }
        let layers = (0..depth)
            .map(|l| Attention::new(store, &format!("{name}.{l}"), d, heads, rng))
            .collect::<Result<_>>()?;
        Ok(StackedAttention {
            layers,
            residual: true,
        })
    }

    /// Per-layer key/value projections of one key set, for reuse.
    pub fn project<T: Real>(&self, s: &Session<'_, T>, kv: Var) -> Result<Vec<ProjectedKv>> {
        self.layers.iter().map(|l| l.project_kv(s, kv)).collect()
    }

    pub fn forward_projected<T: Real>(
        &self,
        s: &Session<'_, T>,
        q: Var,
        kvs: &[ProjectedKv],
        layout: AttnLayout,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let mut q = q;
        for (layer, kv) in self.layers.iter().zip(kvs) {
            let a = layer.attend_projected(s, q, *kv, layout, mask)?;
            q = if self.residual { s.add(a, q)? } else { a };
        }
        Ok(q)
    }

    pub fn forward<T: Real>(
        &self,
        s: &Session<'_, T>,
        q: Var,
        kv: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let kvs = self.project(s, kv)?;
        let layout = AttnLayout::single(s.shape(q)[0], s.shape(kv)[0], 1);
        self.forward_projected(s, q, &kvs, layout, mask)
    }
}

/// Gated recurrent unit applied row-wise with shared parameters:
///
/// `z = σ(u W_z + h U_z + b_z)`, `r = σ(u W_r + h U_r + b_r)`,
/// `h̃ = tanh(u W_h + (r ⊙ h) U_h + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub d_in: usize,
    pub d: usize,
}

impl GruCell {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        GruCell {
            w_z: store.xavier(format!("{name}.w_z"), d_in, d, rng),
            w_r: store.xavier(format!("{name}.w_r"), d_in, d, rng),
            w_h: store.xavier(format!("{name}.w_h"), d_in, d, rng),
            u_z: store.xavier(format!("{name}.u_z"), d, d, rng),
            u_r: store.xavier(format!("{name}.u_r"), d, d, rng),
            u_h: store.xavier(format!("{name}.u_h"), d, d, rng),
            b_z: store.zeros(format!("{name}.b_z"), &[d]),
            b_r: store.zeros(format!("{name}.b_r"), &[d]),
            b_h: store.zeros(format!("{name}.b_h"), &[d]),
            d_in,
            d,
        }
    }

    fn gate<T: Real>(
        &self,
        s: &Session<'_, T>,
        u: Var,
        h: Var,
        w: ParamId,
        uw: ParamId,
        b: ParamId,
    ) -> Result<Var> {
        let a = s.matmul(u, s.p(w))?;
        let c = s.matmul(h, s.p(uw))?;
        let sum = s.add(a, c)?;
        s.add(sum, s.p(b))
    }

    /// One step for every row of `h_prev: R×d` with inputs `u: R×d_in`.
    pub fn step<T: Real>(&self, s: &Session<'_, T>, h_prev: Var, u: Var) -> Result<Var> {
        let (hs, us) = (s.shape(h_prev), s.shape(u));
        if hs.len() != 2 || us.len() != 2 || hs[1] != self.d || us[1] != self.d_in || hs[0] != us[0]
        {
            return Err(Error::shape("gru_step", &hs, &us));
        }
        let z = s.sigmoid(self.gate(s, u, h_prev, self.w_z, self.u_z, self.b_z)?);
        let r = s.sigmoid(self.gate(s, u, h_prev, self.w_r, self.u_r, self.b_r)?);
        let rh = s.mul(r, h_prev)?;
        let cand = s.tanh(self.gate(s, u, rh, self.w_h, self.u_h, self.b_h)?);
        let delta = s.sub(cand, h_prev)?;
        let step = s.mul(z, delta)?;
        s.add(h_prev, step)
    }
}

/// Finite-difference check of `f` with respect to every parameter in
/// `store`. At most `per_tensor` evenly spaced elements of each tensor are
/// perturbed (`usize::MAX` checks all of them).
pub fn check_params<F>(
    store: &ParamStore<f64>,
    step: f64,
    per_tensor: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Session<'_, f64>) -> Result<Var>,
{
    let session = Session::train(store);
    let out = f(&session)?;
    session.backward(out)?;
    let grads = session.param_grads();

    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for (pi, grad) in grads.iter().enumerate() {
        let n = grad.numel();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let orig = probe.tensors()[pi].data()[e];
            probe.tensors_mut()[pi].data_mut()[e] = orig + step;
            let plus = eval_scalar(&probe, &f)?;
            probe.tensors_mut()[pi].data_mut()[e] = orig - step;
            let minus = eval_scalar(&probe, &f)?;
            probe.tensors_mut()[pi].data_mut()[e] = orig;
            report.record(pi, e, grad.data()[e], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}

fn eval_scalar<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&Session<'_, f64>) -> Result<Var>,
{
    let s = Session::infer(store);
    let out = f(&s)?;
    let v = s.value(out).item();
    Ok(v)
}
