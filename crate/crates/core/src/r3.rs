//! Recurrent relational reasoning over object lives, one step per dialog
//! turn.
//!
//! All member operations work on every object at once: object `n` is row `n`
//! of each `N×d` result, and object lives are stored object-major as
//! `(N·F)×d` with a matching presence mask.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Attention, GruCell, Linear, ParamId, ParamStore, ProjectedKv, Session};
use crate::tensor::{AttnLayout, Real, Tensor, Var};

/// Object feature sequences `X: (N·F)×d` with presence flags `N·F`.
#[derive(Clone, Copy, Debug)]
pub struct Lives<'a> {
    pub x: Var,
    pub present: &'a [bool],
    pub n: usize,
    pub f: usize,
}

#[derive(Clone, Debug)]
pub struct R3 {
    pub resume: Attention,
    pub question: Attention,
    pub gru: Option<GruCell>,
    /// Projection of `u` used to build `K` when the dialog state is disabled.
    pub adjacency: Option<Linear>,
    pub dgcn: Vec<ParamId>,
    pub context: Attention,
    pub fuse: Linear,
    pub answer: Attention,
    pub write: Linear,
    pub read: Option<Attention>,
    pub output: Option<Linear>,
    pub d: usize,
}

/// Switches for the reduced variants of the unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct R3Options {
    /// Build `K` directly from `u` instead of the recurrent dialog state.
    pub no_recurrence: bool,
    /// Use `Y` as the output, skipping retrieval from the answer history.
    pub no_history: bool,
}

/// Key/value projections that stay fixed for a whole dialog.
#[derive(Clone, Debug)]
pub struct DialogCache<'a> {
    pub lives: Lives<'a>,
    pub frames: ProjectedKv,
    pub context: ProjectedKv,
}

#[derive(Clone, Copy, Debug)]
pub struct MemoryEntry {
    pub g: Var,
    pub kv: Option<ProjectedKv>,
}

/// Per-dialog recurrent state: `H_t` plus the per-object answer history.
#[derive(Clone, Debug)]
pub struct R3State {
    pub h: Var,
    pub memory: Vec<MemoryEntry>,
    pub turn: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct R3Output {
    pub z: Var,
    pub u: Var,
    pub k: Var,
    pub y: Var,
    pub o: Var,
}

impl R3 {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        d: usize,
        heads: usize,
        dgcn_layers: usize,
        opts: R3Options,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let resume = Attention::new(store, "r3.resume", d, heads, rng)?;
        let question = Attention::new(store, "r3.question", d, heads, rng)?;
        let (gru, adjacency) = if opts.no_recurrence {
            (None, Some(Linear::new(store, "r3.adjacency", 3 * d, d, false, rng)))
        } else {
            (Some(GruCell::new(store, "r3.gru", 3 * d, d, rng)), None)
        };
        let dgcn = (0..dgcn_layers)
            .map(|l| store.xavier(format!("r3.dgcn.{l}"), d, d, rng))
            .collect();
        let context = Attention::new(store, "r3.context", d, heads, rng)?;
        let fuse = Linear::new(store, "r3.fuse", 2 * d, d, false, rng);
        let answer = Attention::new(store, "r3.answer", d, heads, rng)?;
        let write = Linear::new(store, "r3.write", 3 * d, d, false, rng);
        let (read, output) = if opts.no_history {
            (None, None)
        } else {
            (
                Some(Attention::new(store, "r3.read", d, heads, rng)?),
                Some(Linear::new(store, "r3.output", 2 * d, d, false, rng)),
            )
        };
        Ok(R3 {
            resume,
            question,
            gru,
            adjacency,
            dgcn,
            context,
            fuse,
            answer,
            write,
            read,
            output,
            d,
        })
    }

    pub fn cache<'a, T: Real>(
        &self,
        s: &Session<'_, T>,
        lives: Lives<'a>,
        c: Var,
    ) -> Result<DialogCache<'a>> {
        let xs = s.shape(lives.x);
        if xs != [lives.n * lives.f, self.d] || lives.present.len() != lives.n * lives.f {
            return Err(Error::shape("object lives", &xs, &[lives.n, lives.f, self.d]));
        }
        let cs = s.shape(c);
        if cs != [lives.f, self.d] {
            return Err(Error::shape("context", &cs, &[lives.f, self.d]));
        }
        Ok(DialogCache {
            lives,
            frames: self.resume.project_kv(s, lives.x)?,
            context: self.context.project_kv(s, c)?,
        })
    }

    pub fn initial_state<T: Real>(&self, s: &Session<'_, T>, n: usize) -> R3State {
        R3State {
            h: s.constant(Tensor::zeros(&[n, self.d])),
            memory: Vec::new(),
            turn: 0,
        }
    }

    /// `z_n = 1/S Σ_s Attn(Q_s, X_n, X_n)` for every object, frames masked by
    /// presence. A fully absent object gets a zero resume.
    pub fn object_resume<T: Real>(
        &self,
        s: &Session<'_, T>,
        cache: &DialogCache<'_>,
        q: Var,
    ) -> Result<Var> {
        let Lives { n, f, present, .. } = cache.lives;
        let words = s.shape(q)[0];
        let qp = self.resume.project_q(s, q)?;
        let tiled: Vec<usize> = (0..n).flat_map(|_| 0..words).collect();
        let qp = s.gather_rows(qp, &tiled)?;
        let mask: Vec<bool> = (0..n)
            .flat_map(|o| {
                let row = &present[o * f..(o + 1) * f];
                (0..words).flat_map(move |_| row.iter().copied())
            })
            .collect();
        let layout = AttnLayout {
            groups: n,
            queries: words,
            keys: f,
            heads: self.resume.heads,
        };
        let heads = self.resume.core(s, qp, cache.frames, layout, Some(&mask))?;
        let heads = s.reshape(heads, &[n, words, self.d])?;
        let mean = s.mean_axis(heads, 1)?;
        self.resume.merge(s, mean)
    }

    /// `q_n = Attn(z_n, Q, Q)`.
    pub fn object_question_embed<T: Real>(
        &self,
        s: &Session<'_, T>,
        z: Var,
        q: Var,
    ) -> Result<Var> {
        self.question.attend(s, z, q, q, None)
    }

    /// `H_t = GRU(H_{t-1}, U)`, one shared cell across object rows.
    pub fn advance_state<T: Real>(&self, s: &Session<'_, T>, h_prev: Var, u: Var) -> Result<Var> {
        match &self.gru {
            Some(gru) => gru.step(s, h_prev, u),
            None => Err(Error::Contract("dialog state is disabled".into())),
        }
    }

    /// Graph layers `Z ← Z + relu(K Z W_l)`.
    pub fn dgcn<T: Real>(&self, s: &Session<'_, T>, z: Var, k: Var) -> Result<Var> {
        let (ks, zs) = (s.shape(k), s.shape(z));
        if ks.len() != 2 || ks[0] != ks[1] || ks[1] != zs[0] {
            return Err(Error::shape("dgcn", &ks, &zs));
        }
        let mut z = z;
        for &w in &self.dgcn {
            let kz = s.matmul(k, z)?;
            let msg = s.relu(s.matmul(kz, s.p(w))?);
            z = s.add(z, msg)?;
        }
        Ok(z)
    }

    /// `c̄ = 1/S Σ_s Attn(Q_s, C, C)` as a `1×d` row.
    pub fn context_summary<T: Real>(
        &self,
        s: &Session<'_, T>,
        cache: &DialogCache<'_>,
        q: Var,
    ) -> Result<Var> {
        let words = s.shape(q)[0];
        let qp = self.context.project_q(s, q)?;
        let layout = AttnLayout::single(words, cache.lives.f, self.context.heads);
        let heads = self.context.core(s, qp, cache.context, layout, None)?;
        let mean = s.mean_axis(heads, 0)?;
        let mean = s.reshape(mean, &[1, self.d])?;
        self.context.merge(s, mean)
    }

    /// `Y_n = Linear([Z̄_n; c̄])`.
    pub fn fuse_context<T: Real>(&self, s: &Session<'_, T>, zbar: Var, cbar: Var) -> Result<Var> {
        let n = s.shape(zbar)[0];
        let tiled = s.gather_rows(cbar, &vec![0; n])?;
        let cat = s.concat_last(&[zbar, tiled])?;
        self.fuse.forward(s, cat)
    }

    /// `a_n = Attn(Y_n, A, A)`; an empty answer gives zeros.
    pub fn answer_embed<T: Real>(&self, s: &Session<'_, T>, y: Var, a: Var) -> Result<Var> {
        self.answer.attend(s, y, a, a, None)
    }

    /// `G_n = Linear([Y_n, a_n, p_j])` with `p_j` the encoding of turn `j`.
    pub fn memory_write<T: Real>(
        &self,
        s: &Session<'_, T>,
        y: Var,
        a: Var,
        turn: usize,
    ) -> Result<Var> {
        let n = s.shape(y)[0];
        let p = turn_encoding::<T>(turn, self.d);
        let p = s.constant(Tensor::new(vec![1, self.d], p)?);
        let p = s.gather_rows(p, &vec![0; n])?;
        let cat = s.concat_last(&[y, a, p])?;
        self.write.forward(s, cat)
    }

    /// `Attn(Y_n, M_n, M_n)` over each object's own history; empty history
    /// gives zeros.
    pub fn memory_read<T: Real>(
        &self,
        s: &Session<'_, T>,
        y: Var,
        memory: &[MemoryEntry],
    ) -> Result<Var> {
        let read = self
            .read
            .as_ref()
            .ok_or_else(|| Error::Contract("history retrieval is disabled".into()))?;
        let n = s.shape(y)[0];
        let turns = memory.len();
        if turns == 0 {
            return Ok(s.constant(Tensor::zeros(&[n, self.d])));
        }
        let mut ks = Vec::with_capacity(turns);
        let mut vs = Vec::with_capacity(turns);
        for m in memory {
            let kv = match m.kv {
                Some(kv) => kv,
                None => read.project_kv(s, m.g)?,
            };
            ks.push(kv.k);
            vs.push(kv.v);
        }
        // Stacked turn-major; regroup so each object's entries are contiguous.
        let order: Vec<usize> = (0..n)
            .flat_map(|o| (0..turns).map(move |j| j * n + o))
            .collect();
        let k = s.gather_rows(s.concat_rows(&ks)?, &order)?;
        let v = s.gather_rows(s.concat_rows(&vs)?, &order)?;
        let layout = AttnLayout {
            groups: n,
            queries: 1,
            keys: turns,
            heads: read.heads,
        };
        read.attend_projected(s, y, ProjectedKv { k, v }, layout, None)
    }

    /// Interaction matrix for this turn: from the dialog state, or from a
    /// projection of `u` when the state is disabled.
    fn adjacency<T: Real>(&self, s: &Session<'_, T>, h: Var, u: Var) -> Result<Var> {
        match &self.adjacency {
            Some(lin) => interaction_matrix(s, lin.forward(s, u)?),
            None => interaction_matrix(s, h),
        }
    }

    /// One full turn. Updates `state.h` and the turn counter; the answer
    /// history is extended separately by [`R3::remember`] once the turn's
    /// answer is known.
    pub fn step<T: Real>(
        &self,
        s: &Session<'_, T>,
        cache: &DialogCache<'_>,
        state: &mut R3State,
        q: Var,
    ) -> Result<R3Output> {
        if s.shape(q).first().copied().unwrap_or(0) == 0 {
            return Err(Error::Degenerate("empty question".into()));
        }
        let z = self.object_resume(s, cache, q)?;
        let qn = self.object_question_embed(s, z, q)?;
        let u = modulate(s, z, qn)?;
        if self.gru.is_some() {
            state.h = self.advance_state(s, state.h, u)?;
        }
        let k = self.adjacency(s, state.h, u)?;
        let zbar = self.dgcn(s, z, k)?;
        let cbar = self.context_summary(s, cache, q)?;
        let y = self.fuse_context(s, zbar, cbar)?;
        let o = match (&self.read, &self.output) {
            (Some(_), Some(out)) => {
                let hread = self.memory_read(s, y, &state.memory)?;
                out.forward(s, s.concat_last(&[hread, y])?)?
            }
            _ => y,
        };
        state.turn += 1;
        Ok(R3Output { z, u, k, y, o })
    }

    /// Appends `G_{·,t}` for the turn just taken, given its answer words.
    pub fn remember<T: Real>(
        &self,
        s: &Session<'_, T>,
        state: &mut R3State,
        y: Var,
        answer: Var,
    ) -> Result<()> {
        let a = self.answer_embed(s, y, answer)?;
        let g = self.memory_write(s, y, a, state.turn)?;
        let kv = match &self.read {
            Some(read) => Some(read.project_kv(s, g)?),
            None => None,
        };
        state.memory.push(MemoryEntry { g, kv });
        Ok(())
    }
}

/// `u = tanh([z, q, q ⊙ z])`.
pub fn modulate<T: Real>(s: &Session<'_, T>, z: Var, q: Var) -> Result<Var> {
    let (zs, qs) = (s.shape(z), s.shape(q));
    if zs != qs {
        return Err(Error::shape("modulate", &zs, &qs));
    }
    let zq = s.mul(q, z)?;
    Ok(s.tanh(s.concat_last(&[z, q, zq])?))
}

/// `K = softmax(H Hᵀ / √d)` row-wise.
pub fn interaction_matrix<T: Real>(s: &Session<'_, T>, h: Var) -> Result<Var> {
    let d = s.shape(h)[1];
    let gram = s.matmul(h, s.transpose(h)?)?;
    let scaled = s.scale(gram, T::one() / T::from_f64(d as f64).sqrt());
    s.softmax(scaled, None)
}

/// Sinusoidal encoding of a 1-based turn index.
pub fn turn_encoding<T: Real>(turn: usize, d: usize) -> Vec<T> {
    (0..d)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = turn as f64 * freq;
            T::from_f64(if i % 2 == 0 { a.sin() } else { a.cos() })
        })
        .collect()
}
