//! Four-step answer decoder with a pointer mixture over question tokens, and
//! the small question auto-encoder head trained alongside it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamId, ParamStore, ProjectedKv, Session, StackedAttention};
use crate::tensor::{AttnLayout, Real, Var};

#[derive(Clone, Debug)]
pub struct Pointer {
    pub w: ParamId,
    pub gate: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub prefix: StackedAttention,
    pub history: StackedAttention,
    pub question: StackedAttention,
    pub objects: StackedAttention,
    pub vocab: Linear,
    pub pointer: Option<Pointer>,
    pub d: usize,
    pub vocab_size: usize,
}

/// Everything the decoder attends to for one turn, already projected.
#[derive(Clone, Debug)]
pub struct TurnContext {
    /// Per-layer projections of `D`; empty at the first turn.
    pub history: Option<Vec<ProjectedKv>>,
    pub history_len: usize,
    pub question: Vec<ProjectedKv>,
    pub question_emb: Var,
    pub question_ids: Vec<usize>,
    pub objects: Vec<ProjectedKv>,
    pub n_objects: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Distributions {
    pub p_vocab: Var,
    pub p_q: Option<Var>,
    pub alpha: Option<Var>,
    pub p_l: Var,
}

/// Lower-triangular mask: query `i` sees keys `0..=i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len)
        .flat_map(|i| (0..len).map(move |j| j <= i))
        .collect()
}

impl Decoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        d: usize,
        heads: usize,
        depth: usize,
        vocab_size: usize,
        pointer: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let prefix = StackedAttention::new(store, "dec.prefix", d, heads, depth, rng)?;
        let history = StackedAttention::new(store, "dec.history", d, heads, depth, rng)?;
        let question = StackedAttention::new(store, "dec.question", d, heads, depth, rng)?;
        let objects = StackedAttention::new(store, "dec.objects", d, heads, depth, rng)?;
        let vocab = Linear::new(store, "dec.vocab", d, vocab_size, true, rng);
        let pointer = pointer.then(|| Pointer {
            w: store.xavier("dec.pointer", d, d, rng),
            gate: Linear::new(store, "dec.gate", d, 1, true, rng),
        });
        Ok(Decoder {
            prefix,
            history,
            question,
            objects,
            vocab,
            pointer,
            d,
            vocab_size,
        })
    }

    /// Projects the turn's question, object outputs and visible history.
    ///
    /// `history` holds per-layer projections of the whole dialog's tokens;
    /// only the first `history_len` rows are visible at this turn.
    pub fn context<T: Real>(
        &self,
        s: &Session<'_, T>,
        question_ids: &[usize],
        question_emb: Var,
        objects: Var,
        history: &[ProjectedKv],
        history_len: usize,
    ) -> Result<TurnContext> {
        if question_ids.is_empty() {
            return Err(Error::Degenerate("empty question".into()));
        }
        let history = if history_len == 0 {
            None
        } else {
            let rows: Vec<usize> = (0..history_len).collect();
            Some(
                history
                    .iter()
                    .map(|kv| {
                        Ok(ProjectedKv {
                            k: s.gather_rows(kv.k, &rows)?,
                            v: s.gather_rows(kv.v, &rows)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        Ok(TurnContext {
            history,
            history_len,
            question: self.question.project(s, question_emb)?,
            question_emb,
            question_ids: question_ids.to_vec(),
            objects: self.objects.project(s, objects)?,
            n_objects: s.shape(objects)[0],
        })
    }

    /// `v4` for each query row: prefix, then history, question, objects.
    ///
    /// With `causal`, `queries` must be the prefix itself and row `i` only
    /// sees prefix positions up to `i`; otherwise every query sees the whole
    /// prefix.
    pub fn represent<T: Real>(
        &self,
        s: &Session<'_, T>,
        ctx: &TurnContext,
        queries: Var,
        prefix: Var,
        causal: bool,
    ) -> Result<Var> {
        let m = s.shape(queries)[0];
        let l = s.shape(prefix)[0];
        if l == 0 || (causal && m != l) {
            return Err(Error::shape("decoder prefix", &[m], &[l]));
        }
        let mask = causal.then(|| causal_mask(l));
        let kvs = self.prefix.project(s, prefix)?;
        let v1 = self.prefix.forward_projected(
            s,
            queries,
            &kvs,
            AttnLayout::single(m, l, 1),
            mask.as_deref(),
        )?;
        let v2 = match &ctx.history {
            Some(kvs) => self.history.forward_projected(
                s,
                v1,
                kvs,
                AttnLayout::single(m, ctx.history_len, 1),
                None,
            )?,
            None => v1,
        };
        let v3 = self.question.forward_projected(
            s,
            v2,
            &ctx.question,
            AttnLayout::single(m, ctx.question_ids.len(), 1),
            None,
        )?;
        self.objects.forward_projected(
            s,
            v3,
            &ctx.objects,
            AttnLayout::single(m, ctx.n_objects, 1),
            None,
        )
    }

    pub fn vocab_dist<T: Real>(&self, s: &Session<'_, T>, v4: Var) -> Result<Var> {
        let logits = self.vocab.forward(s, v4)?;
        s.softmax(logits, None)
    }

    /// Attention of `v4` over question positions, scatter-added onto the
    /// vocabulary ids of those positions.
    pub fn pointer_dist<T: Real>(
        &self,
        s: &Session<'_, T>,
        ctx: &TurnContext,
        v4: Var,
    ) -> Result<Var> {
        let ptr = self
            .pointer
            .as_ref()
            .ok_or_else(|| Error::Contract("pointer is disabled".into()))?;
        let proj = s.matmul(v4, s.p(ptr.w))?;
        let scores = s.matmul(proj, s.transpose(ctx.question_emb)?)?;
        let scores = s.scale(scores, T::one() / T::from_f64(self.d as f64).sqrt());
        let weights = s.softmax(scores, None)?;
        s.scatter_cols(weights, &ctx.question_ids, self.vocab_size)
    }

    /// `α = σ(v4 w_g + b_g)`, one scalar per row.
    pub fn gate<T: Real>(&self, s: &Session<'_, T>, v4: Var) -> Result<Var> {
        let ptr = self
            .pointer
            .as_ref()
            .ok_or_else(|| Error::Contract("pointer is disabled".into()))?;
        Ok(s.sigmoid(ptr.gate.forward(s, v4)?))
    }

    pub fn distributions<T: Real>(
        &self,
        s: &Session<'_, T>,
        ctx: &TurnContext,
        v4: Var,
    ) -> Result<Distributions> {
        let p_vocab = self.vocab_dist(s, v4)?;
        if self.pointer.is_none() {
            return Ok(Distributions {
                p_vocab,
                p_q: None,
                alpha: None,
                p_l: p_vocab,
            });
        }
        let p_q = self.pointer_dist(s, ctx, v4)?;
        let alpha = self.gate(s, v4)?;
        let p_l = mix(s, p_q, p_vocab, alpha)?;
        Ok(Distributions {
            p_vocab,
            p_q: Some(p_q),
            alpha: Some(alpha),
            p_l,
        })
    }
}

/// `P_l = α P_q + (1 − α) P_vocab` row-wise.
pub fn mix<T: Real>(s: &Session<'_, T>, p_q: Var, p_vocab: Var, alpha: Var) -> Result<Var> {
    s.gate_mix(alpha, p_q, p_vocab)
}

/// Reconstructs the current question from the object outputs:
/// self-attention over the question prefix, attention over `O_t`, and a
/// vocabulary head.
#[derive(Clone, Debug)]
pub struct QuestionHead {
    pub prefix: StackedAttention,
    pub objects: StackedAttention,
    pub vocab: Linear,
}

impl QuestionHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        d: usize,
        heads: usize,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(QuestionHead {
            prefix: StackedAttention::new(store, "qae.prefix", d, heads, 1, rng)?,
            objects: StackedAttention::new(store, "qae.objects", d, heads, 1, rng)?,
            vocab: Linear::new(store, "qae.vocab", d, vocab_size, true, rng),
        })
    }

    /// Logits for every position of a teacher-forced prefix.
    pub fn logits<T: Real>(&self, s: &Session<'_, T>, prefix: Var, objects: Var) -> Result<Var> {
        let l = s.shape(prefix)[0];
        let mask = causal_mask(l);
        let kvs = self.prefix.project(s, prefix)?;
        let v1 = self.prefix.forward_projected(
            s,
            prefix,
            &kvs,
            AttnLayout::single(l, l, 1),
            Some(&mask),
        )?;
        let v2 = self.objects.forward(s, v1, objects, None)?;
        self.vocab.forward(s, v2)
    }
}
