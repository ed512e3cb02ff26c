//! The full dialog model: shared word embeddings, the per-turn reasoning
//! unit, the answer decoder and the question reconstruction head.

use rand::Rng;

use crate::config::{Ablation, ModelConfig};
use crate::data::{EncodedDialog, BOS, EOS, PAD, UNK};
use crate::decoder::{Decoder, QuestionHead, TurnContext};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, ProjectedKv, Session};
use crate::r3::{DialogCache, Lives, R3Options, R3Output, R3State, R3};
use crate::search::{beam_search, greedy, Hypothesis, SearchConfig};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: ParamId,
    pub r3: R3,
    pub decoder: Decoder,
    pub qhead: QuestionHead,
}

/// Tape values for one teacher-forced turn.
#[derive(Clone, Debug)]
pub struct TurnForward {
    pub k: Var,
    pub o: Var,
    /// Vocabulary distribution per answer position, `(L+1)×V`.
    pub p_vocab: Var,
    /// Copy distribution over the question's tokens, absent without the
    /// pointer.
    pub p_q: Option<Var>,
    /// Mixture distribution per answer position, `(L+1)×V`.
    pub p_l: Var,
    pub answer_loss: Var,
    pub question_loss: Option<Var>,
    /// Answer tokens followed by the end token.
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DialogForward {
    pub turns: Vec<TurnForward>,
    /// `Σ_t answer_loss_t + w · question_loss_t`.
    pub loss: Var,
}

/// Generated answer for one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub k: Tensor<f64>,
}

/// Per-dialog tape state shared by training and inference passes.
struct Run<'d> {
    embed: Var,
    cache: DialogCache<'d>,
    state: R3State,
    history: Vec<ProjectedKv>,
}

impl Model {
    pub fn new<T: Real>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let embed = {
            let data = (0..cfg.vocab_size * d)
                .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
                .collect();
            store.add("embed", Tensor::new(vec![cfg.vocab_size, d], data)?)
        };
        let opts = R3Options {
            no_recurrence: cfg.has(Ablation::Recurrence),
            no_history: cfg.has(Ablation::HistoryAttn),
        };
        let r3 = R3::new(store, d, cfg.heads, cfg.dgcn_layers, opts, rng)?;
        let decoder = Decoder::new(
            store,
            d,
            cfg.heads,
            cfg.decoder_stack,
            cfg.vocab_size,
            !cfg.has(Ablation::Pointer),
            rng,
        )?;
        let qhead = QuestionHead::new(store, d, cfg.heads, cfg.vocab_size, rng)?;
        Ok(Model {
            cfg: cfg.clone(),
            embed,
            r3,
            decoder,
            qhead,
        })
    }

    /// Ids that generation never emits.
    pub fn banned_tokens() -> Vec<usize> {
        vec![PAD, BOS, UNK]
    }

    pub fn search_config(&self, beam: usize, max_len: usize) -> SearchConfig {
        SearchConfig {
            beam,
            max_len,
            eos: EOS,
            banned: Model::banned_tokens(),
        }
    }

    fn check_dialog(&self, dialog: &EncodedDialog) -> Result<()> {
        if dialog.d != self.cfg.d {
            return Err(Error::Config(format!(
                "dialog {} has feature width {} but the model expects {}",
                dialog.id, dialog.d, self.cfg.d
            )));
        }
        let vocab = self.cfg.vocab_size;
        for turn in &dialog.turns {
            if let Some(&id) = turn.question.iter().chain(&turn.answer).find(|&&i| i >= vocab) {
                return Err(Error::OutOfVocab { id, vocab });
            }
        }
        Ok(())
    }

    fn begin<'d, T: Real>(&self, s: &Session<'_, T>, dialog: &'d EncodedDialog) -> Result<Run<'d>> {
        self.check_dialog(dialog)?;
        let embed = s.p(self.embed);
        let c = s.constant(dialog.c.cast());
        let lives = if self.cfg.has(Ablation::Objects) {
            Lives {
                x: c,
                present: &dialog.frames_present,
                n: 1,
                f: dialog.f,
            }
        } else {
            Lives {
                x: s.constant(dialog.x.cast()),
                present: &dialog.present,
                n: dialog.n,
                f: dialog.f,
            }
        };
        let cache = self.r3.cache(s, lives, c)?;
        let state = self.r3.initial_state(s, lives.n);
        let tokens = dialog.dialog_tokens();
        let history = if tokens.is_empty() {
            Vec::new()
        } else {
            let all = s.gather_rows(embed, &tokens)?;
            self.decoder.history.project(s, all)?
        };
        Ok(Run {
            embed,
            cache,
            state,
            history,
        })
    }

    /// Runs the reasoning unit for turn `t` and prepares the decoder context.
    fn open_turn<T: Real>(
        &self,
        s: &Session<'_, T>,
        run: &mut Run<'_>,
        dialog: &EncodedDialog,
        t: usize,
    ) -> Result<(R3Output, TurnContext)> {
        let ids = &dialog.turns[t].question;
        let q = s.gather_rows(run.embed, ids)?;
        let out = self.r3.step(s, &run.cache, &mut run.state, q)?;
        let ctx = self
            .decoder
            .context(s, ids, q, out.o, &run.history, dialog.history_len(t))?;
        Ok((out, ctx))
    }

    /// Writes the ground-truth answer of turn `t` into the answer history.
    fn close_turn<T: Real>(
        &self,
        s: &Session<'_, T>,
        run: &mut Run<'_>,
        dialog: &EncodedDialog,
        t: usize,
        y: Var,
    ) -> Result<()> {
        let a = s.gather_rows(run.embed, &dialog.turns[t].answer)?;
        self.r3.remember(s, &mut run.state, y, a)
    }

    /// Teacher-forced pass over every turn of `dialog`.
    pub fn forward<T: Real>(
        &self,
        s: &Session<'_, T>,
        dialog: &EncodedDialog,
        question_weight: f64,
    ) -> Result<DialogForward> {
        let mut run = self.begin(s, dialog)?;
        let mut turns = Vec::with_capacity(dialog.turns.len());
        let mut terms = Vec::new();
        for t in 0..dialog.turns.len() {
            let (out, ctx) = self.open_turn(s, &mut run, dialog, t)?;
            let answer = &dialog.turns[t].answer;
            let prefix_ids: Vec<usize> = std::iter::once(BOS).chain(answer.iter().copied()).collect();
            let targets: Vec<usize> = answer.iter().copied().chain(std::iter::once(EOS)).collect();
            let prefix = s.gather_rows(run.embed, &prefix_ids)?;
            let v4 = self.decoder.represent(s, &ctx, prefix, prefix, true)?;
            let dist = self.decoder.distributions(s, &ctx, v4)?;
            let answer_loss = s.nll(dist.p_l, &targets)?;
            terms.push(answer_loss);

            let question_loss = if question_weight > 0.0 {
                let q = &dialog.turns[t].question;
                let q_prefix: Vec<usize> = std::iter::once(BOS).chain(q.iter().copied()).collect();
                let q_targets: Vec<usize> = q.iter().copied().chain(std::iter::once(EOS)).collect();
                let emb = s.gather_rows(run.embed, &q_prefix)?;
                let logits = self.qhead.logits(s, emb, out.o)?;
                let loss = s.cross_entropy(logits, &q_targets)?;
                terms.push(if question_weight == 1.0 {
                    loss
                } else {
                    s.scale(loss, T::from_f64(question_weight))
                });
                Some(loss)
            } else {
                None
            };

            self.close_turn(s, &mut run, dialog, t, out.y)?;
            turns.push(TurnForward {
                k: out.k,
                o: out.o,
                p_vocab: dist.p_vocab,
                p_q: dist.p_q,
                p_l: dist.p_l,
                answer_loss,
                question_loss,
                targets,
            });
        }
        let mut loss = terms[0];
        for &term in &terms[1..] {
            loss = s.add(loss, term)?;
        }
        Ok(DialogForward { turns, loss })
    }

    /// Generates answers for turns `0..turns` with ground-truth history.
    pub fn generate<T: Real>(
        &self,
        store: &ParamStore<T>,
        dialog: &EncodedDialog,
        search: &SearchConfig,
        turns: usize,
    ) -> Result<Vec<Generation>> {
        let picked = self.generate_selected(store, dialog, search, |t| t < turns)?;
        Ok(picked.into_iter().map(|(_, g)| g).collect())
    }

    /// Generates answers only for the turns `select` accepts; the others are
    /// still run so their history reaches later turns.
    pub fn generate_selected<T: Real>(
        &self,
        store: &ParamStore<T>,
        dialog: &EncodedDialog,
        search: &SearchConfig,
        select: impl Fn(usize) -> bool,
    ) -> Result<Vec<(usize, Generation)>> {
        let Some(last) = (0..dialog.turns.len()).rev().find(|&t| select(t)) else {
            return Ok(Vec::new());
        };
        let s = Session::infer(store);
        let mut run = self.begin(&s, dialog)?;
        let mut out = Vec::new();
        for t in 0..=last {
            let (r3, ctx) = self.open_turn(&s, &mut run, dialog, t)?;
            if select(t) {
                let embed = run.embed;
                let scorer = |prefix: &[usize]| self.next_log_probs(&s, &ctx, embed, prefix);
                let hyp: Hypothesis = if search.beam == 1 {
                    greedy(search, scorer)?
                } else {
                    beam_search(search, scorer)?
                };
                out.push((
                    t,
                    Generation {
                        tokens: hyp.answer(EOS).to_vec(),
                        log_prob: hyp.log_prob,
                        k: s.tensor(r3.k).cast(),
                    },
                ));
            }
            if t < last {
                self.close_turn(&s, &mut run, dialog, t, r3.y)?;
            }
        }
        Ok(out)
    }

    /// `K_t` for every turn, with ground-truth answers as history.
    pub fn interaction_matrices<T: Real>(
        &self,
        store: &ParamStore<T>,
        dialog: &EncodedDialog,
    ) -> Result<Vec<Tensor<f64>>> {
        let s = Session::infer(store);
        let mut run = self.begin(&s, dialog)?;
        let mut out = Vec::with_capacity(dialog.turns.len());
        for t in 0..dialog.turns.len() {
            let (r3, _) = self.open_turn(&s, &mut run, dialog, t)?;
            out.push(s.tensor(r3.k).cast());
            self.close_turn(&s, &mut run, dialog, t, r3.y)?;
        }
        Ok(out)
    }

    /// Runs `f` with a next-token scorer for turn `t` after teacher-forcing
    /// the turns before it.
    pub fn with_scorer<T: Real, R>(
        &self,
        store: &ParamStore<T>,
        dialog: &EncodedDialog,
        t: usize,
        f: impl FnOnce(&mut dyn FnMut(&[usize]) -> Result<Vec<f64>>) -> Result<R>,
    ) -> Result<R> {
        if t >= dialog.turns.len() {
            return Err(Error::NotFound(format!(
                "turn {} of dialog {} with {} turns",
                t + 1,
                dialog.id,
                dialog.turns.len()
            )));
        }
        let s = Session::infer(store);
        let mut run = self.begin(&s, dialog)?;
        for j in 0..t {
            let (r3, _) = self.open_turn(&s, &mut run, dialog, j)?;
            self.close_turn(&s, &mut run, dialog, j, r3.y)?;
        }
        let (_, ctx) = self.open_turn(&s, &mut run, dialog, t)?;
        let embed = run.embed;
        let mut scorer = |prefix: &[usize]| self.next_log_probs(&s, &ctx, embed, prefix);
        f(&mut scorer)
    }

    /// `ln P_l` of the next token after `prefix` (generated tokens only).
    fn next_log_probs<T: Real>(
        &self,
        s: &Session<'_, T>,
        ctx: &TurnContext,
        embed: Var,
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        let ids: Vec<usize> = std::iter::once(BOS).chain(prefix.iter().copied()).collect();
        let e = s.gather_rows(embed, &ids)?;
        let last = s.gather_rows(e, &[ids.len() - 1])?;
        let v4 = self.decoder.represent(s, ctx, last, e, false)?;
        let dist = self.decoder.distributions(s, ctx, v4)?;
        let p = s.value(dist.p_l);
        Ok(p.data().iter().map(|v| v.as_f64().max(1e-30).ln()).collect())
    }

    /// Teacher-forced log-probability of generated `tokens` as the answer of
    /// turn `t`. A trailing end token is scored like any other token.
    pub fn sequence_log_prob<T: Real>(
        &self,
        store: &ParamStore<T>,
        dialog: &EncodedDialog,
        t: usize,
        tokens: &[usize],
    ) -> Result<f64> {
        if t >= dialog.turns.len() {
            return Err(Error::NotFound(format!("turn {}", t + 1)));
        }
        let answer = match tokens.last() {
            Some(&EOS) => &tokens[..tokens.len() - 1],
            _ => tokens,
        };
        let mut replaced = dialog.clone();
        replaced.turns[t].answer = answer.to_vec();
        replaced.turns.truncate(t + 1);
        let s = Session::infer(store);
        let fwd = self.forward(&s, &replaced, 0.0)?;
        let turn = &fwd.turns[t];
        let p = s.value(turn.p_l);
        Ok(turn.targets[..tokens.len()]
            .iter()
            .enumerate()
            .map(|(i, &tok)| p.row(i)[tok].as_f64().max(1e-30).ln())
            .sum())
    }
}

/// Teacher-forced argmax agreement: `(correct, total)` positions, the end
/// token included.
pub fn teacher_forced_hits<T: Real>(s: &Session<'_, T>, fwd: &DialogForward) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for turn in &fwd.turns {
        let p = s.value(turn.p_l);
        for (i, &tgt) in turn.targets.iter().enumerate() {
            let row = p.row(i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            hits += usize::from(best == tgt);
            total += 1;
        }
    }
    (hits, total)
}

#[cfg(test)]
mod tests;
