//! Greedy and beam decoding over any next-token scorer, plus brute-force
//! enumeration for checking both on tiny vocabularies.
//!
//! A scorer maps a generated prefix (without the begin token) to
//! log-probabilities over the whole vocabulary.

use std::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam: usize,
    /// Maximum number of generated tokens, counting the end token.
    pub max_len: usize,
    pub eos: usize,
    /// Ids never generated (padding, begin, unknown).
    pub banned: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, including a trailing end token if one was emitted.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Tokens with the end marker stripped.
    pub fn answer(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Higher log-prob first; ties go to the lexicographically smaller sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn check(cfg: &SearchConfig, scores: &[f64]) -> Result<()> {
    if scores.iter().enumerate().all(|(i, _)| cfg.banned.contains(&i)) {
        return Err(Error::Generation("no generatable token in vocabulary".into()));
    }
    if cfg.eos >= scores.len() {
        return Err(Error::OutOfVocab {
            id: cfg.eos,
            vocab: scores.len(),
        });
    }
    Ok(())
}

fn validate(cfg: &SearchConfig) -> Result<()> {
    if cfg.max_len == 0 || cfg.beam == 0 {
        return Err(Error::Config(format!(
            "beam {} and max length {} must both be at least 1",
            cfg.beam, cfg.max_len
        )));
    }
    Ok(())
}

pub fn greedy<F>(cfg: &SearchConfig, mut scorer: F) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    validate(cfg)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    while hyp.tokens.len() < cfg.max_len {
        let scores = scorer(&hyp.tokens)?;
        check(cfg, &scores)?;
        let (best, lp) = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| !cfg.banned.contains(i))
            .fold((usize::MAX, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if bi == usize::MAX || v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        hyp.tokens.push(best);
        hyp.log_prob += lp;
        if best == cfg.eos {
            break;
        }
    }
    Ok(hyp)
}

/// Beam search over summed log-probabilities with no length normalization.
///
/// Each round expands every live hypothesis by every allowed token and ranks
/// the expansions. Complete expansions (end token or `max_len`) ranked
/// within the first `beam` are retired; the best incomplete ones, up to
/// `beam`, stay live, so the live width never shrinks because of retired
/// hypotheses. Since log-probabilities only fall as tokens are added, the
/// search stops once no live hypothesis can beat the best retired one.
pub fn beam_search<F>(cfg: &SearchConfig, mut scorer: F) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    validate(cfg)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut best: Option<Hypothesis> = None;
    while !live.is_empty() {
        let mut expansions = Vec::new();
        for hyp in &live {
            let scores = scorer(&hyp.tokens)?;
            check(cfg, &scores)?;
            for (tok, &lp) in scores.iter().enumerate() {
                if cfg.banned.contains(&tok) {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                expansions.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + lp,
                });
            }
        }
        expansions.sort_by(rank);
        live.clear();
        for (i, hyp) in expansions.into_iter().enumerate() {
            let complete = hyp.tokens.last() == Some(&cfg.eos) || hyp.tokens.len() >= cfg.max_len;
            if complete {
                if i < cfg.beam && best.as_ref().is_none_or(|b| rank(&hyp, b).is_lt()) {
                    best = Some(hyp);
                }
            } else if live.len() < cfg.beam {
                live.push(hyp);
            }
            if i + 1 >= cfg.beam && live.len() == cfg.beam {
                break;
            }
        }
        if let (Some(b), Some(top)) = (&best, live.first()) {
            if b.log_prob >= top.log_prob {
                break;
            }
        }
    }
    best.ok_or_else(|| Error::Generation("beam search produced no hypothesis".into()))
}

/// Every complete sequence: ends in the end token, or has `max_len` tokens.
pub fn enumerate<F>(cfg: &SearchConfig, mut scorer: F) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    validate(cfg)?;
    let mut out = Vec::new();
    let mut stack = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    while let Some(hyp) = stack.pop() {
        let scores = scorer(&hyp.tokens)?;
        for (tok, &lp) in scores.iter().enumerate() {
            if cfg.banned.contains(&tok) {
                continue;
            }
            let mut tokens = hyp.tokens.clone();
            tokens.push(tok);
            let next = Hypothesis {
                tokens,
                log_prob: hyp.log_prob + lp,
            };
            if tok == cfg.eos || next.tokens.len() >= cfg.max_len {
                out.push(next);
            } else {
                stack.push(next);
            }
        }
    }
    Ok(out)
}

/// Brute-force argmax over [`enumerate`], with the same tie rule as the
/// searches.
pub fn exhaustive<F>(cfg: &SearchConfig, scorer: F) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut all = enumerate(cfg, scorer)?;
    all.sort_by(rank);
    all.into_iter()
        .next()
        .ok_or_else(|| Error::Generation("no complete sequence".into()))
}
