//! Decoding a split and scoring it with the overlap metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedDialog, Sample, TurnRecord, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{report, Item, MetricReport};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::synthworld::dataset::{is_copy, is_lds};
use crate::tensor::Real;

/// Which turns of the test worlds are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Subset {
    /// Every test turn.
    Test,
    /// Pronoun turns at least three turns from the referent.
    Lds,
    /// Attribute and location questions.
    Fvs,
    /// Questions that ask for a name given in the question.
    Copy,
}

impl Subset {
    pub fn keeps(self, turn: &TurnRecord) -> bool {
        match self {
            Subset::Test => true,
            Subset::Lds => is_lds(turn),
            Subset::Fvs => turn.fine_grained,
            Subset::Copy => is_copy(turn),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subset::Test => "test",
            Subset::Lds => "lds",
            Subset::Fvs => "fvs",
            Subset::Copy => "copy",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(Subset::Test),
            "lds" => Ok(Subset::Lds),
            "fvs" => Ok(Subset::Fvs),
            "copy" => Ok(Subset::Copy),
            other => Err(Error::Config(format!("unknown split {other:?} (test, lds, fvs, copy)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub world_id: String,
    pub dialog_index: usize,
    /// 1-based turn number.
    pub turn: usize,
    pub question: String,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub coref_distance: usize,
    pub log_prob: f64,
}

/// Decodes every kept turn of `samples`. With `model == None` the reference
/// answer itself is the candidate, which scores perfectly by construction.
pub fn decode<T: Real>(
    model: Option<(&Model, &ParamStore<T>)>,
    vocab: &Vocab,
    samples: &[&Sample],
    subset: Subset,
    beam: usize,
    max_len: usize,
) -> Result<Vec<TurnResult>> {
    let mut out = Vec::new();
    for sample in samples {
        let kept: Vec<bool> = sample.dialog.iter().map(|t| subset.keeps(t)).collect();
        let result = |t: usize, candidate: Vec<String>, log_prob: f64| {
            let turn = &sample.dialog[t];
            TurnResult {
                world_id: sample.world_id.clone(),
                dialog_index: sample.dialog_index,
                turn: t + 1,
                question: turn.q.join(" "),
                candidate,
                reference: turn.a.clone(),
                coref_distance: turn.coref_distance,
                log_prob,
            }
        };
        match model {
            None => {
                for t in (0..kept.len()).filter(|&t| kept[t]) {
                    out.push(result(t, sample.dialog[t].a.clone(), 0.0));
                }
            }
            Some((m, store)) => {
                let (dialog, _) = EncodedDialog::from_sample(sample, vocab)?;
                let search = m.search_config(beam, max_len);
                for (t, g) in m.generate_selected(store, &dialog, &search, |t| kept[t])? {
                    out.push(result(t, vocab.decode(&g.tokens), g.log_prob));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Breakdown {
    pub turns: usize,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub beam: usize,
    pub turns: usize,
    pub metrics: MetricReport,
    /// Metrics per pronoun distance; 0 collects turns without a pronoun.
    pub by_coref_distance: BTreeMap<usize, Breakdown>,
}

fn items(results: &[&TurnResult]) -> Vec<Item<String>> {
    results
        .iter()
        .map(|r| Item::new(r.candidate.clone(), vec![r.reference.clone()]))
        .collect()
}

pub fn summarize(results: &[TurnResult], subset: Subset, beam: usize) -> Result<EvalReport> {
    let all: Vec<&TurnResult> = results.iter().collect();
    let mut groups: BTreeMap<usize, Vec<&TurnResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.coref_distance).or_default().push(r);
    }
    let mut by_coref_distance = BTreeMap::new();
    for (d, group) in groups {
        by_coref_distance.insert(
            d,
            Breakdown {
                turns: group.len(),
                metrics: report(&items(&group))?,
            },
        );
    }
    Ok(EvalReport {
        split: subset.name().to_string(),
        beam,
        turns: results.len(),
        metrics: report(&items(&all))?,
        by_coref_distance,
    })
}
