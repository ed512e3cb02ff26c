//! Dataset records, the closed vocabulary, and conversion of records into
//! model-ready tensors.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub q: Vec<String>,
    pub a: Vec<String>,
    pub coref_distance: usize,
    pub fine_grained: bool,
}

/// One line of the dataset file: a synthetic video and its dialog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub world_id: String,
    /// Which of the world's dialogs this is; omitted from the file when 0.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dialog_index: usize,
    pub n: usize,
    pub f: usize,
    pub d: usize,
    pub x: Vec<Vec<Vec<f32>>>,
    pub present: Vec<Vec<bool>>,
    pub c: Vec<Vec<f32>>,
    pub dialog: Vec<TurnRecord>,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl Sample {
    /// `world_id`, with `#k` appended for the world's later dialogs.
    pub fn key(&self) -> String {
        if self.dialog_index == 0 {
            self.world_id.clone()
        } else {
            format!("{}#{}", self.world_id, self.dialog_index)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Error::Degenerate(format!("sample {}: {what}", self.key()));
        if self.x.len() != self.n || self.present.len() != self.n {
            return Err(bad("object count does not match n"));
        }
        for (xs, ps) in self.x.iter().zip(&self.present) {
            if xs.len() != self.f || ps.len() != self.f {
                return Err(bad("frame count does not match f"));
            }
            if xs.iter().any(|row| row.len() != self.d) {
                return Err(bad("feature width does not match d"));
            }
        }
        if self.c.len() != self.f || self.c.iter().any(|row| row.len() != self.d) {
            return Err(bad("context shape does not match f×d"));
        }
        if self.dialog.is_empty() {
            return Err(bad("empty dialog"));
        }
        for (t, turn) in self.dialog.iter().enumerate() {
            if turn.q.is_empty() {
                return Err(bad("empty question"));
            }
            if turn.coref_distance > t {
                return Err(bad("coreference reaches before the first turn"));
            }
        }
        Ok(())
    }
}

/// Token ↔ id mapping with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by `words` in order, duplicates dropped.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().copied() {
            v.push(w);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len());
            self.tokens.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids for `words`, with unknown words mapped to `UNK`. Also returns how
    /// many were unknown.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> (Vec<usize>, usize) {
        let mut unknown = 0;
        let ids = words
            .iter()
            .map(|w| {
                self.id(w.as_ref()).unwrap_or_else(|| {
                    unknown += 1;
                    UNK
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect()
    }

    pub fn from_map(map: &BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![None; map.len()];
        for (t, &i) in map {
            match tokens.get_mut(i) {
                Some(slot @ None) => *slot = Some(t.clone()),
                _ => return Err(Error::Degenerate(format!("vocabulary id {i} is out of range or repeated"))),
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("filled")).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Degenerate(format!("vocabulary id {i} must be {r}")));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.to_map())?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocab::from_map(&serde_json::from_str(&text)?)
    }

    /// Hex SHA-256 of the ordered token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTurn {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

/// A sample in the layout the model consumes: `x` is `(N·F)×d`
/// object-major, `present` is `N·F`, `c` is `F×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDialog {
    pub id: String,
    pub n: usize,
    pub f: usize,
    pub d: usize,
    pub x: Tensor<f32>,
    pub present: Vec<bool>,
    pub c: Tensor<f32>,
    /// All-true mask over frames, used when the context track stands in for
    /// the objects.
    pub frames_present: Vec<bool>,
    pub turns: Vec<EncodedTurn>,
}

impl EncodedDialog {
    pub fn from_sample(sample: &Sample, vocab: &Vocab) -> Result<(Self, usize)> {
        sample.validate()?;
        let x: Vec<f32> = sample.x.iter().flatten().flatten().copied().collect();
        let c: Vec<f32> = sample.c.iter().flatten().copied().collect();
        let mut unknown = 0;
        let turns = sample
            .dialog
            .iter()
            .map(|t| {
                let (question, uq) = vocab.encode(&t.q);
                let (answer, ua) = vocab.encode(&t.a);
                unknown += uq + ua;
                EncodedTurn { question, answer }
            })
            .collect();
        if unknown > 0 {
            log::warn!(
                "sample {}: {unknown} out-of-vocabulary tokens mapped to {}",
                sample.key(),
                RESERVED[UNK]
            );
        }
        Ok((
            EncodedDialog {
                id: sample.key(),
                n: sample.n,
                f: sample.f,
                d: sample.d,
                x: Tensor::new(vec![sample.n * sample.f, sample.d], x)?,
                present: sample.present.iter().flatten().copied().collect(),
                c: Tensor::new(vec![sample.f, sample.d], c)?,
                frames_present: vec![true; sample.f],
                turns,
            },
            unknown,
        ))
    }

    /// Question and answer ids of every turn, in dialog order.
    pub fn dialog_tokens(&self) -> Vec<usize> {
        self.turns
            .iter()
            .flat_map(|t| t.question.iter().chain(&t.answer).copied())
            .collect()
    }

    /// Number of dialog tokens strictly before turn `t` (0-based).
    pub fn history_len(&self, t: usize) -> usize {
        self.turns[..t]
            .iter()
            .map(|t| t.question.len() + t.answer.len())
            .sum()
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
