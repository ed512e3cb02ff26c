//! Model and run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reduced model variants used to measure what each component contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Interaction matrix built from per-turn object embeddings; no dialog
    /// state is carried across turns.
    Recurrence,
    /// The holistic context track replaces the object lives.
    Objects,
    /// Object outputs skip retrieval from the answer history.
    HistoryAttn,
    /// Answers come from the vocabulary distribution alone.
    Pointer,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Recurrence,
        Ablation::Objects,
        Ablation::HistoryAttn,
        Ablation::Pointer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Recurrence => "recurrence",
            Ablation::Objects => "objects",
            Ablation::HistoryAttn => "history-attn",
            Ablation::Pointer => "pointer",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation {s:?}; expected one of recurrence, objects, history-attn, pointer"
                ))
            })
    }
}

/// Architecture of one model instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub decoder_stack: usize,
    pub dgcn_layers: usize,
    pub vocab_size: usize,
    pub ablate: Vec<Ablation>,
}

impl ModelConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablate.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        if self.decoder_stack == 0 {
            return Err(Error::Config("decoder_stack must be ≥ 1".into()));
        }
        if self.vocab_size <= crate::data::UNK {
            return Err(Error::Config(format!(
                "vocab_size = {} leaves no room for words",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.ablate.sort();
        canon.ablate.dedup();
        let json = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Everything a training run needs, as a flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub d: usize,
    pub heads: usize,
    pub decoder_stack: usize,
    pub dgcn_layers: usize,
    /// Objects per world, used by data generation.
    pub n: usize,
    /// Frames per world, used by data generation.
    pub f: usize,
    /// 0 takes the size of the dataset's vocabulary.
    pub vocab_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub beam: usize,
    pub max_answer_len: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub question_loss_weight: f64,
    pub ablate: Vec<Ablation>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            d: 64,
            heads: 4,
            decoder_stack: 3,
            dgcn_layers: 2,
            n: 6,
            f: 20,
            vocab_size: 0,
            batch_size: 16,
            epochs: 100,
            lr: 1e-3,
            seed: 0,
            beam: 3,
            max_answer_len: 8,
            clip_norm: 5.0,
            question_loss_weight: 1.0,
            ablate: Vec::new(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Config::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn model(&self) -> ModelConfig {
        let mut ablate = self.ablate.clone();
        ablate.sort();
        ablate.dedup();
        ModelConfig {
            d: self.d,
            heads: self.heads,
            decoder_stack: self.decoder_stack,
            dgcn_layers: self.dgcn_layers,
            vocab_size: self.vocab_size,
            ablate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let counts = [
            ("n", self.n),
            ("f", self.f),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("beam", self.beam),
            ("max_answer_len", self.max_answer_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be ≥ 1")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(self.clip_norm >= 0.0) || !(self.question_loss_weight >= 0.0) {
            return Err(Error::Config(
                "clip_norm and question_loss_weight must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let c = Config::from_json(r#"{"d": 32, "ablate": ["pointer", "history-attn"]}"#).unwrap();
        assert_eq!(c.d, 32);
        assert_eq!(c.heads, 4);
        assert_eq!(c.ablate, vec![Ablation::Pointer, Ablation::HistoryAttn]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            Config::from_json(r#"{"dee": 32}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_catches_bad_widths() {
        let mut c = Config {
            vocab_size: 50,
            ..Config::default()
        };
        assert!(c.validate().is_ok());
        c.d = 30;
        assert!(c.validate().is_err());
        c.d = 32;
        c.epochs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_ablation_order() {
        let a = Config {
            vocab_size: 50,
            ablate: vec![Ablation::Pointer, Ablation::Objects],
            ..Config::default()
        };
        let b = Config {
            ablate: vec![Ablation::Objects, Ablation::Pointer, Ablation::Objects],
            ..a.clone()
        };
        assert_eq!(a.model().hash(), b.model().hash());
        let c = Config { d: 32, ..a.clone() };
        assert_ne!(a.model().hash(), c.model().hash());
    }

    #[test]
    fn ablation_names_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("objects ".parse::<Ablation>().is_err());
    }
}
