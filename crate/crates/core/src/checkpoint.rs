//! Checkpoint files: an 8-byte little-endian header length, a JSON manifest,
//! then the raw little-endian f32 payload of every tensor.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::optim::AdamState;
use crate::tensor::Tensor;

const FORMAT: &str = "objdialog-checkpoint-1";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: Config,
    config_hash: String,
    vocab: Vec<String>,
    vocab_fingerprint: String,
    epoch: usize,
    step: usize,
    best_epoch: Option<usize>,
    best_val: Option<f64>,
    rng: RngState,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// Everything needed to evaluate a model or continue training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Effective configuration, with `vocab_size` resolved.
    pub config: Config,
    pub vocab: Vocab,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub rng: RngState,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.model().hash()
    }

    /// Rebuilds the model skeleton and checks that every stored tensor
    /// matches it by name and shape.
    pub fn model(&self) -> Result<Model> {
        let mut fresh = ParamStore::<f32>::new();
        let model = Model::new(
            &self.config.model(),
            &mut fresh,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        if fresh.names() != self.params.names() {
            return Err(Error::Checkpoint(
                "stored parameter names do not match the configured architecture".into(),
            ));
        }
        for (a, b) in fresh.tensors().iter().zip(self.params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::shape("checkpoint", a.shape(), b.shape()));
            }
        }
        Ok(model)
    }

    /// Fails unless the checkpoint was trained with the same architecture as
    /// `cfg`.
    pub fn check_compatible(&self, cfg: &Config) -> Result<()> {
        let mut want = cfg.model();
        if want.vocab_size == 0 {
            want.vocab_size = self.vocab.len();
        }
        let (have, want) = (self.config_hash(), want.hash());
        if have != want {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {have}, requested {want}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.params.names();
        let groups: [(&str, &[Tensor<f32>]); 3] = [
            ("", self.params.tensors()),
            ("adam.m:", &self.adam.m),
            ("adam.v:", &self.adam.v),
        ];
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (prefix, group) in groups {
            if group.len() != names.len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            for (name, t) in names.iter().zip(group) {
                let offset = payload.len() as u64;
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    byte_offset: offset,
                    byte_len: payload.len() as u64 - offset,
                });
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            config: self.config.clone(),
            config_hash: self.config_hash(),
            vocab: self.vocab.tokens().to_vec(),
            vocab_fingerprint: self.vocab.fingerprint(),
            epoch: self.epoch,
            step: self.step,
            best_epoch: self.best_epoch,
            best_val: self.best_val,
            rng: self.rng.clone(),
            adam_step: self.adam.step,
            tensors,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| bad("truncated header"))?
            .try_into()
            .expect("8 bytes");
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header too large"))?;
        let end = header_len.checked_add(8).ok_or_else(|| bad("header too large"))?;
        let header = bytes.get(8..end).ok_or_else(|| bad("truncated header"))?;
        let m: Manifest = serde_json::from_slice(header)?;
        if m.format != FORMAT {
            return Err(bad(&format!("unknown format {:?}", m.format)));
        }
        let payload = &bytes[end..];
        if hex::encode(Sha256::digest(payload)) != m.payload_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        let vocab = Vocab::from_map(
            &m.vocab
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i))
                .collect(),
        )?;
        if vocab.fingerprint() != m.vocab_fingerprint {
            return Err(bad("vocabulary fingerprint mismatch"));
        }
        if m.config.model().hash() != m.config_hash {
            return Err(bad("config hash does not match the stored config"));
        }
        if m.tensors.len() % 3 != 0 {
            return Err(bad("tensor table is not params + two moment groups"));
        }
        let read = |e: &TensorEntry| -> Result<Tensor<f32>> {
            if e.dtype != "f32" {
                return Err(bad(&format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let start = e.byte_offset as usize;
            let end = start.checked_add(e.byte_len as usize).unwrap_or(usize::MAX);
            let raw = payload
                .get(start..end)
                .ok_or_else(|| bad(&format!("{}: byte range outside payload", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(|_| bad(&format!("{}: size mismatch", e.name)))
        };
        let count = m.tensors.len() / 3;
        let mut params = ParamStore::new();
        let mut moments = (Vec::new(), Vec::new());
        for (i, e) in m.tensors.iter().enumerate() {
            let t = read(e)?;
            let base = &m.tensors[i % count].name;
            match i / count {
                0 if params.id(&e.name).is_none() => {
                    params.add(e.name.clone(), t);
                }
                1 if e.name == format!("adam.m:{base}") => moments.0.push(t),
                2 if e.name == format!("adam.v:{base}") => moments.1.push(t),
                _ => return Err(bad(&format!("unexpected tensor {}", e.name))),
            }
        }
        Ok(Checkpoint {
            config: m.config,
            vocab,
            epoch: m.epoch,
            step: m.step,
            best_epoch: m.best_epoch,
            best_val: m.best_val,
            rng: m.rng,
            params,
            adam: AdamState {
                step: m.adam_step,
                m: moments.0,
                v: moments.1,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}
