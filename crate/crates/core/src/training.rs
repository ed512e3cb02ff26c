//! Teacher-forced training: seeded shuffling, Adam with cosine decay,
//! per-epoch validation and best-validation retention.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::Config;
use crate::data::{EncodedDialog, Vocab};
use crate::error::{Error, Result};
use crate::model::{teacher_forced_hits, Model};
use crate::nn::{ParamStore, Session};
use crate::optim::{clip_global_norm, cosine_lr, Adam, AdamState};
use crate::tensor::Tensor;

/// Stream of the shuffling generator; parameters are drawn from stream 0.
const SHUFFLE_STREAM: u64 = 1;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub train_loss: f64,
    pub train_token_accuracy: f64,
    pub val_loss: Option<f64>,
    pub max_grad_norm: f64,
    pub best: bool,
}

/// Mean per-dialog loss and pooled teacher-forced token accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub token_accuracy: f64,
}

pub struct Trainer {
    pub cfg: Config,
    pub vocab: Vocab,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub epoch: usize,
    pub step: usize,
    rng: ChaCha8Rng,
    best: Option<Best>,
}

#[derive(Clone)]
struct Best {
    val: f64,
    epoch: usize,
    /// Absent after resuming: the best checkpoint on disk stays authoritative
    /// until a later epoch improves on it.
    params: Option<Vec<Tensor<f32>>>,
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

impl Trainer {
    /// Fresh parameters drawn from `cfg.seed`. A zero `vocab_size` takes the
    /// vocabulary's size.
    pub fn new(cfg: &Config, vocab: Vocab) -> Result<Self> {
        let mut cfg = cfg.clone();
        if cfg.vocab_size == 0 {
            cfg.vocab_size = vocab.len();
        }
        if cfg.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size = {} but the vocabulary has {} tokens",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(&cfg.model(), &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Trainer {
            adam: AdamState::new(store.tensors()),
            cfg,
            vocab,
            model,
            store,
            epoch: 0,
            step: 0,
            rng,
            best: None,
        })
    }

    /// Continues from a saved run. `cfg` may change schedule fields such as
    /// `epochs` but not the architecture.
    pub fn resume(ckpt: Checkpoint, cfg: Option<&Config>) -> Result<Self> {
        let model = ckpt.model()?;
        let mut run_cfg = ckpt.config.clone();
        if let Some(cfg) = cfg {
            ckpt.check_compatible(cfg)?;
            run_cfg = Config {
                vocab_size: ckpt.config.vocab_size,
                ..cfg.clone()
            };
            run_cfg.validate()?;
        }
        let best = match (ckpt.best_val, ckpt.best_epoch) {
            (Some(val), Some(epoch)) => Some(Best {
                val,
                epoch,
                params: None,
            }),
            _ => None,
        };
        Ok(Trainer {
            rng: ckpt.rng.restore()?,
            cfg: run_cfg,
            vocab: ckpt.vocab,
            model,
            store: ckpt.params,
            adam: ckpt.adam,
            epoch: ckpt.epoch,
            step: ckpt.step,
            best,
        })
    }

    fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.cfg.batch_size)
    }

    /// One pass over `train` in a freshly shuffled order, then validation.
    pub fn train_epoch(&mut self, train: &[EncodedDialog], val: &[EncodedDialog]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::Degenerate("empty training set".into()));
        }
        let total_steps = self.cfg.epochs * self.steps_per_epoch(train.len());
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let adam = Adam::default();
        let w = self.cfg.question_loss_weight;
        let mut loss_sum = 0.0;
        let (mut hits, mut total) = (0, 0);
        let mut max_norm: f64 = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let mut grads: Vec<Tensor<f32>> =
                self.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = Session::train(&self.store);
                let fwd = self.model.forward(&s, &train[i], w)?;
                let loss = s.value(fwd.loss).item() as f64;
                let (h, n) = teacher_forced_hits(&s, &fwd);
                hits += h;
                total += n;
                batch_loss += loss;
                s.backward(fwd.loss)?;
                for (acc, g) in grads.iter_mut().zip(s.param_grads()) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v * scale;
                    }
                }
            }
            let norm = clip_global_norm(&mut grads, if self.cfg.clip_norm > 0.0 { self.cfg.clip_norm } else { f64::INFINITY });
            if !batch_loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    batch: batch.iter().map(|&i| train[i].id.clone()).collect(),
                });
            }
            max_norm = max_norm.max(norm);
            loss_sum += batch_loss;
            lr = cosine_lr(self.step, total_steps, self.cfg.lr);
            adam.step(self.store.tensors_mut(), &grads, &mut self.adam, lr)?;
            self.step += 1;
        }
        self.epoch += 1;

        let val_loss = if val.is_empty() {
            None
        } else {
            Some(self.evaluate(val)?.loss)
        };
        let train_loss = loss_sum / train.len() as f64;
        let score = val_loss.unwrap_or(train_loss);
        let improved = self.best.as_ref().is_none_or(|b| score < b.val);
        if improved {
            self.best = Some(Best {
                val: score,
                epoch: self.epoch,
                params: Some(self.store.tensors().to_vec()),
            });
        }
        Ok(EpochLog {
            epoch: self.epoch,
            step: self.step,
            lr,
            train_loss,
            train_token_accuracy: hits as f64 / total.max(1) as f64,
            val_loss,
            max_grad_norm: max_norm,
            best: improved,
        })
    }

    /// Teacher-forced loss and token accuracy under the current parameters.
    pub fn evaluate(&self, dialogs: &[EncodedDialog]) -> Result<LossReport> {
        evaluate(&self.model, &self.store, dialogs, self.cfg.question_loss_weight)
    }

    /// Trains until `cfg.epochs` epochs are complete, or until `stop_after`
    /// epochs if that comes first. Appends one JSON line per epoch to the log
    /// and refreshes both checkpoints after each epoch.
    pub fn run(
        &mut self,
        train: &[EncodedDialog],
        val: &[EncodedDialog],
        paths: Option<&RunPaths>,
        stop_after: Option<usize>,
    ) -> Result<Vec<EpochLog>> {
        let end = stop_after.map_or(self.cfg.epochs, |s| s.min(self.cfg.epochs));
        let mut log = match paths {
            Some(p) => {
                std::fs::create_dir_all(&p.dir)?;
                let file = if self.epoch == 0 {
                    File::create(p.log())?
                } else {
                    std::fs::OpenOptions::new().append(true).create(true).open(p.log())?
                };
                Some(BufWriter::new(file))
            }
            None => None,
        };
        let mut logs = Vec::new();
        while self.epoch < end {
            let entry = self.train_epoch(train, val)?;
            log::info!(
                "epoch {} train_loss {:.4} val_loss {} acc {:.3}",
                entry.epoch,
                entry.train_loss,
                entry.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
                entry.train_token_accuracy
            );
            if let (Some(w), Some(p)) = (log.as_mut(), paths) {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n")?;
                w.flush()?;
                self.checkpoint().save(&p.last())?;
                if entry.best {
                    self.best_checkpoint().save(&p.best())?;
                }
            }
            logs.push(entry);
        }
        Ok(logs)
    }

    /// Current parameters and optimizer state, for resuming.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            step: self.step,
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_val: self.best.as_ref().map(|b| b.val),
            rng: RngState::capture(&self.rng),
            params: self.store.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Like [`Trainer::checkpoint`] but with the best-validation parameters.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.checkpoint();
        if let Some(params) = self.best.as_ref().and_then(|b| b.params.clone()) {
            ckpt.params
                .load_values(params)
                .expect("best parameters share the store layout");
        }
        ckpt
    }

    /// Swaps in the best-validation parameters.
    pub fn restore_best(&mut self) {
        if let Some(params) = self.best.as_ref().and_then(|b| b.params.clone()) {
            self.store
                .load_values(params)
                .expect("best parameters share the store layout");
        }
    }
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    dialogs: &[EncodedDialog],
    question_weight: f64,
) -> Result<LossReport> {
    let mut loss = 0.0;
    let (mut hits, mut total) = (0, 0);
    for d in dialogs {
        let s = Session::infer(store);
        let fwd = model.forward(&s, d, question_weight)?;
        loss += s.value(fwd.loss).item() as f64;
        let (h, n) = teacher_forced_hits(&s, &fwd);
        hits += h;
        total += n;
    }
    Ok(LossReport {
        loss: loss / dialogs.len().max(1) as f64,
        token_accuracy: hits as f64 / total.max(1) as f64,
    })
}

/// Reads the log written by [`Trainer::run`].
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
