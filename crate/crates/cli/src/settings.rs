//! Layered run configuration: a base config, then the keys present in a
//! `--config` file, then command-line flags.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use objdialog::config::{Ablation, Config};
use serde_json::{Map, Value};

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigFlags {
    /// Flat JSON config; its keys override the base, flags override both.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub decoder_stack: Option<usize>,
    #[arg(long)]
    pub dgcn_layers: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_answer_len: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub question_loss_weight: Option<f64>,
    /// recurrence, objects, history-attn or pointer; repeat or comma-separate.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<Ablation>,
}

impl ConfigFlags {
    /// `base` overridden by the config file's keys and then by the flags.
    pub fn resolve(&self, base: Config) -> Result<Config> {
        let mut value = serde_json::to_value(&base)?;
        let fields = value.as_object_mut().expect("config serializes as an object");
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            // Parse once as a full config so unknown keys and bad types are
            // rejected with the usual message.
            Config::from_json(&text)?;
            let file: Map<String, Value> = serde_json::from_str(&text)?;
            fields.extend(file);
        }
        let mut set = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                fields.insert(key.to_string(), v);
            }
        };
        set("d", self.d.map(Value::from));
        set("heads", self.heads.map(Value::from));
        set("decoder_stack", self.decoder_stack.map(Value::from));
        set("dgcn_layers", self.dgcn_layers.map(Value::from));
        set("batch_size", self.batch_size.map(Value::from));
        set("epochs", self.epochs.map(Value::from));
        set("lr", self.lr.map(Value::from));
        set("seed", self.seed.map(Value::from));
        set("beam", self.beam.map(Value::from));
        set("max_answer_len", self.max_answer_len.map(Value::from));
        set("clip_norm", self.clip_norm.map(Value::from));
        set("question_loss_weight", self.question_loss_weight.map(Value::from));
        if !self.ablate.is_empty() {
            set("ablate", Some(serde_json::to_value(&self.ablate)?));
        }
        let cfg: Config = serde_json::from_value(value).map_err(|e| objdialog::Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}
