use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use objdialog::checkpoint::Checkpoint;
use objdialog::config::{Ablation, Config};
use objdialog::data::{EncodedDialog, Sample};
use objdialog::eval::{decode, summarize, TurnResult};
use objdialog::metrics::to_fixed_json;
use objdialog::synthworld::{gen_dataset, Dataset, GenParams};
use objdialog::training::{RunPaths, Trainer};
use objdialog::Error;
use serde::Serialize;
use serde_json::json;

use crate::settings::ConfigFlags;
use crate::{AskArgs, EvalArgs, GenDataArgs, TraceArgs, TrainArgs};

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")?;
            out.flush()?;
        }
    }
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn check_width(samples: &[&Sample], cfg: &Config) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| s.d != cfg.d) {
        return Err(Error::Config(format!(
            "dataset feature width is {} but the config has d = {}",
            s.d, cfg.d
        ))
        .into());
    }
    Ok(())
}

fn encode(ds: &Dataset, ids: &[String]) -> Result<Vec<EncodedDialog>> {
    ds.split_samples(ids)
        .into_iter()
        .map(|s| Ok(EncodedDialog::from_sample(s, &ds.vocab)?.0))
        .collect()
}

/// Loads a checkpoint and checks it against the dataset and the requested
/// config. The returned config is the checkpoint's with any overrides.
fn open_checkpoint(path: &Path, flags: &ConfigFlags, ds: Option<&Dataset>) -> Result<(Checkpoint, Config)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = flags.resolve(ckpt.config.clone())?;
    ckpt.check_compatible(&cfg)?;
    if let Some(ds) = ds {
        if ds.vocab.fingerprint() != ckpt.vocab.fingerprint() {
            return Err(Error::Checkpoint("checkpoint vocabulary differs from the dataset's".into()).into());
        }
    }
    Ok((ckpt, cfg))
}

fn find_sample<'a>(ds: &'a Dataset, world: &str, dialog: usize) -> Result<&'a Sample> {
    ds.sample(world, dialog).ok_or_else(|| {
        Error::NotFound(if dialog == 0 {
            format!("world {world:?}")
        } else {
            format!("dialog {dialog} of world {world:?}")
        })
        .into()
    })
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let d = GenParams::default();
    let p = GenParams {
        worlds: a.worlds.unwrap_or(d.worlds),
        turns: a.turns.unwrap_or(d.turns),
        seed: a.seed.unwrap_or(d.seed),
        n: a.n.unwrap_or(d.n),
        f: a.f.unwrap_or(d.f),
        d: a.d.unwrap_or(d.d),
        grid: a.grid.unwrap_or(d.grid),
        dialogs: a.dialogs.unwrap_or(d.dialogs),
        policy: d.policy,
    };
    let ds = gen_dataset(&p)?;
    let stats = ds
        .save(&a.out, &p)
        .with_context(|| format!("writing dataset to {}", a.out.display()))?;
    write_or_print(&pretty(&stats)?, None)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let (ckpt, cfg) = open_checkpoint(path, &a.flags, Some(&ds))?;
            Trainer::resume(ckpt, Some(&cfg))?
        }
        None => {
            let cfg = a.flags.resolve(Config::default())?;
            Trainer::new(&cfg, ds.vocab.clone())?
        }
    };
    check_width(&ds.samples.iter().collect::<Vec<_>>(), &trainer.cfg)?;
    let train = encode(&ds, &ds.splits.train)?;
    let val = encode(&ds, &ds.splits.val)?;
    if train.is_empty() {
        return Err(Error::Degenerate("the training split is empty".into()).into());
    }
    let paths = RunPaths::new(&a.out);
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.json"), format!("{}\n", pretty(&trainer.cfg)?))?;
    let first = trainer.epoch;
    trainer.run(&train, &val, Some(&paths), None)?;
    let ckpt = trainer.checkpoint();
    let summary = json!({
        "epochs_run": trainer.epoch - first,
        "epoch": trainer.epoch,
        "best_epoch": ckpt.best_epoch,
        "best_val": ckpt.best_val,
        "best_checkpoint": paths.best(),
        "last_checkpoint": paths.last(),
        "log": paths.log(),
        "config": trainer.cfg,
    });
    write_or_print(&pretty(&summary)?, None)
}

fn read_predictions(path: &Path) -> Result<Vec<TurnResult>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: Option<String>,
    mode: &'a str,
    config: Config,
    report: objdialog::eval::EvalReport,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (results, cfg, mode) = if let Some(path) = &a.predictions_in {
        let cfg = a.flags.resolve(Config::default())?;
        (read_predictions(path)?, cfg, "predictions")
    } else {
        let Some(data) = &a.data else {
            bail!(Error::Config("--data is required unless --predictions-in is given".into()));
        };
        let ds = load_dataset(data)?;
        let test = ds.split_samples(&ds.splits.test);
        if a.oracle {
            let cfg = a.flags.resolve(Config::default())?;
            let results = decode::<f32>(None, &ds.vocab, &test, a.split, cfg.beam, cfg.max_answer_len)?;
            (results, cfg, "oracle")
        } else {
            let path = a.checkpoint.as_ref().expect("clap requires a checkpoint here");
            let (ckpt, cfg) = open_checkpoint(path, &a.flags, Some(&ds))?;
            check_width(&test, &cfg)?;
            let model = ckpt.model()?;
            let results = decode(
                Some((&model, &ckpt.params)),
                &ds.vocab,
                &test,
                a.split,
                cfg.beam,
                cfg.max_answer_len,
            )?;
            (results, cfg, "model")
        }
    };
    if results.is_empty() {
        log::warn!("no turns to score");
    }
    if let Some(path) = &a.predictions_out {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for r in &results {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let report = summarize(&results, a.split, cfg.beam)?;
    let out = EvalOutput {
        checkpoint: a.checkpoint.as_ref().map(|p| p.display().to_string()),
        mode,
        config: cfg,
        report,
    };
    write_or_print(&to_fixed_json(&out)?, a.out.as_deref())
}

pub fn ask(a: AskArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let (ckpt, cfg) = open_checkpoint(&a.checkpoint, &a.flags, Some(&ds))?;
    let sample = find_sample(&ds, &a.world, a.dialog)?;
    check_width(&[sample], &cfg)?;
    if a.turn == 0 || a.turn > sample.dialog.len() {
        return Err(Error::NotFound(format!(
            "turn {} of {} (the dialog has {} turns)",
            a.turn,
            sample.key(),
            sample.dialog.len()
        ))
        .into());
    }
    let t = a.turn - 1;
    let model = ckpt.model()?;
    let (dialog, _) = EncodedDialog::from_sample(sample, &ds.vocab)?;
    let search = model.search_config(cfg.beam, cfg.max_answer_len);
    let (_, generation) = model
        .generate_selected(&ckpt.params, &dialog, &search, |i| i == t)?
        .pop()
        .expect("the selected turn is generated");
    let turn = &sample.dialog[t];
    let out = json!({
        "world": sample.world_id,
        "dialog": sample.dialog_index,
        "turn": a.turn,
        "question": turn.q.join(" "),
        "answer": ds.vocab.decode(&generation.tokens).join(" "),
        "reference": turn.a.join(" "),
        "log_prob": generation.log_prob,
        "config": cfg,
    });
    write_or_print(&pretty(&out)?, None)
}

pub fn trace(a: TraceArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let (ckpt, cfg) = open_checkpoint(&a.checkpoint, &a.flags, Some(&ds))?;
    let sample = find_sample(&ds, &a.world, a.dialog)?;
    check_width(&[sample], &cfg)?;
    let world = ds
        .world(&a.world)
        .ok_or_else(|| Error::NotFound(format!("world {:?} in the dataset's world file", a.world)))?;
    let model = ckpt.model()?;
    let (dialog, _) = EncodedDialog::from_sample(sample, &ds.vocab)?;
    let ks = model.interaction_matrices(&ckpt.params, &dialog)?;
    // Without object lives the unit reasons over one pseudo-object, the
    // holistic context.
    let objects = if cfg.ablate.contains(&Ablation::Objects) {
        json!([{ "id": 0, "shape": "context", "color": "context" }])
    } else {
        world
            .objects
            .iter()
            .map(|o| json!({ "id": o.id, "shape": o.shape.word(), "color": o.color.word() }))
            .collect()
    };
    let turns: Vec<_> = ks
        .iter()
        .enumerate()
        .map(|(t, k)| {
            let cols = k.shape()[1];
            let rows: Vec<&[f64]> = k.data().chunks(cols).collect();
            json!({
                "turn": t + 1,
                "question": sample.dialog[t].q.join(" "),
                "K": rows,
                "objects": objects,
            })
        })
        .collect();
    let out = json!({
        "world": sample.world_id,
        "dialog": sample.dialog_index,
        "config": cfg,
        "turns": turns,
    });
    write_or_print(&pretty(&out)?, a.out.as_deref())
}
