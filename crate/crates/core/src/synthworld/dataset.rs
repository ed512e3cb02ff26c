//! Whole datasets: many worlds with dialogs, the closed vocabulary, the
//! train/val/test split and the on-disk layout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dialog::{gen_dialog, vocabulary, DialogPolicy, Family};
use super::render::render_features;
use super::{gen_world, oracle, World, WorldParams};
use crate::data::{read_jsonl, write_jsonl, Sample, TurnRecord, Vocab};
use crate::error::{Error, Result};

/// Pronoun distance at which a turn counts as a long-distance dependency.
pub const LDS_DISTANCE: usize = 3;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const WORLDS_FILE: &str = "worlds.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const STATS_FILE: &str = "stats.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub worlds: usize,
    pub turns: usize,
    pub seed: u64,
    pub n: usize,
    pub f: usize,
    pub d: usize,
    pub grid: usize,
    /// Dialogs scripted per world; they share the world's features.
    pub dialogs: usize,
    pub policy: DialogPolicy,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            worlds: 200,
            turns: 6,
            seed: 0,
            n: 6,
            f: 20,
            d: 64,
            grid: 6,
            dialogs: 1,
            policy: DialogPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub params: GenParams,
    pub samples: usize,
    pub turns: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Test turns with a pronoun at least [`LDS_DISTANCE`] turns from its
    /// referent.
    pub test_lds_turns: usize,
    pub test_fvs_turns: usize,
    pub test_copy_turns: usize,
    pub families: BTreeMap<String, usize>,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub worlds: Vec<World>,
    pub vocab: Vocab,
    pub splits: Splits,
}

fn mix(seed: u64, id: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let h = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(id.as_bytes())
        .finalize();
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Orders ids by a seeded hash and cuts 80/10/10. Val and test each get
/// `⌊n/10⌋` ids; train gets the rest.
pub fn build_splits(ids: &[String], seed: u64) -> Splits {
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort_by_key(|id| (mix(seed, id), (*id).clone()));
    let tenth = ids.len() / 10;
    let take = |r: std::ops::Range<usize>| order[r].iter().map(|s| (*s).clone()).collect();
    Splits {
        val: take(0..tenth),
        test: take(tenth..2 * tenth),
        train: take(2 * tenth..ids.len()),
    }
}

pub fn is_lds(turn: &TurnRecord) -> bool {
    turn.coref_distance >= LDS_DISTANCE
}

/// Copy questions are the only ones that carry a name to repeat.
pub fn is_copy(turn: &TurnRecord) -> bool {
    turn.q.iter().any(|w| w == "named")
}

/// Question family recovered from the question's wording.
pub fn family_of(turn: &TurnRecord) -> Family {
    let q: Vec<&str> = turn.q.iter().map(String::as_str).collect();
    match q.as_slice() {
        _ if is_copy(turn) => Family::Copy,
        ["how", ..] => Family::Count,
        ["what", _, "is", "it"] => Family::Coref,
        ["what", ..] => Family::Attribute,
        ["where", ..] => Family::Location,
        _ => Family::Event,
    }
}

pub fn gen_dataset(p: &GenParams) -> Result<Dataset> {
    if p.worlds == 0 || p.dialogs == 0 {
        return Err(Error::Config("worlds and dialogs per world must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let wp = WorldParams {
        n: p.n,
        frames: p.f,
        grid: p.grid,
    };
    let mut samples = Vec::with_capacity(p.worlds);
    let mut worlds = Vec::with_capacity(p.worlds);
    for i in 0..p.worlds {
        let (world_seed, feature_seed, dialog_seed): (u64, u64, u64) = (rng.random(), rng.random(), rng.random());
        let id = format!("world-{i:05}");
        let world = gen_world(&id, world_seed, wp)?;
        let features = render_features(&world, p.d, feature_seed)?;
        for k in 0..p.dialogs {
            // The first dialog keeps the world's own seed so adding dialogs
            // leaves existing ones unchanged.
            let seed = if k == 0 { dialog_seed } else { mix(dialog_seed, &format!("dialog-{k}")) };
            let turns = gen_dialog(&world, p.turns, &p.policy, seed)?;
            let questions: Vec<Vec<String>> = turns.iter().map(|t| t.q.clone()).collect();
            for (t, turn) in turns.iter().enumerate() {
                let check = oracle::answer(&world, &questions, t)?;
                if check.answer != turn.a || check.coref_distance != turn.coref_distance {
                    return Err(Error::Generation(format!(
                        "{id} dialog {k} turn {}: oracles disagree on {:?} ({:?} vs {:?})",
                        t + 1,
                        turn.q.join(" "),
                        turn.a,
                        check.answer
                    )));
                }
            }
            samples.push(Sample {
                world_id: id.clone(),
                dialog_index: k,
                n: p.n,
                f: p.f,
                d: p.d,
                x: features.x.clone(),
                present: features.present.clone(),
                c: features.c.clone(),
                dialog: turns
                    .into_iter()
                    .map(|t| TurnRecord {
                        q: t.q,
                        a: t.a,
                        coref_distance: t.coref_distance,
                        fine_grained: t.fine_grained,
                    })
                    .collect(),
            });
        }
        worlds.push(world);
    }
    let ids: Vec<String> = worlds.iter().map(|w| w.id.clone()).collect();
    Ok(Dataset {
        samples,
        worlds,
        vocab: Vocab::new(vocabulary()),
        splits: build_splits(&ids, p.seed),
    })
}

impl Dataset {
    pub fn stats(&self, params: &GenParams) -> Stats {
        let test: Vec<&Sample> = self.split_samples(&self.splits.test);
        let test_turns = || test.iter().flat_map(|s| s.dialog.iter());
        let mut families = BTreeMap::new();
        for t in self.samples.iter().flat_map(|s| s.dialog.iter()) {
            *families.entry(family_of(t).name().to_string()).or_insert(0) += 1;
        }
        Stats {
            params: params.clone(),
            samples: self.samples.len(),
            turns: self.samples.iter().map(|s| s.dialog.len()).sum(),
            train: self.splits.train.len(),
            val: self.splits.val.len(),
            test: self.splits.test.len(),
            test_lds_turns: test_turns().filter(|t| is_lds(t)).count(),
            test_fvs_turns: test_turns().filter(|t| t.fine_grained).count(),
            test_copy_turns: test_turns().filter(|t| is_copy(t)).count(),
            families,
            vocab_size: self.vocab.len(),
        }
    }

    /// Every dialog of the listed worlds, in the order of `ids`.
    pub fn split_samples(&self, ids: &[String]) -> Vec<&Sample> {
        let mut index: BTreeMap<&str, Vec<&Sample>> = BTreeMap::new();
        for s in &self.samples {
            index.entry(s.world_id.as_str()).or_default().push(s);
        }
        ids.iter()
            .filter_map(|id| index.get(id.as_str()))
            .flatten()
            .copied()
            .collect()
    }

    pub fn world(&self, id: &str) -> Option<&World> {
        self.worlds.iter().find(|w| w.id == id)
    }

    /// Dialog `index` of world `id`.
    pub fn sample(&self, id: &str, index: usize) -> Option<&Sample> {
        self.samples
            .iter()
            .find(|s| s.world_id == id && s.dialog_index == index)
    }

    pub fn save(&self, dir: &Path, params: &GenParams) -> Result<Stats> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(DATASET_FILE), &self.samples)?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let mut w = BufWriter::new(File::create(dir.join(WORLDS_FILE))?);
        for world in &self.worlds {
            serde_json::to_writer(&mut w, world)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        write_json(&dir.join(SPLITS_FILE), &self.splits)?;
        let stats = self.stats(params);
        write_json(&dir.join(STATS_FILE), &stats)?;
        Ok(stats)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let need = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::NotFound(format!("{}", p.display())))
            }
        };
        let samples = read_jsonl(&need(DATASET_FILE)?)?;
        let vocab = Vocab::load(&need(VOCAB_FILE)?)?;
        let mut worlds = Vec::new();
        if let Ok(p) = need(WORLDS_FILE) {
            for line in BufReader::new(File::open(p)?).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    worlds.push(serde_json::from_str(&line)?);
                }
            }
        }
        let splits = match need(SPLITS_FILE) {
            Ok(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            Err(_) => {
                let mut seen = std::collections::BTreeSet::new();
                let ids: Vec<String> = samples
                    .iter()
                    .map(|s: &Sample| s.world_id.clone())
                    .filter(|id| seen.insert(id.clone()))
                    .collect();
                build_splits(&ids, 0)
            }
        };
        Ok(Dataset {
            samples,
            worlds,
            vocab,
            splits,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
