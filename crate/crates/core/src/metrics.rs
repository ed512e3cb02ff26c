//! Word-overlap metrics: corpus BLEU, ROUGE-L, plain CIDEr and token
//! accuracy, plus JSON output with fixed six-decimal numbers.

use std::collections::HashMap;
use std::hash::Hash;
use std::io;

use serde::Serialize;

use crate::error::{Error, Result};

/// One candidate with its references.
#[derive(Clone, Debug, PartialEq)]
pub struct Item<S> {
    pub candidate: Vec<S>,
    pub references: Vec<Vec<S>>,
}

impl<S> Item<S> {
    pub fn new(candidate: Vec<S>, references: Vec<Vec<S>>) -> Self {
        Item { candidate, references }
    }
}

fn ngrams<S: Eq + Hash + Clone>(tokens: &[S], n: usize) -> HashMap<Vec<S>, usize> {
    let mut out = HashMap::new();
    if n == 0 {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

fn check_refs<S>(corpus: &[Item<S>]) -> Result<()> {
    if corpus.iter().any(|i| i.references.is_empty()) {
        return Err(Error::Degenerate("every item needs at least one reference".into()));
    }
    Ok(())
}

/// Corpus BLEU up to order `n`: clipped n-gram precisions pooled over the
/// corpus, geometric mean with equal weights, and brevity penalty
/// `exp(1 − r/c)` when `c < r`, with `r` summing each item's closest
/// reference length (shorter on ties). Orders longer than every reference
/// are dropped, so exact copies of one- and two-word answers score 1.
pub fn bleu<S: Eq + Hash + Clone>(corpus: &[Item<S>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    check_refs(corpus)?;
    if corpus.is_empty() {
        log::warn!("BLEU of an empty corpus is 0");
        return Ok(0.0);
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for item in corpus {
        let len = item.candidate.len();
        c += len;
        r += item
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&rl| (rl.abs_diff(len), rl))
            .expect("non-empty references");
        for k in 1..=n {
            let cand = ngrams(&item.candidate, k);
            let mut max_ref: HashMap<&Vec<S>, usize> = HashMap::new();
            let refs: Vec<_> = item.references.iter().map(|r| ngrams(r, k)).collect();
            for rc in &refs {
                for (g, &cnt) in rc {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            for (g, &cnt) in &cand {
                matched[k - 1] += cnt.min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += cnt;
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    // An order is vacuous when no reference in the corpus is long enough to
    // contain one of its n-grams; it is left out of the geometric mean.
    let longest_ref = corpus
        .iter()
        .flat_map(|i| i.references.iter().map(Vec::len))
        .max()
        .unwrap_or(0);
    let orders = n.min(longest_ref);
    if orders == 0 || (0..orders).any(|k| matched[k] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..orders)
        .map(|k| (matched[k] as f64 / total[k] as f64).ln())
        .sum::<f64>()
        / orders as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

fn lcs<S: Eq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA2: f64 = 1.2;

/// LCS F-measure `(1+β²)PR / (R + β²P)`.
pub fn rouge_l_pair<S: Eq>(candidate: &[S], reference: &[S]) -> f64 {
    let l = lcs(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    (1.0 + ROUGE_BETA2) * p * r / (r + ROUGE_BETA2 * p)
}

/// Mean over items of the best ROUGE-L F-measure against any reference.
pub fn rouge_l<S: Eq>(corpus: &[Item<S>]) -> Result<f64> {
    check_refs(corpus)?;
    if corpus.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = corpus
        .iter()
        .map(|i| {
            i.references
                .iter()
                .map(|r| rouge_l_pair(&i.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / corpus.len() as f64)
}

/// Plain CIDEr: for each order 1–4, tf-idf vectors of raw n-gram counts with
/// `idf = ln(N / max(1, df))` where `df` counts items whose references contain
/// the n-gram; the cosine to each reference is averaged, orders are averaged,
/// and the corpus mean is scaled by 10.
///
/// With a single item every reference n-gram has `idf = ln 1 = 0`, so the
/// score collapses to 0; a warning is logged.
pub fn cider<S: Eq + Hash + Clone>(corpus: &[Item<S>]) -> Result<f64> {
    check_refs(corpus)?;
    if corpus.is_empty() {
        return Ok(0.0);
    }
    if corpus.len() == 1 {
        log::warn!("CIDEr over a single item: document frequencies are degenerate");
    }
    let big_n = corpus.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<Vec<S>, usize> = HashMap::new();
        for item in corpus {
            let mut seen: HashMap<Vec<S>, ()> = HashMap::new();
            for r in &item.references {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let vector = |tokens: &[S]| -> HashMap<Vec<S>, f64> {
            ngrams(tokens, n)
                .into_iter()
                .map(|(g, c)| {
                    let idf = (big_n / df.get(&g).copied().unwrap_or(0).max(1) as f64).ln();
                    (g, c as f64 * idf)
                })
                .collect()
        };
        let norm = |v: &HashMap<Vec<S>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
        for item in corpus {
            let vc = vector(&item.candidate);
            let nc = norm(&vc);
            let mut sim = 0.0;
            for r in &item.references {
                let vr = vector(r);
                let nr = norm(&vr);
                if nc > 0.0 && nr > 0.0 {
                    let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
                    sim += dot / (nc * nr);
                }
            }
            total += sim / item.references.len() as f64;
        }
    }
    Ok(10.0 * total / (4.0 * big_n))
}

/// Pooled fraction of matching positions, comparing each candidate with its
/// first reference up to the shorter of the two lengths.
pub fn token_accuracy<S: Eq>(corpus: &[Item<S>]) -> Result<f64> {
    check_refs(corpus)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for item in corpus {
        let r = &item.references[0];
        for (a, b) in item.candidate.iter().zip(r) {
            hits += usize::from(a == b);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub token_accuracy: f64,
}

pub fn report<S: Eq + Hash + Clone>(corpus: &[Item<S>]) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu1: bleu(corpus, 1)?,
        bleu2: bleu(corpus, 2)?,
        bleu3: bleu(corpus, 3)?,
        bleu4: bleu(corpus, 4)?,
        rouge_l: rouge_l(corpus)?,
        cider: cider(corpus)?,
        token_accuracy: token_accuracy(corpus)?,
    })
}

/// JSON formatter that prints every float with exactly six decimals.
struct Fixed6(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for Fixed6 {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.6}")
        } else {
            w.write_all(b"null")
        }
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Pretty JSON with six-decimal floats.
pub fn to_fixed_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Fixed6(serde_json::ser::PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}
