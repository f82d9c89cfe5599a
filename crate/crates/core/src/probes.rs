//! Accuracy, the word-order shuffle probe and the attention-scope probe.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, KnowledgeBase};
use crate::error::{Error, Result};
use crate::index::{normalize, NameIndex};
use crate::model::{encode_sequences, EncodeOptions, Encoder, ModelKind};
use crate::tokenizer::TokenSequence;
use crate::transformer::ScopeOptions;

/// Name sequences draw from RNG streams above this offset, mentions below.
const NAME_STREAM_OFFSET: u64 = 1 << 40;

/// Splits `tokens` into left-anchored `n`-grams (the last may be shorter)
/// and returns them in a uniformly random order.
pub fn shuffle_ngrams<R: rand::Rng + ?Sized>(tokens: &[u32], n: usize, rng: &mut R) -> Result<Vec<u32>> {
    if n == 0 {
        return Err(Error::Invalid("n-gram size must be at least 1".into()));
    }
    let mut chunks: Vec<&[u32]> = tokens.chunks(n).collect();
    chunks.shuffle(rng);
    Ok(chunks.concat())
}

/// The RNG used to shuffle example `stream` of a probe run.
pub fn example_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn top1_accuracy<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], gold: &[G]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set is undefined".into()));
    }
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Mean over pairs of `100 (probed - baseline) / baseline`.
pub fn avg_percent_change(baseline: &[f64], probed: &[f64]) -> Result<f64> {
    if baseline.len() != probed.len() || baseline.is_empty() {
        return Err(Error::Invalid("need equal, nonempty baseline and probed lists".into()));
    }
    if baseline.contains(&0.0) {
        return Err(Error::Invalid("baseline accuracy of 0 has no percent change".into()));
    }
    let total: f64 = baseline.iter().zip(probed).map(|(b, p)| 100.0 * (p - b) / b).sum();
    Ok(total / baseline.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Shuffle { n: usize },
    Scope(ScopeOptions),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeSpec {
    pub probe: Probe,
    pub seed: u64,
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<()> {
        match self.probe {
            Probe::Shuffle { n: 0 } => Err(Error::Config("shuffle n-gram size must be at least 1".into())),
            Probe::Scope(s) if s.window == 0 || s.window % 2 == 0 => {
                Err(Error::Config(format!("attention window must be odd, got {}", s.window)))
            }
            _ => Ok(()),
        }
    }

    fn describe(&self) -> (&'static str, usize) {
        match self.probe {
            Probe::Shuffle { n } => ("shuffle", n),
            Probe::Scope(s) => ("scope", s.window),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub name: String,
    pub baseline: f64,
    pub probed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub param: usize,
    pub seed: u64,
    pub datasets: Vec<DatasetResult>,
    pub avg_percent_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mentions: usize,
    pub top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topk: Option<f64>,
}

fn unit_rows(rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    rows.iter().map(|r| normalize(r)).collect()
}

/// Ranked entity ids for each query sequence.
fn rank_all<E: Encoder + ?Sized>(
    model: &E,
    index: &NameIndex,
    queries: &[TokenSequence],
    k: usize,
    opts: &EncodeOptions,
) -> Result<Vec<Vec<String>>> {
    let q = unit_rows(encode_sequences(model, queries, opts)?)?;
    q.par_iter()
        .map(|q| Ok(index.search(q, k)?.into_iter().map(|h| h.entity).collect()))
        .collect()
}

/// Top-1 (and optionally top-`k`) accuracy of `dataset` against `index`.
pub fn evaluate<E: Encoder + ?Sized>(model: &E, index: &NameIndex, dataset: &Dataset, k: Option<usize>) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    let seqs: Vec<TokenSequence> = dataset.rows.iter().map(|r| model.tokenize(&r.mention)).collect();
    let ranked = rank_all(model, index, &seqs, k.unwrap_or(1).max(1), &EncodeOptions::default())?;
    let gold: Vec<&str> = dataset.rows.iter().map(|r| r.gold.as_str()).collect();
    let top1: Vec<&str> = ranked.iter().map(|r| r[0].as_str()).collect();
    let topk = k.map(|_| {
        let hits = ranked.iter().zip(&gold).filter(|(r, g)| r.iter().any(|e| e == *g)).count();
        hits as f64 / gold.len() as f64
    });
    Ok(EvalReport {
        mentions: gold.len(),
        top1: top1_accuracy(&top1, &gold)?,
        k,
        topk,
    })
}

fn shuffle_all(seqs: &[TokenSequence], n: usize, seed: u64, stream_offset: u64) -> Result<Vec<TokenSequence>> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = example_rng(seed, stream_offset + i as u64);
            Ok(s.replace_content(&shuffle_ngrams(s.content(), n, &mut rng)?))
        })
        .collect()
}

fn index_from_sequences<E: Encoder + ?Sized>(
    model: &E,
    kb: &KnowledgeBase,
    seqs: &[TokenSequence],
    opts: &EncodeOptions,
) -> Result<NameIndex> {
    let (names, owners): (Vec<String>, Vec<String>) =
        kb.names().map(|(n, id)| (n.to_string(), id.to_string())).unzip();
    let rows = encode_sequences(model, seqs, opts)?;
    NameIndex::from_rows(&rows, names, owners, [0; 32])
}

/// Evaluates each named dataset twice, unperturbed and under the probe,
/// rebuilding the name index under the probe as well.
pub fn run_probe<E: Encoder + ?Sized>(
    model: &E,
    kb: &KnowledgeBase,
    datasets: &[(&str, &Dataset)],
    spec: &ProbeSpec,
) -> Result<ProbeReport> {
    spec.validate()?;
    if let Probe::Scope(_) = spec.probe {
        if model.kind() != ModelKind::Transformer {
            return Err(Error::Unsupported(format!(
                "the scope probe restricts attention, and a {} model has no attention to restrict",
                model.kind().name()
            )));
        }
    }
    if kb.is_empty() {
        return Err(Error::Data("knowledge base is empty".into()));
    }
    let name_seqs: Vec<TokenSequence> = kb.names().map(|(n, _)| model.tokenize(n)).collect();
    let plain = EncodeOptions::default();
    let baseline_index = index_from_sequences(model, kb, &name_seqs, &plain)?;
    let (probed_index, probed_opts) = match spec.probe {
        Probe::Shuffle { n } => {
            let shuffled = shuffle_all(&name_seqs, n, spec.seed, NAME_STREAM_OFFSET)?;
            (index_from_sequences(model, kb, &shuffled, &plain)?, plain)
        }
        Probe::Scope(scope) => {
            let opts = EncodeOptions { scope: Some(scope) };
            (index_from_sequences(model, kb, &name_seqs, &opts)?, opts)
        }
    };
    let mut results = Vec::with_capacity(datasets.len());
    for (name, ds) in datasets {
        if ds.is_empty() {
            return Err(Error::Data(format!("dataset {name} has no rows")));
        }
        let gold: Vec<&str> = ds.rows.iter().map(|r| r.gold.as_str()).collect();
        let seqs: Vec<TokenSequence> = ds.rows.iter().map(|r| model.tokenize(&r.mention)).collect();
        let base = rank_all(model, &baseline_index, &seqs, 1, &plain)?;
        let probed_seqs = match spec.probe {
            Probe::Shuffle { n } => shuffle_all(&seqs, n, spec.seed, 0)?,
            Probe::Scope(_) => seqs,
        };
        let probed = rank_all(model, &probed_index, &probed_seqs, 1, &probed_opts)?;
        let first = |r: &[Vec<String>]| r.iter().map(|h| h[0].clone()).collect::<Vec<_>>();
        results.push(DatasetResult {
            name: name.to_string(),
            baseline: top1_accuracy(&first(&base), &gold)?,
            probed: top1_accuracy(&first(&probed), &gold)?,
        });
    }
    let baseline: Vec<f64> = results.iter().map(|r| r.baseline).collect();
    let probed: Vec<f64> = results.iter().map(|r| r.probed).collect();
    let (probe, param) = spec.describe();
    Ok(ProbeReport {
        probe: probe.to_string(),
        param,
        seed: spec.seed,
        avg_percent_change: avg_percent_change(&baseline, &probed)?,
        datasets: results,
    })
}
