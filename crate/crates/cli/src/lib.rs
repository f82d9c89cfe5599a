//! Command-line front end: corpus generation, training, evaluation,
//! probing, indexing, linking and an encoding benchmark.
//!
//! Machine-readable results go to stdout as JSON, progress to stderr.
//! Exit codes: 0 success, 2 usage or configuration, 3 data, 4 internal.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rescnn::config::RunConfig;
use rescnn::data::checkpoint::{fingerprint, write_checkpoint};
use rescnn::data::{
    generate_synthetic_corpus, load_checkpoint, load_dataset, load_embeddings, load_kb, Checkpoint, KnowledgeBase,
    Split,
};
use rescnn::index::{build_index, link_batch, NameIndex};
use rescnn::model::{encode_texts, EncodeOptions, Encoder, Model, ModelKind};
use rescnn::probes::{evaluate, run_probe, Probe, ProbeSpec};
use rescnn::tokenizer::Vocab;
use rescnn::training::train_new_model;
use rescnn::transformer::{ClsExemption, ScopeOptions};
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Debug, Parser)]
#[command(name = "rescnn", version, about = "Residual CNN dual-encoder entity linking")]
pub struct Cli {
    /// Worker threads for encoding and index scans (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic KB, train/dev/test splits and a vocabulary.
    Synth(SynthArgs),
    /// Train an encoder and write a checkpoint.
    Train(TrainArgs),
    /// Top-1 (and top-k) accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the word-order shuffle or attention-scope probe.
    Probe(ProbeArgs),
    /// Encode every KB name into a persistent index.
    Index(IndexArgs),
    /// Link mentions given as arguments, or one per stdin line.
    Link(LinkArgs),
    /// Measure name-encoding throughput.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub entities: usize,
    #[arg(long, default_value_t = 3)]
    pub variants: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Rescnn,
    Transformer,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    /// Wordpiece vocabulary, one token per line.
    #[arg(long)]
    pub vocab: PathBuf,
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides `train.seed`; also seeds parameter initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pretrained EMB1 embedding table for the ResCNN.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log (default: `<out>.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Also report top-k accuracy.
    #[arg(long)]
    pub k: Option<usize>,
    /// Prebuilt index to use instead of encoding the KB.
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProbeKind {
    Shuffle,
    Scope,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    /// Evaluation set; repeat for several. Named after the file stem.
    #[arg(long, required = true)]
    pub dataset: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub probe: ProbeKind,
    /// N-gram size for the shuffle probe.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Odd attention window for the scope probe.
    #[arg(long, default_value_t = 3)]
    pub w: usize,
    /// Let every position attend to [CLS] at the last layer as well.
    #[arg(long)]
    pub cls_column: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Prebuilt index; otherwise `--kb` is encoded on the fly.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Mentions to link; read from stdin when absent.
    pub mentions: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rescnn::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use rescnn::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::Unsupported(_) => 2,
                E::Data(_) | E::Io { .. } | E::Format(_) | E::Vocab(_) => 3,
                E::Tensor(_) | E::Invalid(_) => 4,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn emit(value: serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{value}").map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Index(a) => cmd_index(a),
        Command::Link(a) => cmd_link(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let corpus = generate_synthetic_corpus(a.entities, a.variants, a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::Io(format!("{}: {e}", a.out.display())))?;
    write_file(&a.out.join("kb.tsv"), corpus.kb.to_tsv())?;
    for ds in [&corpus.train, &corpus.dev, &corpus.test] {
        write_file(&a.out.join(format!("{}.tsv", ds.split)), ds.to_tsv())?;
    }
    write_file(&a.out.join("vocab.txt"), corpus.vocab.to_text())?;
    emit(json!({
        "out": a.out.display().to_string(),
        "entities": corpus.kb.len(),
        "names": corpus.kb.name_count(),
        "train": corpus.train.len(),
        "dev": corpus.dev.len(),
        "test": corpus.test.len(),
        "vocab": corpus.vocab.len(),
    }))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = parse_overrides(&a.overrides)?;
    if let Some(seed) = a.seed {
        overrides.push(("train.seed".into(), seed.to_string()));
    }
    let cfg = RunConfig::from_text_with_overrides(&text, &overrides)?;
    let canonical = cfg.canonical_text();
    let config_hash = hex(&Sha256::digest(canonical.as_bytes()));
    eprintln!("effective config (sha256 {config_hash}):\n{canonical}");

    let kb = load_kb(&a.kb)?;
    let train_set = load_dataset(&a.train, Split::Train, Some(&kb))?;
    let vocab = Vocab::load(&a.vocab).map_err(rescnn::Error::from)?;
    let seed = cfg.train.seed;
    let kind = match a.model {
        ModelArg::Rescnn => ModelKind::ResCnn,
        ModelArg::Transformer => ModelKind::Transformer,
    };
    let table = a.embeddings.as_ref().map(load_embeddings).transpose()?;
    if kind == ModelKind::ResCnn && table.is_none() && cfg.rescnn.freeze_embeddings {
        eprintln!("note: no --embeddings given; the randomly initialized table stays frozen");
    }

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = fs::File::create(&log_path).map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?;
    let mut log_error = None;
    let (model, logs) = train_new_model(kind, &cfg, vocab, table, &train_set, &kb, |entry| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  {:.1}s",
            entry.epoch, entry.mean_loss, entry.wall_seconds
        );
        let line = serde_json::to_string(entry).expect("log entries serialize");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(CliError::Io(format!("{}: {e}", log_path.display())));
    }

    let bytes = write_checkpoint(&Checkpoint::from_model(&model, Some(seed))?)?;
    write_file(&a.out, &bytes)?;
    emit(json!({
        "checkpoint": a.out.display().to_string(),
        "fingerprint": hex(&fingerprint(&bytes)),
        "model": model.kind().name(),
        "seed": seed,
        "config_sha256": config_hash,
        "epochs": logs.len(),
        "final_loss": logs.last().map(|l| l.mean_loss),
        "log": log_path.display().to_string(),
    }))
}

fn load_model(path: &Path) -> Result<(Model, [u8; 32])> {
    let (ckpt, fp) = load_checkpoint(path)?;
    Ok((ckpt.into_model()?, fp))
}

/// The prebuilt index at `path`, checked against the checkpoint, or a fresh
/// one built from the KB.
fn index_for(model: &dyn Encoder, fp: [u8; 32], index: Option<&Path>, kb: Option<&KnowledgeBase>) -> Result<NameIndex> {
    match (index, kb) {
        (Some(path), _) => {
            let idx = NameIndex::load(path)?;
            if idx.fingerprint() != &fp {
                return Err(rescnn::Error::Data(format!(
                    "{} was built with a different checkpoint ({} vs {})",
                    path.display(),
                    hex(idx.fingerprint()),
                    hex(&fp)
                ))
                .into());
            }
            if idx.dim() != model.output_dim() {
                return Err(rescnn::Error::Data("index width does not match the model".into()).into());
            }
            Ok(idx)
        }
        (None, Some(kb)) => Ok(build_index(model, kb, fp, &EncodeOptions::default())?),
        (None, None) => Err(CliError::Usage("give --index or --kb".into())),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.k == Some(0) {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let (model, fp) = load_model(&a.ckpt)?;
    let kb = load_kb(&a.kb)?;
    let dataset = load_dataset(&a.dataset, Split::Test, Some(&kb))?;
    let index = index_for(model.encoder(), fp, a.index.as_deref(), Some(&kb))?;
    let report = evaluate(model.encoder(), &index, &dataset, a.k)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["dataset"] = json!(a.dataset.display().to_string());
    value["fingerprint"] = json!(hex(&fp));
    emit(value)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let probe = match a.probe {
        ProbeKind::Shuffle => Probe::Shuffle { n: a.n },
        ProbeKind::Scope => Probe::Scope(ScopeOptions {
            window: a.w,
            cls_exemption: if a.cls_column {
                ClsExemption::RowAndColumn
            } else {
                ClsExemption::Row
            },
        }),
    };
    let spec = ProbeSpec { probe, seed: a.seed };
    spec.validate()?;
    let (model, fp) = load_model(&a.ckpt)?;
    if matches!(probe, Probe::Scope(_)) && model.kind() != ModelKind::Transformer {
        return Err(rescnn::Error::Unsupported(format!(
            "--probe scope restricts self-attention windows; {} is a {} checkpoint with no attention to restrict",
            a.ckpt.display(),
            model.kind().name()
        ))
        .into());
    }
    let kb = load_kb(&a.kb)?;
    let sets = a
        .dataset
        .iter()
        .map(|p| Ok((dataset_name(p), load_dataset(p, Split::Test, Some(&kb))?)))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(&str, &rescnn::data::Dataset)> = sets.iter().map(|(n, d)| (n.as_str(), d)).collect();
    let report = run_probe(model.encoder(), &kb, &named, &spec)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["fingerprint"] = json!(hex(&fp));
    emit(value)
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let (model, fp) = load_model(&a.ckpt)?;
    let kb = load_kb(&a.kb)?;
    let index = build_index(model.encoder(), &kb, fp, &EncodeOptions::default())?;
    index.save(&a.out)?;
    emit(json!({
        "index": a.out.display().to_string(),
        "rows": index.len(),
        "dim": index.dim(),
        "fingerprint": hex(&fp),
    }))
}

fn cmd_link(a: LinkArgs) -> Result<()> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let (model, fp) = load_model(&a.ckpt)?;
    let kb = a.kb.as_ref().map(load_kb).transpose()?;
    let index = index_for(model.encoder(), fp, a.index.as_deref(), kb.as_ref())?;
    let mentions = if a.mentions.is_empty() {
        std::io::stdin()
            .lock()
            .lines()
            .map(|l| l.map(|l| l.trim_end_matches('\r').to_string()))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| CliError::Io(format!("stdin: {e}")))?
    } else {
        a.mentions.clone()
    };
    if let Some(i) = mentions.iter().position(|m| m.trim().is_empty()) {
        return Err(rescnn::Error::Data(format!("mention {} is empty", i + 1)).into());
    }
    let results = link_batch(&mentions, model.encoder(), &index, a.k, &EncodeOptions::default())?;
    for (mention, hits) in mentions.iter().zip(results) {
        let hits: Vec<_> = hits
            .iter()
            .map(|h| json!({"entity": h.entity, "name": h.name, "score": h.score}))
            .collect();
        emit(json!({"mention": mention, "results": hits}))?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (model, _) = load_model(&a.ckpt)?;
    let kb = load_kb(&a.kb)?;
    let names: Vec<&str> = kb.names().map(|(n, _)| n).collect();
    let repeat = a.repeat.max(1);
    let started = Instant::now();
    for _ in 0..repeat {
        encode_texts(model.encoder(), &names, &EncodeOptions::default())?;
    }
    let seconds = started.elapsed().as_secs_f64();
    let total = names.len() * repeat;
    emit(json!({
        "model": model.kind().name(),
        "names": total,
        "seconds": seconds,
        "names_per_second": total as f64 / seconds,
        "threads": rayon::current_num_threads(),
    }))
}
