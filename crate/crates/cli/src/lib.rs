//! The `dnmt` command line: training, translation, scoring, discourse path
//! inspection and synthetic corpus generation.
//!
//! Every command echoes its resolved configuration to stderr as a JSON line
//! and reports failures as `{"event":"error",...}` lines. Exit code 1 marks
//! bad input, 2 a failure of the run itself.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dnmt::checkpoint::{Checkpoint, CheckpointError};
use dnmt::datapipe::{document_input, generate_synthetic_corpus, load_corpus, save_corpus, CorpusError, SynthConfig};
use dnmt::discourse::DEFAULT_MAX_DEPTH;
use dnmt::metrics::{corpus_bleu, corpus_ter, round2, EvalPair, MetricsError};
use dnmt::model::{DecodeOptions, Model, ModelConfig, ModelError};
use dnmt::training::{train, TrainConfig, TrainError, VocabSet, FINAL_CHECKPOINT, MODEL_CONFIG_FILE};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub const THREADS_ENV: &str = "DNMT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Validation(_) => "validation",
            Self::Runtime(_) => "runtime",
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Corpus(c) => CliError::from_corpus(c),
            _ if e.is_validation() => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::from_corpus(&e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) | ModelError::Checkpoint(CheckpointError::Io(_)) => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        ModelError::from(e).into()
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl CliError {
    fn from_corpus(e: &CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Runtime(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dnmt", version, about = "Document-level translation with discourse-path embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints, vocabularies and a loss report.
    Train(TrainArgs),
    /// Translate a corpus document by document.
    Translate(TranslateArgs),
    /// Corpus BLEU and TER of a hypothesis file against a reference file.
    Score(ScoreArgs),
    /// Print the discourse path of every source token.
    Paths(PathsArgs),
    /// Write a synthetic corpus whose targets depend on discourse labels.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` training config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Checkpoint inside a training output directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Add-one smoothing for n-gram orders above one.
    #[arg(long)]
    pub smooth: bool,
}

#[derive(Debug, Args)]
pub struct PathsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub doc: Option<String>,
    #[arg(long, default_value_t = DEFAULT_MAX_DEPTH)]
    pub max_depth: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub docs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub sentences: usize,
    #[arg(long, default_value_t = 40)]
    pub vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 7)]
    pub max_len: usize,
    /// Comma-separated relation names.
    #[arg(long, value_delimiter = ',')]
    pub relations: Option<Vec<String>>,
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return 0;
        }
        Err(e) => {
            let err = CliError::Validation(e.to_string().trim_end().to_string());
            report_error(stderr, &err);
            return err.exit_code();
        }
    };
    let threads = std::env::var(THREADS_ENV).ok();
    let result = match &cli.command {
        Command::Train(a) => thread_cap(threads.as_deref()).and_then(|cap| run_train(a, cap, stdout, stderr)),
        Command::Translate(a) => run_translate(a, stdout, stderr),
        Command::Score(a) => run_score(a, stdout, stderr),
        Command::Paths(a) => run_paths(a, stdout, stderr),
        Command::Synth(a) => run_synth(a, stdout, stderr),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            report_error(stderr, &e);
            e.exit_code()
        }
    }
}

fn report_error(stderr: &mut dyn Write, e: &CliError) {
    let line = json!({ "event": "error", "kind": e.kind(), "exit": e.exit_code(), "message": e.to_string() });
    let _ = writeln!(stderr, "{line}");
}

fn echo(stderr: &mut dyn Write, command: &str, config: serde_json::Value) -> Result<()> {
    let line = json!({ "event": "config", "command": command, "config": config });
    writeln!(stderr, "{line}").map_err(|e| CliError::Runtime(e.to_string()))
}

fn emit(stdout: &mut dyn Write, text: &str) -> Result<()> {
    stdout.write_all(text.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Worker-thread cap from the environment; unset means no cap.
pub fn thread_cap(value: Option<&str>) -> Result<Option<usize>> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Validation(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Config file, then `--set` overrides, then the thread cap.
pub fn resolve_train_config(args: &TrainArgs, cap: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            TrainConfig::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    for o in &args.overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(key.trim(), value.trim()).map_err(CliError::Validation)?;
    }
    if let Some(cap) = cap {
        cfg.threads = cfg.threads.min(cap);
    }
    cfg.validate().map_err(CliError::Validation)?;
    Ok(cfg)
}

fn config_json(cfg: &TrainConfig) -> serde_json::Value {
    TrainConfig::KEYS
        .iter()
        .map(|&k| (k.to_string(), json!(cfg.get(k).unwrap_or_default())))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

pub fn run_train(args: &TrainArgs, cap: Option<usize>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let cfg = resolve_train_config(args, cap)?;
    echo(stderr, "train", config_json(&cfg))?;
    let corpus = load_corpus(&args.corpus)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let resolved = args.out.join("train.cfg");
    fs::write(&resolved, cfg.to_text()).map_err(|e| CliError::io(&resolved, e))?;
    let trained = train::<f32>(&corpus, &cfg, Some(&args.out), args.resume.as_deref())?;
    let last = trained.report.records.last();
    let summary = json!({
        "event": "done",
        "steps": trained.report.records.len(),
        "final_loss": last.map(|r| r.loss),
        "checkpoint": args.out.join(FINAL_CHECKPOINT),
    });
    emit(stdout, &format!("{summary}\n"))
}

/// Loads the model config, vocabularies and parameters that a training run
/// wrote next to `ckpt`.
pub fn load_trained(ckpt: &Path) -> Result<(Model<f32>, VocabSet)> {
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    let config = ModelConfig::load(&dir.join(MODEL_CONFIG_FILE))?;
    let vocabs = VocabSet::load(dir)?;
    for (what, expected, found) in [
        ("source vocabulary", config.src_vocab, vocabs.src.len()),
        ("target vocabulary", config.tgt_vocab, vocabs.tgt.len()),
        ("label vocabulary", config.labels, vocabs.labels.len()),
    ] {
        if expected != found {
            return Err(CliError::Validation(format!(
                "model config expects a {what} of {expected} entries, found {found}"
            )));
        }
    }
    let ckpt = Checkpoint::<f32>::load(ckpt)?;
    if let Some(han) = ckpt.meta.get("use_han").and_then(|v| v.as_bool()) {
        if han != config.use_han {
            return Err(CliError::Validation(format!(
                "checkpoint use_han = {han} but model config has use_han = {}",
                config.use_han
            )));
        }
    }
    Ok((Model::from_checkpoint(config, &ckpt)?, vocabs))
}

pub fn run_translate(args: &TranslateArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    if args.beam == 0 {
        return Err(CliError::Validation("--beam must be at least 1".into()));
    }
    let (model, vocabs) = load_trained(&args.ckpt)?;
    let opts = DecodeOptions {
        beam_size: args.beam,
        max_len: args.max_len,
        alpha: args.alpha,
    };
    echo(
        stderr,
        "translate",
        json!({ "model": model.config, "beam": opts.beam_size, "max_len": opts.max_len, "alpha": opts.alpha }),
    )?;
    let corpus = load_corpus(&args.corpus)?;
    let mut text = String::new();
    let mut sentences = 0;
    for (i, doc) in corpus.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        let input = document_input(doc, model.config.max_depth, &vocabs.src, &vocabs.labels);
        for t in model.translate_document(&input, &opts, |_, _| {})? {
            text.push_str(&vocabs.tgt.decode(&t.tokens).join(" "));
            text.push('\n');
            sentences += 1;
        }
    }
    fs::write(&args.out, text).map_err(|e| CliError::io(&args.out, e))?;
    let summary = json!({ "event": "done", "documents": corpus.len(), "sentences": sentences });
    emit(stdout, &format!("{summary}\n"))
}

#[derive(Debug, Serialize)]
pub struct Scores {
    pub bleu: f64,
    pub ter: f64,
    pub pairs: usize,
}

/// Pairs lines of two files; lines blank in both (document separators) are
/// skipped.
pub fn score_texts(hyp: &str, reference: &str, smooth: bool) -> Result<Scores> {
    let h: Vec<&str> = hyp.lines().collect();
    let r: Vec<&str> = reference.lines().collect();
    if h.len() != r.len() {
        return Err(CliError::Validation(format!(
            "hypothesis has {} lines but reference has {}",
            h.len(),
            r.len()
        )));
    }
    let pairs: Vec<EvalPair> = h
        .iter()
        .zip(&r)
        .filter(|(a, b)| !(a.trim().is_empty() && b.trim().is_empty()))
        .map(|(a, b)| EvalPair::new(a, b))
        .collect();
    Ok(Scores {
        bleu: round2(corpus_bleu(&pairs, 4, smooth)?),
        ter: round2(corpus_ter(&pairs)?),
        pairs: pairs.len(),
    })
}

pub fn run_score(args: &ScoreArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    echo(
        stderr,
        "score",
        json!({ "hyp": args.hyp, "ref": args.reference, "max_order": 4, "smooth": args.smooth }),
    )?;
    let hyp = fs::read_to_string(&args.hyp).map_err(|e| CliError::io(&args.hyp, e))?;
    let reference = fs::read_to_string(&args.reference).map_err(|e| CliError::io(&args.reference, e))?;
    let scores = score_texts(&hyp, &reference, args.smooth)?;
    let line = serde_json::to_string(&scores).map_err(|e| CliError::Runtime(e.to_string()))?;
    emit(stdout, &format!("{line}\n"))
}

/// One line of space-separated labels per token, a blank line after each
/// sentence, and a `# doc_id` header per document.
pub fn run_paths(args: &PathsArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    echo(stderr, "paths", json!({ "corpus": args.corpus, "doc": args.doc, "max_depth": args.max_depth }))?;
    let corpus = load_corpus(&args.corpus)?;
    let docs: Vec<_> = match &args.doc {
        Some(id) => {
            let found: Vec<_> = corpus.iter().filter(|d| &d.doc_id == id).collect();
            if found.is_empty() {
                return Err(CliError::Validation(format!("no document with id {id:?}")));
            }
            found
        }
        None => corpus.iter().collect(),
    };
    let mut text = String::new();
    for doc in docs {
        text.push_str(&format!("# {}\n", doc.doc_id));
        let paths = doc
            .tree
            .token_paths(doc.source_token_count(), args.max_depth)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let mut offset = 0;
        for sentence in &doc.src {
            for p in &paths[offset..offset + sentence.len()] {
                text.push_str(&p.labels().join(" "));
                text.push('\n');
            }
            text.push('\n');
            offset += sentence.len();
        }
    }
    emit(stdout, &text)
}

pub fn run_synth(args: &SynthArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let mut cfg = SynthConfig {
        seed: args.seed,
        docs: args.docs,
        sentences_per_doc: args.sentences,
        vocab_size: args.vocab,
        min_len: args.min_len,
        max_len: args.max_len,
        ..SynthConfig::default()
    };
    if let Some(r) = &args.relations {
        cfg.relations = r.clone();
    }
    echo(
        stderr,
        "synth",
        json!({
            "seed": cfg.seed,
            "docs": cfg.docs,
            "sentences": cfg.sentences_per_doc,
            "vocab": cfg.vocab_size,
            "min_len": cfg.min_len,
            "max_len": cfg.max_len,
            "relations": cfg.relations,
            "out": args.out,
        }),
    )?;
    let corpus = generate_synthetic_corpus(&cfg)?;
    save_corpus(&args.out, &corpus)?;
    let summary = json!({ "event": "done", "documents": corpus.len(), "out": args.out });
    emit(stdout, &format!("{summary}\n"))
}
