//! Loss, optimiser, learning-rate schedule and the two-stage training loop.
//!
//! Stage `sentence` trains the context-agnostic model. Stage `context` loads
//! those parameters, adds the hierarchical context layers and trains them,
//! by default with the sentence-level parameters frozen.

use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::datapipe::{build_vocab, make_examples, CorpusError, DocumentPair, Example, Side, Vocab, Vocabs, PAD};
use crate::discourse::{label_vocabulary, LabelVocab};
use crate::model::{Model, ModelConfig, ModelError};
use crate::nnet::Ctx;
use crate::tensor::{Gradients, ParamGroup, ParamStore, Result as TensorResult, Scalar, Tape, Tensor, TensorError, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";
pub const LABELS_FILE: &str = "labels.txt";
pub const MODEL_CONFIG_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "report.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss {loss} at {stage} step {step} (lr {lr:e}, batch of {examples} sentences / {tokens} tokens)")]
    NonFinite {
        stage: Stage,
        step: u64,
        loss: f64,
        lr: f64,
        examples: usize,
        tokens: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

impl TrainError {
    /// True for errors caused by bad inputs rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Config { .. } | Self::Corpus(_) | Self::Invalid(_) | Self::Model(ModelError::Config(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Sum over non-PAD positions of the smoothed negative log-likelihood
/// `(1−ε)·nll + ε·mean_v(−log p_v)`, and the number of such positions.
pub fn token_loss_sum<S: Scalar>(tape: &mut Tape<S>, logits: Var, gold: &[usize], smoothing: f64) -> TensorResult<(Var, usize)> {
    if tape.value(logits).rows() != gold.len() {
        return Err(TensorError::Shape {
            op: "cross_entropy_loss",
            a: tape.shape(logits).to_vec(),
            b: vec![gold.len()],
        });
    }
    let rows: Vec<usize> = (0..gold.len()).filter(|&i| gold[i] != PAD).collect();
    if rows.is_empty() {
        return Err(TensorError::EmptyInput { op: "cross_entropy_loss" });
    }
    let lp = tape.log_softmax_rows(logits)?;
    let (lp, ids) = if rows.len() == gold.len() {
        (lp, gold.to_vec())
    } else {
        (tape.gather_rows(lp, &rows)?, rows.iter().map(|&i| gold[i]).collect())
    };
    let picked = tape.pick(lp, &ids)?;
    let nll = tape.sum(picked)?;
    let nll = tape.scale(nll, S::lit(-(1.0 - smoothing)))?;
    let loss = if smoothing > 0.0 {
        let mean = tape.mean_cols(lp)?;
        let uniform = tape.sum(mean)?;
        let uniform = tape.scale(uniform, S::lit(-smoothing))?;
        tape.add(nll, uniform)?
    } else {
        nll
    };
    Ok((loss, rows.len()))
}

/// Mean smoothed negative log-likelihood over non-PAD positions.
pub fn cross_entropy_loss<S: Scalar>(tape: &mut Tape<S>, logits: Var, gold: &[usize], smoothing: f64) -> TensorResult<Var> {
    let (sum, n) = token_loss_sum(tape, logits, gold, smoothing)?;
    tape.scale(sum, S::lit(1.0 / n as f64))
}

/// `scale · d^−0.5 · min(step^−0.5, step · warmup^−1.5)`.
pub fn lr_at(step: u64, scale: f64, warmup: u64, dim: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    scale * (dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Bias-corrected Adam moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![S::zero(); p.value.len()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// Appends moments to `ckpt` as `adam.m.<name>` / `adam.v.<name>`.
    pub fn write_into(&self, store: &ParamStore<S>, ckpt: &mut Checkpoint<S>) {
        for (id, p) in store.iter() {
            let shape = p.value.shape().to_vec();
            for (kind, moments) in [("m", &self.m), ("v", &self.v)] {
                let t = Tensor::new(shape.clone(), moments[id.index()].clone()).expect("moment mirrors parameter");
                ckpt.tensors.push((format!("adam.{kind}.{}", p.name), t));
            }
        }
    }

    pub fn read_from(store: &ParamStore<S>, ckpt: &Checkpoint<S>, step: u64) -> Result<Self> {
        let mut adam = Self::new(store);
        adam.step = step;
        for (id, p) in store.iter() {
            for (kind, moments) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                let name = format!("adam.{kind}.{}", p.name);
                let t = ckpt.get(&name).ok_or(CheckpointError::Missing(name.clone()))?;
                if t.shape() != p.value.shape() {
                    return Err(CheckpointError::Shape {
                        name,
                        expected: p.value.shape().to_vec(),
                        found: t.shape().to_vec(),
                    }
                    .into());
                }
                moments[id.index()] = t.data().to_vec();
            }
        }
        Ok(adam)
    }
}

/// One Adam update of every trainable parameter that has a gradient.
pub fn adam_step<S: Scalar>(store: &mut ParamStore<S>, state: &mut Adam<S>, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let Some(grad) = p.grad.as_ref() else { continue };
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.as_f64();
            let mn = ADAM_BETA1 * mi.as_f64() + (1.0 - ADAM_BETA1) * g;
            let vn = ADAM_BETA2 * vi.as_f64() + (1.0 - ADAM_BETA2) * g * g;
            *mi = S::lit(mn);
            *vi = S::lit(vn);
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
            *w = S::lit(w.as_f64() - update);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sentence,
    Context,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sentence => "sentence",
            Self::Context => "context",
        })
    }
}

/// Which stages a run covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StagePlan {
    Sentence,
    Context,
    Both,
}

impl StagePlan {
    fn stages(self) -> &'static [Stage] {
        match self {
            Self::Sentence => &[Stage::Sentence],
            Self::Context => &[Stage::Context],
            Self::Both => &[Stage::Sentence, Stage::Context],
        }
    }
}

impl fmt::Display for StagePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sentence => "sentence",
            Self::Context => "context",
            Self::Both => "both",
        })
    }
}

impl FromStr for StagePlan {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sentence" => Ok(Self::Sentence),
            "context" => Ok(Self::Context),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown stage {s:?} (expected sentence, context or both)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: StagePlan,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub path_layers: usize,
    pub context_size: usize,
    pub max_depth: usize,
    pub use_ds: bool,
    pub context_grad: bool,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub steps: u64,
    pub context_steps: u64,
    pub batch_tokens: usize,
    pub context_batch_tokens: usize,
    pub lr_scale: f64,
    pub warmup: u64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub freeze_sentence: bool,
    /// Stage-1 checkpoint for a `context`-only run; vocabularies are read
    /// from the same directory.
    pub init_checkpoint: Option<PathBuf>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: StagePlan::Both,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            path_layers: 2,
            context_size: 3,
            max_depth: 16,
            use_ds: true,
            context_grad: false,
            src_vocab_size: 30000,
            tgt_vocab_size: 30000,
            steps: 2000,
            context_steps: 500,
            batch_tokens: 4096,
            context_batch_tokens: 1024,
            lr_scale: 1.0,
            warmup: 4000,
            label_smoothing: 0.1,
            dropout: 0.1,
            seed: 1,
            checkpoint_every: 0,
            log_every: 1,
            freeze_sentence: true,
            init_checkpoint: None,
            threads: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 27] = [
        "stage",
        "dim",
        "heads",
        "ffn_dim",
        "encoder_layers",
        "decoder_layers",
        "path_layers",
        "context_size",
        "max_depth",
        "use_ds",
        "context_grad",
        "src_vocab_size",
        "tgt_vocab_size",
        "steps",
        "context_steps",
        "batch_tokens",
        "context_batch_tokens",
        "lr_scale",
        "warmup",
        "label_smoothing",
        "dropout",
        "seed",
        "checkpoint_every",
        "log_every",
        "freeze_sentence",
        "init_checkpoint",
        "threads",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "stage" => self.stage = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "decoder_layers" => self.decoder_layers = parse(key, v)?,
            "path_layers" => self.path_layers = parse(key, v)?,
            "context_size" => self.context_size = parse(key, v)?,
            "max_depth" => self.max_depth = parse(key, v)?,
            "use_ds" => self.use_ds = parse(key, v)?,
            "context_grad" => self.context_grad = parse(key, v)?,
            "src_vocab_size" => self.src_vocab_size = parse(key, v)?,
            "tgt_vocab_size" => self.tgt_vocab_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "context_steps" => self.context_steps = parse(key, v)?,
            "batch_tokens" => self.batch_tokens = parse(key, v)?,
            "context_batch_tokens" => self.context_batch_tokens = parse(key, v)?,
            "lr_scale" => self.lr_scale = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "label_smoothing" => self.label_smoothing = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "freeze_sentence" => self.freeze_sentence = parse(key, v)?,
            "init_checkpoint" => self.init_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "threads" => self.threads = parse(key, v)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "stage" => self.stage.to_string(),
            "dim" => self.dim.to_string(),
            "heads" => self.heads.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "encoder_layers" => self.encoder_layers.to_string(),
            "decoder_layers" => self.decoder_layers.to_string(),
            "path_layers" => self.path_layers.to_string(),
            "context_size" => self.context_size.to_string(),
            "max_depth" => self.max_depth.to_string(),
            "use_ds" => self.use_ds.to_string(),
            "context_grad" => self.context_grad.to_string(),
            "src_vocab_size" => self.src_vocab_size.to_string(),
            "tgt_vocab_size" => self.tgt_vocab_size.to_string(),
            "steps" => self.steps.to_string(),
            "context_steps" => self.context_steps.to_string(),
            "batch_tokens" => self.batch_tokens.to_string(),
            "context_batch_tokens" => self.context_batch_tokens.to_string(),
            "lr_scale" => self.lr_scale.to_string(),
            "warmup" => self.warmup.to_string(),
            "label_smoothing" => self.label_smoothing.to_string(),
            "dropout" => self.dropout.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "log_every" => self.log_every.to_string(),
            "freeze_sentence" => self.freeze_sentence.to_string(),
            "init_checkpoint" => self
                .init_checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "threads" => self.threads.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::Config {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(k, v).map_err(|msg| TrainError::Config { line: i + 1, msg })?;
        }
        cfg.validate().map_err(|msg| TrainError::Config { line: 0, msg })?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.warmup < 1 {
            return Err("warmup must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err("label_smoothing must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must be in [0, 1)".into());
        }
        if self.batch_tokens == 0 || self.context_batch_tokens == 0 {
            return Err("batch token budgets must be positive".into());
        }
        if self.log_every == 0 {
            return Err("log_every must be at least 1".into());
        }
        if self.stage == StagePlan::Context && self.init_checkpoint.is_none() {
            return Err("stage = context needs init_checkpoint".into());
        }
        Ok(())
    }

    pub fn model_config(&self, vocabs: Vocabs<'_>, use_han: bool) -> ModelConfig {
        ModelConfig {
            src_vocab: vocabs.src.len(),
            tgt_vocab: vocabs.tgt.len(),
            labels: vocabs.labels.len(),
            label_pad: vocabs.labels.pad(),
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            path_layers: self.path_layers,
            context_size: self.context_size,
            max_depth: self.max_depth,
            use_ds: self.use_ds,
            use_han,
            context_grad: self.context_grad,
            seed: self.seed,
        }
    }

    fn stage_steps(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Sentence => self.steps,
            Stage::Context => self.context_steps,
        }
    }

    fn stage_budget(&self, stage: Stage) -> usize {
        match stage {
            Stage::Sentence => self.batch_tokens,
            Stage::Context => self.context_batch_tokens,
        }
    }
}

/// Tokens an example contributes to a batch: source tokens plus predicted
/// target tokens.
pub fn example_tokens(e: &Example) -> usize {
    e.input.current.tokens.len() + e.target.len() - 1
}

/// Packs consecutive examples into batches of at most `budget` tokens.
pub fn token_batches(examples: &[Example], budget: usize) -> Result<Vec<Vec<usize>>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for (i, e) in examples.iter().enumerate() {
        let n = example_tokens(e);
        if n > budget {
            return Err(TrainError::Invalid(format!(
                "sentence {i} has {n} tokens, more than the batch budget of {budget}"
            )));
        }
        if used + n > budget {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    /// Mean loss per predicted target token.
    pub loss: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self, stage: Stage) -> Vec<f64> {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect()
    }
}

/// Vocabularies built from (or loaded for) a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabSet {
    pub src: Vocab,
    pub tgt: Vocab,
    pub labels: LabelVocab,
}

impl VocabSet {
    pub fn build(corpus: &[DocumentPair], cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            src: build_vocab(corpus, Side::Source, cfg.src_vocab_size)?,
            tgt: build_vocab(corpus, Side::Target, cfg.tgt_vocab_size)?,
            labels: label_vocabulary(corpus.iter().map(|d| &d.tree)),
        })
    }

    pub fn as_refs(&self) -> Vocabs<'_> {
        Vocabs {
            src: &self.src,
            tgt: &self.tgt,
            labels: &self.labels,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.src.save(&dir.join(SRC_VOCAB_FILE))?;
        self.tgt.save(&dir.join(TGT_VOCAB_FILE))?;
        self.labels.save(&dir.join(LABELS_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let labels = LabelVocab::load(&dir.join(LABELS_FILE)).map_err(|e| TrainError::Invalid(format!("labels: {e}")))?;
        Ok(Self {
            src: Vocab::load(&dir.join(SRC_VOCAB_FILE))?,
            tgt: Vocab::load(&dir.join(TGT_VOCAB_FILE))?,
            labels,
        })
    }

    pub fn examples(&self, corpus: &[DocumentPair], k: usize, max_depth: usize) -> Vec<Example> {
        corpus
            .iter()
            .flat_map(|d| make_examples(d, k, max_depth, self.as_refs()))
            .collect()
    }
}

/// Output of a finished run.
pub struct Trained<S: Scalar> {
    pub model: Model<S>,
    pub vocabs: VocabSet,
    pub report: TrainReport,
}

fn dropout_rng(seed: u64, stage: Stage, step: u64, example: usize) -> ChaCha8Rng {
    let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
    for x in [stage as u64 + 1, step, example as u64] {
        s = s.wrapping_mul(0x0100_0000_01b3) ^ x.wrapping_add(0x632b_e59b_d9b4_e019);
        s ^= s >> 29;
    }
    ChaCha8Rng::seed_from_u64(s)
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    out: Option<&'a Path>,
    report: TrainReport,
    log: Option<File>,
}

impl Run<'_> {
    fn save<S: Scalar>(&mut self, model: &Model<S>, adam: &Adam<S>, stage: Stage, name: &str) -> Result<()> {
        let Some(dir) = self.out else { return Ok(()) };
        let mut ckpt = model.checkpoint();
        adam.write_into(&model.store, &mut ckpt);
        ckpt.meta = serde_json::json!({
            "stage": stage,
            "step": adam.step,
            "use_han": model.config.use_han,
        });
        let path = dir.join(name);
        ckpt.save(&path)?;
        self.report.checkpoints.push(path);
        Ok(())
    }

    fn log(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(f) = &mut self.log {
            writeln!(f, "{}", serde_json::to_string(&rec).expect("record serialises"))?;
        }
        self.report.records.push(rec);
        Ok(())
    }

    /// Trains `model` for the remaining steps of `stage`.
    fn stage<S: Scalar>(&mut self, model: &mut Model<S>, adam: &mut Adam<S>, examples: &[Example], stage: Stage) -> Result<()> {
        let cfg = self.cfg;
        let total = cfg.stage_steps(stage);
        let batches = token_batches(examples, cfg.stage_budget(stage))?;
        let frozen_context = model.han.is_some()
            && !model.config.context_grad
            && model.store.iter().all(|(_, p)| p.group != ParamGroup::Sentence || !p.trainable);
        let mut cache: Vec<Option<Vec<Tensor<S>>>> = vec![None; examples.len()];
        let mut order: Vec<usize> = Vec::new();
        while adam.step < total {
            let step = adam.step + 1;
            let epoch = (step - 1) / batches.len() as u64;
            let pos = ((step - 1) % batches.len() as u64) as usize;
            if pos == 0 || order.is_empty() {
                order = (0..batches.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch).wrapping_mul(31) ^ stage as u64));
            }
            let batch = &batches[order[pos]];
            let started = Instant::now();
            let target_tokens: usize = batch.iter().map(|&i| examples[i].target.len() - 1).sum();
            if frozen_context {
                for &i in batch {
                    if cache[i].is_none() {
                        cache[i] = Some(model.context_states(&examples[i].input)?);
                    }
                }
            }
            let states: Vec<Option<&[Tensor<S>]>> = batch.iter().map(|&i| cache[i].as_deref()).collect();
            let results = batch_gradients(model, examples, batch, &states, target_tokens, cfg, stage, step)?;
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                model.store.accumulate(g);
            }
            let lr = lr_at(step, cfg.lr_scale, cfg.warmup, model.config.dim);
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    stage,
                    step,
                    loss,
                    lr,
                    examples: batch.len(),
                    tokens: batch.iter().map(|&i| example_tokens(&examples[i])).sum(),
                });
            }
            adam_step(&mut model.store, adam, lr);
            model.store.zero_grads();
            if step.is_multiple_of(cfg.log_every) || step == total {
                let secs = started.elapsed().as_secs_f64().max(1e-9);
                let tokens: usize = batch.iter().map(|&i| example_tokens(&examples[i])).sum();
                self.log(StepRecord {
                    step,
                    stage,
                    lr,
                    loss,
                    tokens_per_sec: tokens as f64 / secs,
                })?;
            }
            if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) && step < total {
                self.save(model, adam, stage, &format!("{stage}-step{step:06}.ckpt"))?;
            }
        }
        self.save(model, adam, stage, &format!("{stage}.ckpt"))
    }
}

type ExampleGrad<S> = (f64, Gradients<S>);

/// Per-example `(loss, gradients)` for one batch, each loss already divided
/// by the batch's target token count. Examples are spread over up to
/// `cfg.threads` threads; results come back in batch order.
#[allow(clippy::too_many_arguments)]
fn batch_gradients<S: Scalar>(
    model: &Model<S>,
    examples: &[Example],
    batch: &[usize],
    states: &[Option<&[Tensor<S>]>],
    target_tokens: usize,
    cfg: &TrainConfig,
    stage: Stage,
    step: u64,
) -> Result<Vec<ExampleGrad<S>>> {
    let one = |k: usize| -> Result<ExampleGrad<S>> {
        let i = batch[k];
        let e = &examples[i];
        let mut tape = Tape::new();
        let mut ctx = Ctx::train(cfg.dropout, dropout_rng(cfg.seed, stage, step, i));
        let logits = model.logits_with_states(&mut tape, &e.input, states[k], &e.target, &mut ctx)?;
        let (sum, _) = token_loss_sum(&mut tape, logits, &e.target[1..], cfg.label_smoothing)?;
        let loss = tape.scale(sum, S::lit(1.0 / target_tokens as f64))?;
        let value = tape.value(loss).item().as_f64();
        Ok((value, tape.backward(loss)?))
    };
    let threads = cfg.threads.clamp(1, batch.len().max(1));
    if threads == 1 {
        return (0..batch.len()).map(one).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    let parts: Vec<Result<Vec<ExampleGrad<S>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..batch.len())
            .step_by(chunk)
            .map(|start| {
                let one = &one;
                s.spawn(move || (start..(start + chunk).min(batch.len())).map(one).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(batch.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Runs the configured stages on `corpus`. With `out`, vocabularies, model
/// config, checkpoints and a JSON-lines report are written there. `resume`
/// continues from a checkpoint written by an earlier run with the same
/// config and corpus.
pub fn train<S: Scalar>(corpus: &[DocumentPair], cfg: &TrainConfig, out: Option<&Path>, resume: Option<&Path>) -> Result<Trained<S>> {
    cfg.validate().map_err(TrainError::Invalid)?;
    if corpus.is_empty() {
        return Err(TrainError::Invalid("training corpus is empty".into()));
    }
    let vocabs = match (&cfg.init_checkpoint, cfg.stage) {
        (Some(init), StagePlan::Context) => VocabSet::load(init.parent().unwrap_or(Path::new(".")))?,
        _ => VocabSet::build(corpus, cfg)?,
    };
    let examples = vocabs.examples(corpus, cfg.context_size, cfg.max_depth);

    let log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            vocabs.save(dir)?;
            let path = dir.join(REPORT_FILE);
            Some(if resume.is_some() {
                fs::OpenOptions::new().create(true).append(true).open(path)?
            } else {
                File::create(path)?
            })
        }
        None => None,
    };
    let mut run = Run {
        cfg,
        out,
        report: TrainReport::default(),
        log,
    };

    let resumed = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<S>::load(path)?;
            let stage = match ckpt.meta.get("stage").and_then(|v| v.as_str()) {
                Some("sentence") => Stage::Sentence,
                Some("context") => Stage::Context,
                _ => return Err(TrainError::Invalid("checkpoint lacks a training stage".into())),
            };
            let step = ckpt.meta.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
            Some((ckpt, stage, step))
        }
        None => None,
    };

    let stages = cfg.stage.stages();
    let mut model: Option<Model<S>> = None;
    for &stage in stages {
        if let Some((_, rs, _)) = &resumed {
            if stage == Stage::Sentence && *rs == Stage::Context {
                continue;
            }
        }
        let use_han = stage == Stage::Context;
        let mut m = Model::<S>::new(cfg.model_config(vocabs.as_refs(), use_han))?;
        let mut adam = None;
        match (&resumed, stage) {
            (Some((ckpt, rs, step)), _) if *rs == stage => {
                ckpt.restore_into(&mut m.store, true, Some("adam."))?;
                adam = Some(Adam::read_from(&m.store, ckpt, *step)?);
            }
            _ if stage == Stage::Context => {
                let init = match (&model, &cfg.init_checkpoint) {
                    (Some(prev), _) => prev.checkpoint(),
                    (None, Some(path)) => Checkpoint::load(path)?,
                    (None, None) => return Err(TrainError::Invalid("context stage needs a sentence-level model".into())),
                };
                let loaded = init.restore_into(&mut m.store, false, Some("adam."))?;
                let expected = m.store.iter().filter(|(_, p)| p.group == ParamGroup::Sentence).count();
                if loaded != expected {
                    return Err(TrainError::Invalid(format!(
                        "sentence-level checkpoint provides {loaded} of {expected} parameters"
                    )));
                }
            }
            _ => {}
        }
        if stage == Stage::Context && cfg.freeze_sentence {
            m.store.set_trainable(ParamGroup::Sentence, false);
        }
        let mut adam = adam.unwrap_or_else(|| Adam::new(&m.store));
        if let Some(dir) = out {
            m.config.save(&dir.join(MODEL_CONFIG_FILE))?;
        }
        run.stage(&mut m, &mut adam, &examples, stage)?;
        model = Some(m);
    }
    let model = model.expect("at least one stage ran");
    if let Some(dir) = out {
        let mut ckpt = model.checkpoint();
        ckpt.meta = serde_json::json!({ "use_han": model.config.use_han });
        ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(Trained {
        model,
        vocabs,
        report: run.report,
    })
}

/// Mean per-token loss (no smoothing, no dropout) of `model` on `examples`.
pub fn evaluate<S: Scalar>(model: &Model<S>, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for e in examples {
        total -= model.sentence_log_prob(&e.input, &e.target)?;
        tokens += e.target.len() - 1;
    }
    Ok(total / tokens.max(1) as f64)
}
