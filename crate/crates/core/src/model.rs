//! The document translation model: discourse-enriched sentence encoder,
//! hierarchical context attention and a Transformer decoder, plus scoring
//! and beam-search decoding.

use std::cmp::Ordering;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::datapipe::{BOS, EOS};
use crate::han::{apply_context, HanParams};
use crate::nnet::{embed_tokens, transformer_decode, transformer_encode, Ctx, DecoderStack, EncoderStack, Init, StackShape};
use crate::path_encoder::{enrich_embeddings, token_path_embeddings, PathEncoderParams};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("model config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model config json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("document has {src} source sentences but {tgt} targets")]
    SentenceCount { src: usize, tgt: usize },
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub labels: usize,
    pub label_pad: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub path_layers: usize,
    pub context_size: usize,
    pub max_depth: usize,
    pub use_ds: bool,
    pub use_han: bool,
    /// Backpropagate through the encodings of context sentences.
    #[serde(default)]
    pub context_grad: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            labels: 0,
            label_pad: 0,
            dim: 512,
            heads: 8,
            ffn_dim: 2048,
            encoder_layers: 6,
            decoder_layers: 6,
            path_layers: 2,
            context_size: 3,
            max_depth: 16,
            use_ds: true,
            use_han: true,
            context_grad: false,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.src_vocab <= EOS || self.tgt_vocab <= EOS {
            return fail("vocabularies must include the reserved tokens");
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return fail("dim must be positive and even");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail("dim must be divisible by heads");
        }
        if self.ffn_dim == 0 {
            return fail("ffn_dim must be positive");
        }
        if self.max_depth == 0 {
            return fail("max_depth must be at least 1");
        }
        if self.use_ds && (self.labels == 0 || self.label_pad >= self.labels) {
            return fail("discourse paths need a label vocabulary containing the pad label");
        }
        Ok(())
    }

    fn stack(&self, layers: usize) -> StackShape {
        StackShape {
            layers,
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }
}

/// A source sentence: token ids and one label-id path per token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceSentence {
    pub tokens: Vec<usize>,
    pub paths: Vec<Vec<usize>>,
}

/// The current sentence with its preceding context sentences, oldest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SentenceInput {
    pub current: SourceSentence,
    pub context: Vec<SourceSentence>,
}

/// Source side of a whole document.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DocumentInput {
    pub sentences: Vec<SourceSentence>,
}

/// Indices of the context sentences for sentence `j`.
pub fn context_window(j: usize, k: usize) -> Range<usize> {
    j.saturating_sub(k)..j
}

impl DocumentInput {
    /// Input for sentence `j` with up to `k` preceding sentences. Empty
    /// sentences are left out of the context.
    pub fn sentence_input(&self, j: usize, k: usize) -> SentenceInput {
        SentenceInput {
            current: self.sentences[j].clone(),
            context: self.sentences[context_window(j, k)]
                .iter()
                .filter(|s| !s.tokens.is_empty())
                .cloned()
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam_size: usize,
    /// Defaults to `2 · source length + 10`.
    pub max_len: Option<usize>,
    pub alpha: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: None,
            alpha: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    /// Output ids without BOS/EOS.
    pub tokens: Vec<usize>,
    /// Log-probability divided by `length^alpha`, length counting EOS.
    pub score: f64,
    /// False when `max_len` was reached before EOS.
    pub finished: bool,
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    pub encoder: EncoderStack,
    pub decoder: DecoderStack,
    pub path: Option<PathEncoderParams>,
    pub han: Option<HanParams>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let sentence = |p: &str| Init::new(p, seed, ParamGroup::Sentence);
        let d = config.dim;
        let src_embed = sentence("src_embed").fan_in(&mut store, "table", &[config.src_vocab, d], d);
        let tgt_embed = sentence("tgt_embed").fan_in(&mut store, "table", &[config.tgt_vocab, d], d);
        let encoder = EncoderStack::new(&mut store, &sentence("encoder"), config.stack(config.encoder_layers))?;
        let decoder = DecoderStack::new(&mut store, &sentence("decoder"), config.stack(config.decoder_layers))?;
        let path = if config.use_ds {
            Some(PathEncoderParams::new(
                &mut store,
                &sentence("path"),
                config.labels,
                config.label_pad,
                config.stack(config.path_layers),
            )?)
        } else {
            None
        };
        let han = if config.use_han {
            let init = Init::new("han", seed, ParamGroup::Context);
            Some(HanParams::new(&mut store, &init, d, config.heads, config.ffn_dim)?)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            path,
            han,
        })
    }

    /// Word embeddings, plus discourse embeddings when enabled.
    pub fn embed_source(&self, tape: &mut Tape<S>, s: &SourceSentence, ctx: &mut Ctx) -> Result<Var> {
        let x = embed_tokens(tape, &self.store, self.src_embed, &s.tokens)?;
        match &self.path {
            Some(p) => {
                if s.paths.len() != s.tokens.len() {
                    return Err(ModelError::Input(format!(
                        "{} tokens but {} discourse paths",
                        s.tokens.len(),
                        s.paths.len()
                    )));
                }
                let d = token_path_embeddings(tape, &self.store, p, &s.paths, ctx)?;
                Ok(enrich_embeddings(tape, x, d)?)
            }
            None => Ok(x),
        }
    }

    /// Sentence encoder output without document context.
    pub fn encode_sentence(&self, tape: &mut Tape<S>, s: &SourceSentence, ctx: &mut Ctx) -> Result<Var> {
        if s.tokens.is_empty() {
            return Err(ModelError::Input("empty source sentence".into()));
        }
        let x = self.embed_source(tape, s, ctx)?;
        Ok(transformer_encode(tape, &self.store, &self.encoder, x, None, ctx)?)
    }

    /// Encodings of the context sentences, computed without gradient.
    pub fn context_states(&self, input: &SentenceInput) -> Result<Vec<Tensor<S>>> {
        if self.han.is_none() {
            return Ok(Vec::new());
        }
        input
            .context
            .iter()
            .map(|s| {
                let mut tape = Tape::no_grad();
                let h = self.encode_sentence(&mut tape, s, &mut Ctx::eval())?;
                Ok(tape.value(h).clone())
            })
            .collect()
    }

    /// Final encoder output for the current sentence.
    pub fn encode(&self, tape: &mut Tape<S>, input: &SentenceInput, ctx: &mut Ctx) -> Result<Var> {
        if self.config.context_grad {
            self.encode_with_states(tape, input, None, ctx)
        } else {
            let states = self.context_states(input)?;
            self.encode_with_states(tape, input, Some(&states), ctx)
        }
    }

    /// As [`Model::encode`], taking precomputed context encodings. With
    /// `None` the context sentences are encoded on `tape`.
    pub fn encode_with_states(
        &self,
        tape: &mut Tape<S>,
        input: &SentenceInput,
        states: Option<&[Tensor<S>]>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let h = self.encode_sentence(tape, &input.current, ctx)?;
        let Some(han) = &self.han else {
            return Ok(h);
        };
        let contexts = match states {
            Some(states) => states.iter().map(|t| tape.constant(t.clone())).collect(),
            None => input
                .context
                .iter()
                .map(|s| self.encode_sentence(tape, s, ctx))
                .collect::<Result<Vec<_>>>()?,
        };
        ctx.record("encoder.h", h);
        let out = apply_context(tape, &self.store, han, h, &contexts, ctx)?;
        Ok(out)
    }

    /// Next-token logits `[t×V]` for every prefix position.
    pub fn decoder_logits(&self, tape: &mut Tape<S>, memory: Var, prefix: &[usize], ctx: &mut Ctx) -> Result<Var> {
        let y = embed_tokens(tape, &self.store, self.tgt_embed, prefix)?;
        let h = transformer_decode(tape, &self.store, &self.decoder, y, memory, ctx)?;
        let table = tape.param(&self.store, self.tgt_embed);
        Ok(tape.matmul_t(h, table)?)
    }

    /// Teacher-forced logits predicting `target[1..]` from `target[..len-1]`.
    pub fn logits(&self, tape: &mut Tape<S>, input: &SentenceInput, target: &[usize], ctx: &mut Ctx) -> Result<Var> {
        self.logits_with_states(tape, input, None, target, ctx)
    }

    /// As [`Model::logits`] with optional cached context encodings.
    pub fn logits_with_states(
        &self,
        tape: &mut Tape<S>,
        input: &SentenceInput,
        states: Option<&[Tensor<S>]>,
        target: &[usize],
        ctx: &mut Ctx,
    ) -> Result<Var> {
        check_target(target)?;
        let memory = match states {
            Some(s) => self.encode_with_states(tape, input, Some(s), ctx)?,
            None => self.encode(tape, input, ctx)?,
        };
        self.decoder_logits(tape, memory, &target[..target.len() - 1], ctx)
    }

    /// `log P(target[1..] | input)` under teacher forcing; a complete
    /// target ends with EOS.
    pub fn sentence_log_prob(&self, input: &SentenceInput, target: &[usize]) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let logits = self.logits(&mut tape, input, target, &mut Ctx::eval())?;
        let lp = tape.log_softmax_rows(logits)?;
        let gold = tape.pick(lp, &target[1..])?;
        Ok(tape.value(gold).data().iter().map(|v| v.as_f64()).sum())
    }

    /// Sum of sentence log-probabilities, each conditioned on its window of
    /// preceding source sentences.
    pub fn document_log_prob(&self, doc: &DocumentInput, targets: &[Vec<usize>]) -> Result<f64> {
        if doc.sentences.len() != targets.len() {
            return Err(ModelError::SentenceCount {
                src: doc.sentences.len(),
                tgt: targets.len(),
            });
        }
        let mut total = 0.0;
        for (j, target) in targets.iter().enumerate() {
            total += self.sentence_log_prob(&doc.sentence_input(j, self.config.context_size), target)?;
        }
        Ok(total)
    }

    /// Beam search. Candidates are ranked by log-probability with ties going
    /// to the earlier beam and then the lower token id; the best finished
    /// hypothesis by length-normalised score is returned.
    pub fn translate_sentence(&self, input: &SentenceInput, opts: &DecodeOptions) -> Result<Translation> {
        if opts.beam_size == 0 {
            return Err(ModelError::Input("beam size must be at least 1".into()));
        }
        if input.current.tokens.is_empty() {
            return Ok(Translation {
                tokens: Vec::new(),
                score: 0.0,
                finished: true,
            });
        }
        let memory = {
            let mut tape = Tape::no_grad();
            let m = self.encode(&mut tape, input, &mut Ctx::eval())?;
            tape.value(m).clone()
        };
        let max_len = opts.max_len.unwrap_or(2 * input.current.tokens.len() + 10).max(1);
        let norm = |logp: f64, len: usize| logp / (len as f64).powf(opts.alpha);

        let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<Translation> = Vec::new();
        for _ in 0..max_len {
            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            for (b, (tokens, logp)) in live.iter().enumerate() {
                let mut tape = Tape::no_grad();
                let m = tape.constant(memory.clone());
                let mut prefix = Vec::with_capacity(tokens.len() + 1);
                prefix.push(BOS);
                prefix.extend_from_slice(tokens);
                let logits = self.decoder_logits(&mut tape, m, &prefix, &mut Ctx::eval())?;
                let t = prefix.len();
                let last = tape.slice_rows(logits, t - 1, 1)?;
                let lp = tape.log_softmax_rows(last)?;
                for (v, x) in tape.value(lp).data().iter().enumerate() {
                    candidates.push((logp + x.as_f64(), b, v));
                }
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut next = Vec::with_capacity(opts.beam_size);
            for &(logp, b, v) in candidates.iter().take(opts.beam_size) {
                let tokens = &live[b].0;
                if v == EOS {
                    finished.push(Translation {
                        tokens: tokens.clone(),
                        score: norm(logp, tokens.len() + 1),
                        finished: true,
                    });
                } else {
                    let mut t = tokens.clone();
                    t.push(v);
                    next.push((t, logp));
                }
            }
            live = next;
            if finished.len() >= opts.beam_size || live.is_empty() {
                break;
            }
        }
        let pool = if finished.is_empty() {
            live.into_iter()
                .map(|(tokens, logp)| Translation {
                    score: norm(logp, tokens.len()),
                    tokens,
                    finished: false,
                })
                .collect()
        } else {
            finished
        };
        let mut best: Option<Translation> = None;
        for t in pool {
            if best.as_ref().is_none_or(|b| t.score > b.score) {
                best = Some(t);
            }
        }
        best.ok_or_else(|| ModelError::Input("beam search produced no hypothesis".into()))
    }

    /// Translates sentences in order; `hook` sees each sentence index with
    /// its context window before decoding.
    pub fn translate_document(
        &self,
        doc: &DocumentInput,
        opts: &DecodeOptions,
        mut hook: impl FnMut(usize, Range<usize>),
    ) -> Result<Vec<Translation>> {
        let k = self.config.context_size;
        (0..doc.sentences.len())
            .map(|j| {
                hook(j, context_window(j, k));
                self.translate_sentence(&doc.sentence_input(j, k), opts)
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint::from_store(&self.store)
    }

    /// Builds a model from its config and loads every parameter from `ckpt`.
    pub fn from_checkpoint(config: ModelConfig, ckpt: &Checkpoint<S>) -> Result<Self> {
        let mut model = Self::new(config)?;
        ckpt.restore_into(&mut model.store, true, Some("adam."))?;
        Ok(model)
    }
}

fn check_target(target: &[usize]) -> Result<()> {
    if target.len() < 2 || target[0] != BOS {
        return Err(ModelError::Input("target must start with BOS and predict at least one token".into()));
    }
    Ok(())
}
