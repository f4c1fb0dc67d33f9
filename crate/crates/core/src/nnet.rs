//! Transformer building blocks: projections, multi-head attention,
//! position-wise feed-forward layers and pre-norm encoder/decoder stacks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    positional_encoding, ParamGroup, ParamId, ParamStore, Result, Scalar, Tape, TensorError,
    Var,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-forward state: dropout source and an optional recorder for
/// intermediate values (attention weights, gates) used by diagnostics.
#[derive(Debug, Default)]
pub struct Ctx {
    pub dropout: f64,
    rng: Option<ChaCha8Rng>,
    records: Option<Vec<(&'static str, Var)>>,
}

impl Ctx {
    /// Deterministic evaluation: no dropout.
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
            records: None,
        }
    }

    /// Evaluation context that keeps every recorded intermediate.
    pub fn recording() -> Self {
        Self {
            records: Some(Vec::new()),
            ..Self::default()
        }
    }

    pub fn record(&mut self, name: &'static str, v: Var) {
        if let Some(r) = &mut self.records {
            r.push((name, v));
        }
    }

    pub fn records(&self) -> &[(&'static str, Var)] {
        self.records.as_deref().unwrap_or(&[])
    }

    pub fn recorded(&self, name: &str) -> Vec<Var> {
        self.records()
            .iter()
            .filter(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .collect()
    }

    pub fn take_records(&mut self) -> Vec<(&'static str, Var)> {
        self.records.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

pub fn dropout<S: Scalar>(tape: &mut Tape<S>, x: Var, ctx: &mut Ctx) -> Result<Var> {
    let p = ctx.dropout;
    let Some(rng) = ctx.rng.as_mut() else {
        return Ok(x);
    };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = S::lit(1.0 / (1.0 - p));
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep })
        .collect();
    tape.dropout_with_mask(x, mask)
}

/// Parameter allocation helper carrying the name prefix, seed and group.
#[derive(Clone, Debug)]
pub struct Init {
    pub prefix: String,
    pub seed: u64,
    pub group: ParamGroup,
}

impl Init {
    pub fn new(prefix: &str, seed: u64, group: ParamGroup) -> Self {
        Self {
            prefix: prefix.to_string(),
            seed,
            group,
        }
    }

    pub fn sub(&self, name: &str) -> Self {
        Self {
            prefix: format!("{}.{name}", self.prefix),
            ..self.clone()
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Scaled uniform in `±1/√fan_in`.
    pub fn fan_in<S: Scalar>(&self, store: &mut ParamStore<S>, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.uniform(&self.name(leaf), shape, bound, self.seed, self.group)
    }

    pub fn constant<S: Scalar>(&self, store: &mut ParamStore<S>, leaf: &str, shape: &[usize], v: f64) -> ParamId {
        store.constant(&self.name(leaf), shape, v, self.group)
    }
}

/// `x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &Init, input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: init.fan_in(store, "weight", &[input, output], input),
            bias: bias.then(|| init.constant(store, "bias", &[output], 0.0)),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &Init, dim: usize) -> Self {
        Self {
            gain: init.constant(store, "gain", &[dim], 1.0),
            bias: init.constant(store, "bias", &[dim], 0.0),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Query/key/value/output projections for `heads` heads over `dim`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &Init, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Shape {
                op: "attention (dim must be divisible by heads)",
                a: vec![dim],
                b: vec![heads],
            });
        }
        Ok(Self {
            query: Linear::new(store, &init.sub("query"), dim, dim, true),
            key: Linear::new(store, &init.sub("key"), dim, dim, true),
            value: Linear::new(store, &init.sub("value"), dim, dim, true),
            output: Linear::new(store, &init.sub("output"), dim, dim, true),
            heads,
            dim,
        })
    }
}

/// Scaled dot-product attention per head, heads concatenated and projected.
/// `mask` is `[q×m]` with `true` marking keys a query may attend to. Each
/// head's weight matrix is recorded under `tag`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &AttentionParams,
    query: Var,
    keys_values: Var,
    mask: Option<&[bool]>,
    ctx: &mut Ctx,
    tag: &'static str,
) -> Result<Var> {
    for v in [query, keys_values] {
        if tape.value(v).cols() != params.dim || tape.shape(v).len() != 2 {
            return Err(TensorError::Shape {
                op: "multi_head_attention",
                a: tape.shape(v).to_vec(),
                b: vec![params.dim],
            });
        }
    }
    let q = params.query.forward(tape, store, query)?;
    let k = params.key.forward(tape, store, keys_values)?;
    let v = params.value.forward(tape, store, keys_values)?;
    let dh = params.dim / params.heads;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores, mask)?;
        ctx.record(tag, weights);
        heads.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    params.output.forward(tape, store, joined)
}

/// Two-layer position-wise network with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &Init, dim: usize, inner_dim: usize) -> Self {
        Self {
            inner: Linear::new(store, &init.sub("inner"), dim, inner_dim, true),
            outer: Linear::new(store, &init.sub("outer"), inner_dim, dim, true),
        }
    }
}

pub fn feed_forward<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>, params: &FeedForward, x: Var) -> Result<Var> {
    let h = params.inner.forward(tape, store, x)?;
    let h = tape.relu(h)?;
    params.outer.forward(tape, store, h)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNormParams,
    pub attn: AttentionParams,
    pub ffn_norm: LayerNormParams,
    pub ffn: FeedForward,
}

/// Pre-norm self-attention stack with a final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<LayerNormParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackShape {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl EncoderStack {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &Init, shape: StackShape) -> Result<Self> {
        let mut layers = Vec::with_capacity(shape.layers);
        for i in 0..shape.layers {
            let li = init.sub(&format!("layer{i}"));
            layers.push(EncoderLayer {
                attn_norm: LayerNormParams::new(store, &li.sub("attn_norm"), shape.dim),
                attn: AttentionParams::new(store, &li.sub("attn"), shape.dim, shape.heads)?,
                ffn_norm: LayerNormParams::new(store, &li.sub("ffn_norm"), shape.dim),
                ffn: FeedForward::new(store, &li.sub("ffn"), shape.dim, shape.ffn_dim),
            });
        }
        let final_norm = (shape.layers > 0).then(|| LayerNormParams::new(store, &init.sub("final_norm"), shape.dim));
        Ok(Self { layers, final_norm })
    }
}

/// Key-padding mask `[n×n]`: every query may attend only to real keys.
pub fn padding_mask(real: &[bool]) -> Vec<bool> {
    let n = real.len();
    (0..n * n).map(|i| real[i % n]).collect()
}

/// Lower-triangular mask `[n×n]` for causal self-attention.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

pub fn transformer_encode<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    stack: &EncoderStack,
    x: Var,
    mask: Option<&[bool]>,
    ctx: &mut Ctx,
) -> Result<Var> {
    let mut h = x;
    for layer in &stack.layers {
        let a = layer.attn_norm.forward(tape, store, h)?;
        let a = multi_head_attention(tape, store, &layer.attn, a, a, mask, ctx, "encoder.self")?;
        let a = dropout(tape, a, ctx)?;
        h = tape.add(h, a)?;
        let f = layer.ffn_norm.forward(tape, store, h)?;
        let f = feed_forward(tape, store, &layer.ffn, f)?;
        let f = dropout(tape, f, ctx)?;
        h = tape.add(h, f)?;
    }
    match &stack.final_norm {
        Some(norm) => norm.forward(tape, store, h),
        None => Ok(h),
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNormParams,
    pub self_attn: AttentionParams,
    pub cross_norm: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ffn_norm: LayerNormParams,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Option<LayerNormParams>,
}

impl DecoderStack {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &Init, shape: StackShape) -> Result<Self> {
        let mut layers = Vec::with_capacity(shape.layers);
        for i in 0..shape.layers {
            let li = init.sub(&format!("layer{i}"));
            layers.push(DecoderLayer {
                self_norm: LayerNormParams::new(store, &li.sub("self_norm"), shape.dim),
                self_attn: AttentionParams::new(store, &li.sub("self_attn"), shape.dim, shape.heads)?,
                cross_norm: LayerNormParams::new(store, &li.sub("cross_norm"), shape.dim),
                cross_attn: AttentionParams::new(store, &li.sub("cross_attn"), shape.dim, shape.heads)?,
                ffn_norm: LayerNormParams::new(store, &li.sub("ffn_norm"), shape.dim),
                ffn: FeedForward::new(store, &li.sub("ffn"), shape.dim, shape.ffn_dim),
            });
        }
        let final_norm = (shape.layers > 0).then(|| LayerNormParams::new(store, &init.sub("final_norm"), shape.dim));
        Ok(Self { layers, final_norm })
    }
}

/// Decoder hidden states for every prefix position under a causal mask.
pub fn transformer_decode<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    stack: &DecoderStack,
    prefix: Var,
    memory: Var,
    ctx: &mut Ctx,
) -> Result<Var> {
    let t = tape.value(prefix).rows();
    let causal = causal_mask(t);
    let mut h = prefix;
    for layer in &stack.layers {
        let a = layer.self_norm.forward(tape, store, h)?;
        let a = multi_head_attention(tape, store, &layer.self_attn, a, a, Some(&causal), ctx, "decoder.self")?;
        let a = dropout(tape, a, ctx)?;
        h = tape.add(h, a)?;
        let c = layer.cross_norm.forward(tape, store, h)?;
        let c = multi_head_attention(tape, store, &layer.cross_attn, c, memory, None, ctx, "decoder.cross")?;
        let c = dropout(tape, c, ctx)?;
        h = tape.add(h, c)?;
        let f = layer.ffn_norm.forward(tape, store, h)?;
        let f = feed_forward(tape, store, &layer.ffn, f)?;
        let f = dropout(tape, f, ctx)?;
        h = tape.add(h, f)?;
    }
    match &stack.final_norm {
        Some(norm) => norm.forward(tape, store, h),
        None => Ok(h),
    }
}

/// Next-token logits `[1×V]` after `prefix`, projecting the last decoder
/// state onto the rows of `output_table: [V×d]`.
pub fn transformer_decode_step<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    stack: &DecoderStack,
    prefix: Var,
    memory: Var,
    output_table: ParamId,
    ctx: &mut Ctx,
) -> Result<Var> {
    let h = transformer_decode(tape, store, stack, prefix, memory, ctx)?;
    let t = tape.value(h).rows();
    let last = tape.slice_rows(h, t - 1, 1)?;
    let table = tape.param(store, output_table);
    tape.matmul_t(last, table)
}

/// `table[ids]·√d + PE`.
pub fn embed_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    table: ParamId,
    ids: &[usize],
) -> Result<Var> {
    let t = tape.param(store, table);
    let dim = tape.value(t).cols();
    let e = tape.gather_rows(t, ids)?;
    let e = tape.scale(e, S::lit((dim as f64).sqrt()))?;
    let pe = tape.constant(positional_encoding(ids.len(), dim)?);
    tape.add(e, pe)
}
