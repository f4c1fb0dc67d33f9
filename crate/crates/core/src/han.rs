//! Hierarchical attention over previous source sentences with gated
//! integration into the encoder output.
//!
//! Per token, a sentence-level attention summarises each context sentence,
//! a document-level attention mixes the summaries and an element-wise
//! sigmoid gate blends the result with the token's own encoder state.

use crate::nnet::{feed_forward, multi_head_attention, AttentionParams, Ctx, FeedForward, Init, Linear};
use crate::tensor::{ParamId, ParamStore, Result, Scalar, Tape, TensorError, Var};

/// Initial gate bias; `σ(2) ≈ 0.88` keeps most of the encoder state while the
/// context parameters are still untrained.
pub const GATE_BIAS_INIT: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct HanParams {
    pub sentence_query: Linear,
    pub document_query: Linear,
    pub sentence_attn: AttentionParams,
    pub document_attn: AttentionParams,
    pub ffn: FeedForward,
    pub gate_h: ParamId,
    pub gate_cd: ParamId,
    pub gate_bias: ParamId,
}

impl HanParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &Init, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            sentence_query: Linear::new(store, &init.sub("sentence_query"), dim, dim, true),
            document_query: Linear::new(store, &init.sub("document_query"), dim, dim, true),
            sentence_attn: AttentionParams::new(store, &init.sub("sentence_attn"), dim, heads)?,
            document_attn: AttentionParams::new(store, &init.sub("document_attn"), dim, heads)?,
            ffn: FeedForward::new(store, &init.sub("ffn"), dim, ffn_dim),
            gate_h: init.fan_in(store, "gate_h", &[dim, dim], dim),
            gate_cd: init.fan_in(store, "gate_cd", &[dim, dim], dim),
            gate_bias: init.constant(store, "gate_bias", &[dim], GATE_BIAS_INIT),
        })
    }
}

/// `cs_k = MultiHead(f_s(h), H_k)`.
pub fn sentence_context<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &HanParams,
    h: Var,
    context: Var,
    ctx: &mut Ctx,
) -> Result<Var> {
    if tape.value(context).rows() == 0 || tape.shape(context).len() != 2 {
        return Err(TensorError::EmptyInput { op: "sentence_context" });
    }
    let q = params.sentence_query.forward(tape, store, h)?;
    multi_head_attention(tape, store, &params.sentence_attn, q, context, None, ctx, "han.sentence")
}

/// `cd = FFN(MultiHead(f_d(h), CS))` where token `i` attends over its own
/// summaries `summaries[k].row(i)`. Slots with `slot_mask[k] == false` get
/// zero weight.
pub fn document_context<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &HanParams,
    h: Var,
    summaries: &[Var],
    slot_mask: Option<&[bool]>,
    ctx: &mut Ctx,
) -> Result<Var> {
    let slots = summaries.len();
    if slots == 0 || slot_mask.is_some_and(|m| m.len() != slots || !m.iter().any(|&b| b)) {
        return Err(TensorError::EmptyInput { op: "document_context" });
    }
    let attn = &params.document_attn;
    let n = tape.value(h).rows();
    let q = params.document_query.forward(tape, store, h)?;
    let q = attn.query.forward(tape, store, q)?;
    let mut keys = Vec::with_capacity(slots);
    let mut values = Vec::with_capacity(slots);
    for &cs in summaries {
        keys.push(attn.key.forward(tape, store, cs)?);
        values.push(attn.value.forward(tape, store, cs)?);
    }
    let mask: Option<Vec<bool>> = slot_mask.map(|m| (0..n).flat_map(|_| m.iter().copied()).collect());
    let dh = attn.dim / attn.heads;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(attn.heads);
    for hd in 0..attn.heads {
        let qh = tape.slice_cols(q, hd * dh, dh)?;
        let mut scores = Vec::with_capacity(slots);
        for &k in &keys {
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            scores.push(tape.row_dot(qh, kh)?);
        }
        let scores = tape.concat_cols(&scores)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores, mask.as_deref())?;
        ctx.record("han.document", weights);
        let mut mixed = None;
        for (slot, &v) in values.iter().enumerate() {
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let w = tape.slice_cols(weights, slot, 1)?;
            let part = tape.scale_rows(vh, w)?;
            mixed = Some(match mixed {
                Some(acc) => tape.add(acc, part)?,
                None => part,
            });
        }
        heads.push(mixed.expect("at least one slot"));
    }
    let joined = tape.concat_cols(&heads)?;
    let out = attn.output.forward(tape, store, joined)?;
    feed_forward(tape, store, &params.ffn, out)
}

/// `λ = σ(h·W_h + cd·W_cd + b)`, `h̃ = λ⊙h + (1−λ)⊙cd`.
pub fn gate_integrate<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &HanParams,
    h: Var,
    cd: Var,
    ctx: &mut Ctx,
) -> Result<Var> {
    if tape.shape(h) != tape.shape(cd) {
        return Err(TensorError::Shape {
            op: "gate_integrate",
            a: tape.shape(h).to_vec(),
            b: tape.shape(cd).to_vec(),
        });
    }
    let wh = tape.param(store, params.gate_h);
    let wcd = tape.param(store, params.gate_cd);
    let b = tape.param(store, params.gate_bias);
    let a = tape.matmul(h, wh)?;
    let c = tape.matmul(cd, wcd)?;
    let pre = tape.add(a, c)?;
    let pre = tape.add_row(pre, b)?;
    let lambda = tape.sigmoid(pre)?;
    ctx.record("han.gate", lambda);
    let diff = tape.sub(h, cd)?;
    let mixed = tape.mul(lambda, diff)?;
    tape.add(cd, mixed)
}

/// Full context pipeline. With no context sentences the input is returned
/// unchanged (the same var).
pub fn apply_context<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &HanParams,
    h: Var,
    contexts: &[Var],
    ctx: &mut Ctx,
) -> Result<Var> {
    if contexts.is_empty() {
        return Ok(h);
    }
    let mut summaries = Vec::with_capacity(contexts.len());
    for &c in contexts {
        summaries.push(sentence_context(tape, store, params, h, c, ctx)?);
    }
    let cd = document_context(tape, store, params, h, &summaries, None, ctx)?;
    ctx.record("han.cd", cd);
    gate_integrate(tape, store, params, h, cd, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamGroup, Tensor};

    fn params(store: &mut ParamStore<f64>, dim: usize, heads: usize) -> HanParams {
        HanParams::new(store, &Init::new("han", 3, ParamGroup::Context), dim, heads, 2 * dim).unwrap()
    }

    fn constant(tape: &mut Tape<f64>, shape: &[usize], data: &[f64]) -> Var {
        tape.constant(Tensor::from_f64(shape, data).unwrap())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn gate_with_zero_weights_averages() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 2, 1);
        store.zero_prefix("han.gate");
        let mut tape = Tape::new();
        let h = constant(&mut tape, &[1, 2], &[1.0, -3.0]);
        let cd = constant(&mut tape, &[1, 2], &[3.0, 1.0]);
        let out = gate_integrate(&mut tape, &store, &p, h, cd, &mut Ctx::eval()).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, -1.0]);
        let same = gate_integrate(&mut tape, &store, &p, h, h, &mut Ctx::eval()).unwrap();
        assert_eq!(tape.value(same), tape.value(h));
    }

    #[test]
    fn gate_scalar_closed_form() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 1, 1);
        store.zero_prefix("han.gate");
        store.get_mut(p.gate_bias).value.data_mut()[0] = 3f64.ln();
        let mut tape = Tape::new();
        let h = constant(&mut tape, &[1, 1], &[2.0]);
        let cd = constant(&mut tape, &[1, 1], &[0.0]);
        let mut ctx = Ctx::recording();
        let out = gate_integrate(&mut tape, &store, &p, h, cd, &mut ctx).unwrap();
        let lambda = ctx.recorded("han.gate")[0];
        assert!((tape.value(lambda).item() - 0.75).abs() < 1e-12);
        assert!((tape.value(out).item() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sentence_context_uniform_keys() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 4, 2);
        let mut tape = Tape::new();
        let h = constant(&mut tape, &[2, 4], &[0.1, 0.2, 0.3, 0.4, -1.0, 2.0, 0.5, 0.0]);
        let v = [0.7, -0.2, 0.4, 1.0];
        let hk = constant(&mut tape, &[3, 4], &[v, v, v].concat());
        let cs = sentence_context(&mut tape, &store, &p, h, hk, &mut Ctx::eval()).unwrap();
        let single = constant(&mut tape, &[1, 4], &v);
        let pv = p.sentence_attn.value.forward(&mut tape, &store, single).unwrap();
        let expected = p.sentence_attn.output.forward(&mut tape, &store, pv).unwrap();
        let e = tape.value(expected).to_f64_vec();
        for i in 0..2 {
            assert!(close(tape.value(cs).row(i), &e, 1e-12));
        }
        let empty = tape.constant(Tensor::zeros(&[0, 4]));
        assert!(sentence_context(&mut tape, &store, &p, h, empty, &mut Ctx::eval()).is_err());
    }

    #[test]
    fn document_context_single_and_repeated_slots() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 4, 2);
        let mut tape = Tape::new();
        let h = constant(&mut tape, &[2, 4], &[0.1, 0.2, 0.3, 0.4, -1.0, 2.0, 0.5, 0.0]);
        let cs = constant(&mut tape, &[2, 4], &[1.0, 0.0, -1.0, 0.5, 0.3, 0.3, 0.3, -0.9]);
        let one = document_context(&mut tape, &store, &p, h, &[cs], None, &mut Ctx::eval()).unwrap();
        let pv = p.document_attn.value.forward(&mut tape, &store, cs).unwrap();
        let po = p.document_attn.output.forward(&mut tape, &store, pv).unwrap();
        let direct = feed_forward(&mut tape, &store, &p.ffn, po).unwrap();
        assert!(close(tape.value(one).data(), tape.value(direct).data(), 1e-12));
        let three = document_context(&mut tape, &store, &p, h, &[cs, cs, cs], None, &mut Ctx::eval()).unwrap();
        assert!(close(tape.value(one).data(), tape.value(three).data(), 1e-12));
        assert!(document_context(&mut tape, &store, &p, h, &[], None, &mut Ctx::eval()).is_err());
    }

    #[test]
    fn document_context_two_slot_mix() {
        // One head, d = 1, identity projections: the logits are q·k = k, so
        // keys 0 and ln 3 mix the values 0.25 / 0.75
        let mut store = ParamStore::new();
        let p = params(&mut store, 1, 1);
        for lin in [&p.document_query, &p.document_attn.query, &p.document_attn.key, &p.document_attn.value, &p.document_attn.output] {
            store.get_mut(lin.weight).value.data_mut()[0] = 1.0;
        }
        let mut tape = Tape::new();
        let h = constant(&mut tape, &[1, 1], &[1.0]);
        let a = constant(&mut tape, &[1, 1], &[0.0]);
        let b = constant(&mut tape, &[1, 1], &[3f64.ln()]);
        let mut ctx = Ctx::recording();
        let cd = document_context(&mut tape, &store, &p, h, &[a, b], None, &mut ctx).unwrap();
        let w = tape.value(ctx.recorded("han.document")[0]).to_f64_vec();
        assert!(close(&w, &[0.25, 0.75], 1e-12));
        let mixed = constant(&mut tape, &[1, 1], &[0.75 * 3f64.ln()]);
        let direct = feed_forward(&mut tape, &store, &p.ffn, mixed).unwrap();
        assert!(close(tape.value(cd).data(), tape.value(direct).data(), 1e-12));

        let mut ctx = Ctx::recording();
        document_context(&mut tape, &store, &p, h, &[a, b], Some(&[true, false]), &mut ctx).unwrap();
        let w = tape.value(ctx.recorded("han.document")[0]).to_f64_vec();
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn empty_context_is_identity() {
        let mut store = ParamStore::new();
        let p = params(&mut store, 4, 2);
        let mut tape = Tape::new();
        let h = constant(&mut tape, &[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(apply_context(&mut tape, &store, &p, h, &[], &mut Ctx::eval()).unwrap(), h);
    }
}
