//! Discourse path embeddings.
//!
//! Each distinct label path is embedded, run through a small Transformer
//! encoder and mean-pooled into one vector; tokens then look up the vector
//! of their path, so tokens of one EDU share it exactly.

use std::collections::HashMap;

use crate::nnet::{transformer_encode, Ctx, EncoderStack, Init, StackShape};
use crate::tensor::{positional_encoding, ParamId, ParamStore, Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct PathEncoderParams {
    pub table: ParamId,
    pub stack: EncoderStack,
    pub pad: usize,
}

impl PathEncoderParams {
    /// `pad` is the label id used to fill short paths in a batch.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &Init,
        labels: usize,
        pad: usize,
        shape: StackShape,
    ) -> Result<Self> {
        let table = init.fan_in(store, "table", &[labels, shape.dim], shape.dim);
        let stack = EncoderStack::new(store, &init.sub("encoder"), shape)?;
        Ok(Self { table, stack, pad })
    }
}

/// Encodes each path (a nonempty list of label ids) to one `d`-vector;
/// returns `[P×d]`. Paths are stacked into one block-diagonal batch padded
/// to the longest path; padding never enters attention or the mean.
pub fn encode_paths<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &PathEncoderParams,
    paths: &[Vec<usize>],
    ctx: &mut Ctx,
) -> Result<Var> {
    if paths.is_empty() || paths.iter().any(|p| p.is_empty()) {
        return Err(TensorError::EmptyInput { op: "encode_paths" });
    }
    let width = paths.iter().map(Vec::len).max().unwrap_or(0);
    let rows = paths.len() * width;
    let mut ids = Vec::with_capacity(rows);
    for p in paths {
        ids.extend_from_slice(p);
        ids.extend(std::iter::repeat_n(params.pad, width - p.len()));
    }
    let table = tape.param(store, params.table);
    let dim = tape.value(table).cols();
    let e = tape.gather_rows(table, &ids)?;
    let e = tape.scale(e, S::lit((dim as f64).sqrt()))?;
    let pe = positional_encoding::<S>(width, dim)?;
    let mut tiled = Vec::with_capacity(rows * dim);
    for _ in paths {
        tiled.extend_from_slice(pe.data());
    }
    let pe = tape.constant(Tensor::new(vec![rows, dim], tiled)?);
    let x = tape.add(e, pe)?;

    let mut mask = vec![false; rows * rows];
    let mut pool = vec![S::zero(); paths.len() * rows];
    for (b, p) in paths.iter().enumerate() {
        let base = b * width;
        for q in 0..width {
            for k in 0..p.len() {
                mask[(base + q) * rows + base + k] = true;
            }
        }
        let w = S::lit(1.0 / p.len() as f64);
        for k in 0..p.len() {
            pool[b * rows + base + k] = w;
        }
    }
    let h = transformer_encode(tape, store, &params.stack, x, Some(&mask), ctx)?;
    let pool = tape.constant(Tensor::new(vec![paths.len(), rows], pool)?);
    tape.matmul(pool, h)
}

/// Per-token discourse embeddings `[n×d]`: unique paths are encoded once and
/// broadcast to their tokens.
pub fn token_path_embeddings<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    params: &PathEncoderParams,
    token_paths: &[Vec<usize>],
    ctx: &mut Ctx,
) -> Result<Var> {
    let mut unique: Vec<Vec<usize>> = Vec::new();
    let mut index: HashMap<&[usize], usize> = HashMap::new();
    let mut rows = Vec::with_capacity(token_paths.len());
    for p in token_paths {
        let next = unique.len();
        let i = *index.entry(p.as_slice()).or_insert(next);
        if i == next {
            unique.push(p.clone());
        }
        rows.push(i);
    }
    let encoded = encode_paths(tape, store, params, &unique, ctx)?;
    tape.gather_rows(encoded, &rows)
}

/// `x̃ = x + d`.
pub fn enrich_embeddings<S: Scalar>(tape: &mut Tape<S>, word: Var, path: Var) -> Result<Var> {
    tape.add(word, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamGroup;

    fn params(store: &mut ParamStore<f64>) -> PathEncoderParams {
        let shape = StackShape { layers: 2, dim: 8, heads: 2, ffn_dim: 16 };
        PathEncoderParams::new(store, &Init::new("path", 7, ParamGroup::Sentence), 6, 0, shape).unwrap()
    }

    #[test]
    fn enrich_is_elementwise_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let d = tape.constant(Tensor::from_f64(&[1, 2], &[0.5, -2.0]).unwrap());
        let y = enrich_embeddings(&mut tape, x, d).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 0.0]);
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let y = enrich_embeddings(&mut tape, x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let y = enrich_embeddings(&mut tape, z, d).unwrap();
        assert_eq!(tape.value(y), tape.value(d));
        let bad = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(enrich_embeddings(&mut tape, x, bad).is_err());
    }

    #[test]
    fn shared_paths_give_identical_rows() {
        let mut store = ParamStore::new();
        let p = params(&mut store);
        let mut tape = Tape::no_grad();
        let paths = vec![vec![2, 3], vec![4], vec![2, 3], vec![2, 3]];
        let d = token_path_embeddings(&mut tape, &store, &p, &paths, &mut Ctx::eval()).unwrap();
        let v = tape.value(d);
        assert_eq!(v.row(0), v.row(2));
        assert_eq!(v.row(0), v.row(3));
        assert_ne!(v.row(0), v.row(1));
    }

    #[test]
    fn zeroed_parameters_give_zero_embedding() {
        let mut store = ParamStore::new();
        let p = params(&mut store);
        store.zero_prefix("path");
        let mut tape = Tape::no_grad();
        let d = encode_paths(&mut tape, &store, &p, &[vec![1, 2, 3], vec![5]], &mut Ctx::eval()).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_does_not_change_embeddings() {
        let mut store = ParamStore::new();
        let p = params(&mut store);
        let mut tape = Tape::no_grad();
        let alone = encode_paths(&mut tape, &store, &p, &[vec![3, 1]], &mut Ctx::eval()).unwrap();
        let batch = encode_paths(&mut tape, &store, &p, &[vec![4, 4, 2, 5, 1], vec![3, 1]], &mut Ctx::eval()).unwrap();
        let a = tape.value(alone).row(0).to_vec();
        let b = tape.value(batch).row(1).to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_empty_paths() {
        let mut store = ParamStore::new();
        let p = params(&mut store);
        let mut tape = Tape::no_grad();
        assert!(encode_paths(&mut tape, &store, &p, &[vec![]], &mut Ctx::eval()).is_err());
    }
}
