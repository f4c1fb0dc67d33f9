#![allow(dead_code)]

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Relative error bound for analytic vs numeric gradients.
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor so that vanishing gradients are compared absolutely.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central finite difference of `f` with respect to `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + FD_STEP;
    let plus = f(x);
    x[i] = orig - FD_STEP;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * FD_STEP)
}

/// Compares the tape gradient of `loss` against central differences for
/// every element of every trainable parameter. Returns the worst relative
/// error and the number of elements checked.
pub fn param_gradcheck(
    store: &mut dnmt::tensor::ParamStore<f64>,
    loss: impl Fn(&mut dnmt::tensor::Tape<f64>, &dnmt::tensor::ParamStore<f64>) -> dnmt::tensor::Var,
) -> (f64, usize) {
    use dnmt::tensor::Tape;
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    let grads = tape.backward(l).unwrap();
    let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    for (id, g) in grads.params() {
        analytic[id.index()].copy_from_slice(g);
    }
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0f64;
    let mut checked = 0;
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        for i in 0..store.value(id).len() {
            let mut eval = |delta: f64| {
                let orig = store.get(id).value.data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + delta;
                let mut t = Tape::no_grad();
                let v = loss(&mut t, store);
                let out = t.value(v).item();
                store.get_mut(id).value.data_mut()[i] = orig;
                out
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let err = rel_err(analytic[id.index()][i], numeric);
            if err > worst {
                worst = err;
            }
            checked += 1;
        }
    }
    (worst, checked)
}

/// A small synthetic corpus with its vocabularies.
pub fn tiny_corpus(seed: u64, docs: usize) -> (Vec<dnmt::datapipe::DocumentPair>, dnmt::training::VocabSet) {
    use dnmt::datapipe::{generate_synthetic_corpus, SynthConfig};
    let corpus = generate_synthetic_corpus(&SynthConfig {
        seed,
        docs,
        sentences_per_doc: 4,
        vocab_size: 8,
        min_len: 2,
        max_len: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let vocabs = dnmt::training::VocabSet::build(&corpus, &dnmt::training::TrainConfig::default()).unwrap();
    (corpus, vocabs)
}

/// d = 8, one layer per stack, two heads, two context sentences.
pub fn tiny_config(vocabs: &dnmt::training::VocabSet, use_ds: bool, use_han: bool, seed: u64) -> dnmt::model::ModelConfig {
    dnmt::model::ModelConfig {
        src_vocab: vocabs.src.len(),
        tgt_vocab: vocabs.tgt.len(),
        labels: vocabs.labels.len(),
        label_pad: vocabs.labels.pad(),
        dim: 8,
        heads: 2,
        ffn_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        path_layers: 1,
        context_size: 2,
        max_depth: 16,
        use_ds,
        use_han,
        context_grad: false,
        seed,
    }
}
