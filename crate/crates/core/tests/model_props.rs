//! Model composition: flags, probabilities, document factorisation and
//! decoding.

mod common;

use common::{tiny_config, tiny_corpus};
use dnmt::datapipe::{document_input, BOS, EOS};
use dnmt::model::{DecodeOptions, DocumentInput, Model, ModelConfig, SentenceInput, SourceSentence};
use dnmt::nnet::Ctx;
use dnmt::tensor::Tape;

fn documents(seed: u64, docs: usize) -> (Vec<(DocumentInput, Vec<Vec<usize>>)>, dnmt::training::VocabSet) {
    let (corpus, vocabs) = tiny_corpus(seed, docs);
    let out = corpus
        .iter()
        .map(|d| {
            let input = document_input(d, 16, &vocabs.src, &vocabs.labels);
            let targets = d.tgt.iter().map(|t| vocabs.tgt.encode_target(t)).collect();
            (input, targets)
        })
        .collect();
    (out, vocabs)
}

fn encode(model: &Model<f64>, input: &SentenceInput) -> Vec<f64> {
    let mut tape = Tape::no_grad();
    let h = model.encode(&mut tape, input, &mut Ctx::eval()).unwrap();
    tape.value(h).data().to_vec()
}

#[test]
fn flag_lattice_allocates_matching_parameters() {
    let (_, vocabs) = documents(1, 1);
    for (ds, han) in [(false, false), (true, false), (false, true), (true, true)] {
        let m = Model::<f64>::new(tiny_config(&vocabs, ds, han, 3)).unwrap();
        let has = |p: &str| m.store.iter().any(|(_, q)| q.name.starts_with(p));
        assert_eq!(has("path."), ds);
        assert_eq!(has("han."), han);
        assert_eq!(m.path.is_some(), ds);
        assert_eq!(m.han.is_some(), han);
    }
}

#[test]
fn shared_parameters_do_not_depend_on_flags() {
    let (_, vocabs) = documents(1, 1);
    let plain = Model::<f64>::new(tiny_config(&vocabs, false, false, 3)).unwrap();
    let full = Model::<f64>::new(tiny_config(&vocabs, true, true, 3)).unwrap();
    for (_, p) in plain.store.iter() {
        let q = full.store.value(full.store.id(&p.name).unwrap());
        assert_eq!(&p.value, q, "{}", p.name);
    }
}

#[test]
fn baseline_flags_match_plain_encoder() {
    let (docs, vocabs) = documents(2, 2);
    let m = Model::<f64>::new(tiny_config(&vocabs, false, false, 3)).unwrap();
    let input = docs[0].0.sentence_input(2, 2);
    let mut tape = Tape::no_grad();
    let h = m.encode_sentence(&mut tape, &input.current, &mut Ctx::eval()).unwrap();
    assert_eq!(tape.value(h).data(), encode(&m, &input).as_slice());
}

#[test]
fn zeroed_path_encoder_matches_no_discourse_model() {
    let (docs, vocabs) = documents(3, 3);
    let mut with = Model::<f64>::new(tiny_config(&vocabs, true, true, 5)).unwrap();
    let without = Model::<f64>::new(tiny_config(&vocabs, false, true, 5)).unwrap();
    with.store.zero_prefix("path.");
    for (doc, _) in &docs {
        for j in 0..doc.sentences.len() {
            let input = doc.sentence_input(j, 2);
            let a = encode(&with, &input);
            let b = encode(&without, &input);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn encoding_is_deterministic() {
    let (docs, vocabs) = documents(4, 1);
    let m = Model::<f64>::new(tiny_config(&vocabs, true, true, 7)).unwrap();
    let input = docs[0].0.sentence_input(3, 2);
    assert_eq!(encode(&m, &input), encode(&m, &input));
}

#[test]
fn zero_parameters_give_uniform_distribution() {
    let (docs, vocabs) = documents(5, 1);
    let mut m = Model::<f64>::new(tiny_config(&vocabs, true, true, 7)).unwrap();
    m.store.zero_prefix("");
    let (doc, targets) = &docs[0];
    let input = doc.sentence_input(1, 2);
    let lp = m.sentence_log_prob(&input, &targets[1]).unwrap();
    let expected = -((targets[1].len() - 1) as f64) * (vocabs.tgt.len() as f64).ln();
    assert!((lp - expected).abs() < 1e-9, "{lp} vs {expected}");
}

#[test]
fn next_token_probabilities_sum_to_one() {
    let (docs, vocabs) = documents(6, 2);
    let m = Model::<f64>::new(tiny_config(&vocabs, true, true, 9)).unwrap();
    for (doc, targets) in &docs {
        let input = doc.sentence_input(2, 2);
        let prefix = &targets[2][..2];
        let total: f64 = (0..vocabs.tgt.len())
            .map(|v| {
                let mut t = prefix.to_vec();
                t.push(v);
                m.sentence_log_prob(&input, &t).unwrap().exp()
            })
            .sum();
        let p_prefix = m.sentence_log_prob(&input, prefix).unwrap().exp();
        assert!((total - p_prefix).abs() < 1e-12);
        let mut lp = 0.0;
        for v in 0..vocabs.tgt.len() {
            lp += m.sentence_log_prob(&input, &[BOS, v]).unwrap().exp();
        }
        assert!((lp - 1.0).abs() < 1e-12);
        assert!(m.sentence_log_prob(&input, &targets[2]).unwrap() <= 0.0);
    }
}

#[test]
fn teacher_forcing_matches_chain_rule() {
    // three target ids: PAD, BOS, EOS
    let (docs, vocabs) = documents(7, 1);
    let mut cfg = tiny_config(&vocabs, true, false, 11);
    cfg.tgt_vocab = 3;
    let m = Model::<f64>::new(cfg).unwrap();
    let input = docs[0].0.sentence_input(0, 2);
    let target = [BOS, 0, 2, 0, EOS];
    let mut tape = Tape::no_grad();
    let memory = m.encode(&mut tape, &input, &mut Ctx::eval()).unwrap();
    let mut chain = 0.0;
    for t in 1..target.len() {
        let logits = m.decoder_logits(&mut tape, memory, &target[..t], &mut Ctx::eval()).unwrap();
        let row = tape.value(logits).row(t - 1).to_vec();
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        chain += (row[target[t]].exp() / z).ln();
    }
    let lp = m.sentence_log_prob(&input, &target).unwrap();
    assert!((lp - chain).abs() < 1e-12, "{lp} vs {chain}");
}

#[test]
fn document_log_prob_is_sum_of_sentences() {
    let (docs, vocabs) = documents(8, 3);
    let m = Model::<f64>::new(tiny_config(&vocabs, true, true, 13)).unwrap();
    for (doc, targets) in &docs {
        let total = m.document_log_prob(doc, targets).unwrap();
        let mut sum = 0.0;
        for (j, t) in targets.iter().enumerate() {
            sum += m.sentence_log_prob(&doc.sentence_input(j, 2), t).unwrap();
        }
        assert_eq!(total.to_bits(), sum.to_bits());

        let single = DocumentInput { sentences: doc.sentences[..1].to_vec() };
        let first = SentenceInput { current: doc.sentences[0].clone(), context: Vec::new() };
        assert_eq!(
            m.document_log_prob(&single, &targets[..1]).unwrap(),
            m.sentence_log_prob(&first, &targets[0]).unwrap()
        );
        let shorter = DocumentInput { sentences: doc.sentences[..3].to_vec() };
        assert!(total < m.document_log_prob(&shorter, &targets[..3]).unwrap());
        assert!(m.document_log_prob(&shorter, targets).is_err());
    }
}

fn greedy(m: &Model<f64>, input: &SentenceInput, max_len: usize) -> Vec<usize> {
    let mut tape = Tape::no_grad();
    let memory = m.encode(&mut tape, input, &mut Ctx::eval()).unwrap();
    let mut out = vec![BOS];
    for _ in 0..max_len {
        let logits = m.decoder_logits(&mut tape, memory, &out, &mut Ctx::eval()).unwrap();
        let row = tape.value(logits).row(out.len() - 1).to_vec();
        let mut best = 0;
        for (v, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = v;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
    }
    out[1..].to_vec()
}

#[test]
fn beam_of_one_is_greedy() {
    let (docs, vocabs) = documents(9, 2);
    let m = Model::<f64>::new(tiny_config(&vocabs, true, true, 17)).unwrap();
    for (doc, _) in &docs {
        for j in 0..doc.sentences.len() {
            let input = doc.sentence_input(j, 2);
            let opts = DecodeOptions { beam_size: 1, max_len: Some(6), alpha: 0.6 };
            let t = m.translate_sentence(&input, &opts).unwrap();
            assert_eq!(t.tokens, greedy(&m, &input, 6));
        }
    }
}

#[test]
fn exhaustive_beam_scores_at_least_greedy() {
    let (docs, vocabs) = documents(10, 3);
    let max_len = 3;
    let opts = |beam_size| DecodeOptions { beam_size, max_len: Some(max_len), alpha: 0.6 };
    let mut compared = 0;
    for seed in 0..20 {
        let mut cfg = tiny_config(&vocabs, true, true, seed);
        cfg.tgt_vocab = 4;
        let m = Model::<f64>::new(cfg).unwrap();
        for (doc, _) in &docs {
            for j in 0..doc.sentences.len() {
                let input = doc.sentence_input(j, 2);
                let g = m.translate_sentence(&input, &opts(1)).unwrap();
                let b = m.translate_sentence(&input, &opts(64)).unwrap();
                assert!(b.finished || !g.finished);
                if g.finished {
                    assert!(b.score >= g.score - 1e-12, "beam {} < greedy {}", b.score, g.score);
                    compared += 1;
                }
            }
        }
    }
    assert!(compared > 0);
}

#[test]
fn empty_source_translates_to_nothing() {
    let (_, vocabs) = documents(11, 1);
    let m = Model::<f64>::new(tiny_config(&vocabs, true, true, 1)).unwrap();
    let input = SentenceInput { current: SourceSentence::default(), context: Vec::new() };
    let t = m.translate_sentence(&input, &DecodeOptions::default()).unwrap();
    assert!(t.tokens.is_empty() && t.finished);
}

#[test]
fn document_translation_windows_and_causality() {
    let (docs, vocabs) = documents(12, 1);
    let mut cfg = tiny_config(&vocabs, true, true, 23);
    cfg.context_size = 2;
    let m = Model::<f64>::new(cfg).unwrap();
    let doc = &docs[0].0;
    let opts = DecodeOptions { beam_size: 2, max_len: Some(5), alpha: 0.6 };
    let mut seen = Vec::new();
    let out = m.translate_document(doc, &opts, |j, w| seen.push((j, w))).unwrap();
    assert_eq!(out.len(), 4);
    assert_eq!(seen, vec![(0, 0..0), (1, 0..1), (2, 0..2), (3, 1..3)]);
    for (j, t) in out.iter().enumerate() {
        assert_eq!(t, &m.translate_sentence(&doc.sentence_input(j, 2), &opts).unwrap());
    }

    let mut permuted = doc.clone();
    permuted.sentences[1..].reverse();
    let again = m.translate_document(&permuted, &opts, |_, _| {}).unwrap();
    assert_eq!(again[0], out[0]);

    let single = DocumentInput { sentences: doc.sentences[..1].to_vec() };
    let one = m.translate_document(&single, &opts, |_, _| {}).unwrap();
    assert_eq!(one[0], m.translate_sentence(&single.sentence_input(0, 2), &opts).unwrap());
}

#[test]
fn config_sidecar_roundtrip() {
    let (_, vocabs) = documents(13, 1);
    let cfg = tiny_config(&vocabs, true, false, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    cfg.save(&path).unwrap();
    assert_eq!(ModelConfig::load(&path).unwrap(), cfg);
    let bad = ModelConfig { heads: 3, ..cfg };
    assert!(Model::<f32>::new(bad).is_err());
}
