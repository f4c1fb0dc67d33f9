//! Corpus loading, example construction and the synthetic generator.

use dnmt::datapipe::{
    build_vocab, corpus_to_string, document_input, generate_synthetic_corpus, make_examples, parse_corpus, synth_keys,
    DocumentPair, Side, SynthConfig, Vocabs, BOS, EOS,
};
use dnmt::discourse::{label_vocabulary, NOPATH};
use proptest::prelude::*;

fn corpus(seed: u64, docs: usize, sentences: usize) -> Vec<DocumentPair> {
    generate_synthetic_corpus(&SynthConfig {
        seed,
        docs,
        sentences_per_doc: sentences,
        vocab_size: 10,
        min_len: 1,
        max_len: 6,
        ..SynthConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn examples_cover_every_sentence_with_in_document_context(
        seed in 0u64..500,
        docs in 1usize..4,
        sentences in 1usize..6,
        k in 0usize..4,
    ) {
        let corpus = corpus(seed, docs, sentences);
        let src = build_vocab(&corpus, Side::Source, 100).unwrap();
        let tgt = build_vocab(&corpus, Side::Target, 100).unwrap();
        let labels = label_vocabulary(corpus.iter().map(|d| &d.tree));
        let vocabs = Vocabs { src: &src, tgt: &tgt, labels: &labels };
        let mut total = 0;
        for doc in &corpus {
            let input = document_input(doc, 16, &src, &labels);
            let examples = make_examples(doc, k, 16, vocabs);
            prop_assert_eq!(examples.len(), doc.src.len());
            total += examples.len();
            for (j, e) in examples.iter().enumerate() {
                prop_assert_eq!(&e.input.current, &input.sentences[j]);
                let expected: Vec<_> = input.sentences[j.saturating_sub(k)..j].to_vec();
                prop_assert_eq!(&e.input.context, &expected);
                prop_assert_eq!(e.target.first(), Some(&BOS));
                prop_assert_eq!(e.target.last(), Some(&EOS));
                prop_assert_eq!(e.target.len(), doc.tgt[j].len() + 2);
            }
        }
        prop_assert_eq!(total, docs * sentences);
    }

    #[test]
    fn sentence_paths_match_covering_edu(seed in 0u64..500, sentences in 1usize..6) {
        let corpus = corpus(seed, 2, sentences);
        let src = build_vocab(&corpus, Side::Source, 100).unwrap();
        let labels = label_vocabulary(corpus.iter().map(|d| &d.tree));
        for doc in &corpus {
            let input = document_input(doc, 3, &src, &labels);
            let edu_paths = doc.tree.edu_paths(3);
            let mut pos = 0;
            for (j, sentence) in doc.src.iter().enumerate() {
                prop_assert_eq!(input.sentences[j].tokens.len(), sentence.len());
                for t in 0..sentence.len() {
                    let span = doc.tree.spans().iter().position(|s| s.start <= pos && pos < s.end).unwrap();
                    prop_assert_eq!(&input.sentences[j].paths[t], &labels.encode(&edu_paths[span]));
                    pos += 1;
                }
            }
        }
    }

    #[test]
    fn loader_accepts_exactly_consistent_records(
        seed in 0u64..500,
        extra_source in any::<bool>(),
        extra_target in any::<bool>(),
    ) {
        let doc = corpus(seed, 1, 3).remove(0);
        let mut record: serde_json::Value = serde_json::from_str(&doc.to_json_line()).unwrap();
        if extra_source {
            record["src"][0].as_array_mut().unwrap().push("extra".into());
        }
        if extra_target {
            record["tgt"].as_array_mut().unwrap().push(serde_json::json!(["v0"]));
        }
        let parsed = parse_corpus(&record.to_string());
        prop_assert_eq!(parsed.is_ok(), !extra_source && !extra_target);
    }

    #[test]
    fn serialisation_roundtrips(seed in 0u64..500, docs in 1usize..4) {
        let corpus = corpus(seed, docs, 3);
        prop_assert_eq!(parse_corpus(&corpus_to_string(&corpus)).unwrap(), corpus);
    }

    #[test]
    fn synthetic_targets_follow_the_substitution_rule(seed in 0u64..500) {
        let cfg = SynthConfig { seed, vocab_size: 10, ..SynthConfig::default() };
        let keys = synth_keys(&cfg.relations);
        for doc in generate_synthetic_corpus(&cfg).unwrap() {
            let mut pos = 0;
            for (s, t) in doc.src.iter().zip(&doc.tgt) {
                let span = doc.tree.spans().iter().position(|e| e.start <= pos && pos < e.end).unwrap();
                let full = doc.tree.extract_path(doc.tree.spans()[span].edu_id).unwrap();
                let key = full.labels().first().cloned().unwrap_or_else(|| NOPATH.to_string());
                let shift = 1 + keys.iter().position(|k| *k == key).unwrap();
                let expected: Vec<String> = s
                    .iter()
                    .rev()
                    .map(|w| format!("v{}", (w[1..].parse::<usize>().unwrap() + shift) % 10))
                    .collect();
                prop_assert_eq!(t, &expected);
                pos += s.len();
            }
        }
    }
}

#[test]
fn malformed_lines_are_reported_with_line_numbers() {
    let good = corpus(1, 1, 2)[0].to_json_line();
    let text = format!("{good}\n\n{{\"doc_id\": 3}}\n");
    let err = parse_corpus(&text).unwrap_err().to_string();
    assert!(err.starts_with("line 3"), "{err}");
    let bad_tree = good.replacen("\"rst\":\"(", "\"rst\":\"((", 1);
    assert!(parse_corpus(&bad_tree).is_err());
    assert!(parse_corpus("").unwrap().is_empty());
}

#[test]
fn synthetic_generator_rejects_empty_configs() {
    assert!(generate_synthetic_corpus(&SynthConfig { docs: 0, ..SynthConfig::default() }).is_err());
    assert!(generate_synthetic_corpus(&SynthConfig { min_len: 4, max_len: 2, ..SynthConfig::default() }).is_err());
    let a = generate_synthetic_corpus(&SynthConfig::default()).unwrap();
    assert_eq!(a, generate_synthetic_corpus(&SynthConfig::default()).unwrap());
}
