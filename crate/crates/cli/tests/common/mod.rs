#![allow(dead_code)]

use std::path::Path;

/// Runs the command line in-process; returns exit code, stdout and stderr.
pub fn dnmt(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("dnmt").chain(args.iter().copied());
    let code = dnmt_cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Six EDUs over three sentences: the path to e5 runs through two
/// ELABORATION satellites and ends as the satellite of a CONTRAST.
pub const SIX_EDU_TREE: &str = "(ELABORATION \
    (N (BACKGROUND (S (EDU 1 0 4)) (N (ELABORATION (N (EDU 2 4 9)) (S (EDU 3 9 13)))))) \
    (S (ELABORATION (N (EDU 4 13 17)) (S (CONTRAST (S (EDU 5 17 21)) (N (EDU 6 21 26)))))))";

pub const E5_PATH: &str = "SATELLITE_ELABORATION SATELLITE_ELABORATION SATELLITE_CONTRAST";

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// The six-EDU tree as a corpus line; sentences cover tokens 0..13, 13..21
/// and 21..26, so e5 is the second half of sentence two.
pub fn six_edu_corpus_line() -> String {
    serde_json::json!({
        "doc_id": "six-edu",
        "src": [words("a", 13), words("b", 8), words("c", 5)],
        "tgt": [words("x", 3), words("y", 4), words("z", 2)],
        "rst": SIX_EDU_TREE,
    })
    .to_string()
}

/// Target sentences of a corpus file in translation output layout.
pub fn reference_text(corpus: &Path) -> String {
    let docs = dnmt::datapipe::load_corpus(corpus).unwrap();
    let mut text = String::new();
    for (i, d) in docs.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        for s in &d.tgt {
            text.push_str(&s.join(" "));
            text.push('\n');
        }
    }
    text
}

/// A small model that memorises a two-document corpus in a few hundred
/// steps.
pub const OVERFIT_SETTINGS: [&str; 11] = [
    "dim=32",
    "heads=4",
    "ffn_dim=64",
    "encoder_layers=1",
    "decoder_layers=1",
    "path_layers=1",
    "context_size=2",
    "warmup=100",
    "label_smoothing=0",
    "dropout=0",
    "seed=3",
];

pub fn train_args<'a>(corpus: &'a str, out: &'a str, steps: &'a str, context_steps: &'a str) -> Vec<&'a str> {
    let mut args = vec!["train", "--corpus", corpus, "--out", out, "--set", steps, "--set", context_steps];
    for s in OVERFIT_SETTINGS {
        args.push("--set");
        args.push(s);
    }
    args
}
