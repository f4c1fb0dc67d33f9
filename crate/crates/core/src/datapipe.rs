//! Corpus files, vocabularies, example assembly and synthetic documents.
//!
//! A corpus is JSON lines, one document per line:
//! `{"doc_id": .., "src": [[tok, ..], ..], "tgt": [[tok, ..], ..], "rst": "<tree>"}`
//! where the tree spans the concatenated source tokens.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discourse::{parse_tree, random_tree, DiscourseError, DiscourseTree, LabelVocab, Relation, NOPATH};
use crate::model::{DocumentInput, SentenceInput, SourceSentence};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("line {line}, document {doc_id}: {source}")]
    Tree {
        line: usize,
        doc_id: String,
        source: DiscourseError,
    },
    #[error("document {doc_id}: tree covers {covered} tokens but the source has {actual}")]
    Alignment {
        doc_id: String,
        covered: usize,
        actual: usize,
    },
    #[error("document {doc_id}: {src} source sentences but {tgt} target sentences")]
    SentenceCount { doc_id: String, src: usize, tgt: usize },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("synthetic corpus: {0}")]
    Synth(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Debug, PartialEq)]
pub struct DocumentPair {
    pub doc_id: String,
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
    pub tree: DiscourseTree,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    doc_id: String,
    src: Vec<Vec<String>>,
    tgt: Vec<Vec<String>>,
    rst: String,
}

impl DocumentPair {
    /// Checks sentence counts and tree coverage.
    pub fn new(doc_id: String, src: Vec<Vec<String>>, tgt: Vec<Vec<String>>, tree: DiscourseTree) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(CorpusError::SentenceCount {
                doc_id,
                src: src.len(),
                tgt: tgt.len(),
            });
        }
        let actual = src.iter().map(Vec::len).sum();
        if tree.token_count() != actual {
            return Err(CorpusError::Alignment {
                doc_id,
                covered: tree.token_count(),
                actual,
            });
        }
        Ok(Self { doc_id, src, tgt, tree })
    }

    pub fn source_token_count(&self) -> usize {
        self.src.iter().map(Vec::len).sum()
    }

    /// Start offset of every source sentence in the document token stream.
    pub fn sentence_offsets(&self) -> Vec<usize> {
        self.src
            .iter()
            .scan(0, |acc, s| {
                let start = *acc;
                *acc += s.len();
                Some(start)
            })
            .collect()
    }

    pub fn to_json_line(&self) -> String {
        let r = Record {
            doc_id: self.doc_id.clone(),
            src: self.src.clone(),
            tgt: self.tgt.clone(),
            rst: self.tree.to_sexpr(),
        };
        serde_json::to_string(&r).expect("record serialises")
    }
}

pub fn parse_corpus(text: &str) -> Result<Vec<DocumentPair>> {
    let mut docs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(raw).map_err(|e| CorpusError::Schema {
            line,
            msg: e.to_string(),
        })?;
        let tree = parse_tree(&r.rst).map_err(|source| CorpusError::Tree {
            line,
            doc_id: r.doc_id.clone(),
            source,
        })?;
        docs.push(DocumentPair::new(r.doc_id, r.src, r.tgt, tree)?);
    }
    Ok(docs)
}

pub fn load_corpus(path: &Path) -> Result<Vec<DocumentPair>> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn corpus_to_string(docs: &[DocumentPair]) -> String {
    docs.iter().map(|d| d.to_json_line() + "\n").collect()
}

pub fn save_corpus(path: &Path, docs: &[DocumentPair]) -> Result<()> {
    fs::write(path, corpus_to_string(docs))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Word vocabulary with `<pad>`, `<s>`, `</s>`, `<unk>` at ids 0..4.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by `words` in order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// `BOS tokens EOS`.
    pub fn encode_target(&self, tokens: &[String]) -> Vec<usize> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        out.push(BOS);
        out.extend(tokens.iter().map(|t| self.id(t)));
        out.push(EOS);
        out
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// Non-reserved tokens, one per line; line `n` holds id `n + 4`.
    pub fn to_text(&self) -> String {
        self.tokens[RESERVED.len()..].iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_words(text.lines().map(String::from))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Most frequent tokens of one side, ties broken lexicographically;
/// `max_size` counts the reserved entries.
pub fn build_vocab(docs: &[DocumentPair], side: Side, max_size: usize) -> Result<Vocab> {
    if max_size <= RESERVED.len() {
        return Err(CorpusError::Vocab(format!("max size {max_size} leaves no room for words")));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in docs {
        let sents = match side {
            Side::Source => &d.src,
            Side::Target => &d.tgt,
        };
        for t in sents.iter().flatten() {
            if !RESERVED.contains(&t.as_str()) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab::from_words(
        ranked
            .into_iter()
            .take(max_size - RESERVED.len())
            .map(|(t, _)| t.to_string()),
    )
}

/// Source side of a document as model input: token ids and per-token label
/// paths, sliced per sentence from the document-level paths.
pub fn document_input(doc: &DocumentPair, max_depth: usize, vocab: &Vocab, labels: &LabelVocab) -> DocumentInput {
    let paths = doc
        .tree
        .token_paths(doc.source_token_count(), max_depth)
        .expect("validated documents are aligned");
    let mut offset = 0;
    let sentences = doc
        .src
        .iter()
        .map(|s| {
            let sp = paths[offset..offset + s.len()].iter().map(|p| labels.encode(p)).collect();
            offset += s.len();
            SourceSentence {
                tokens: vocab.encode(s),
                paths: sp,
            }
        })
        .collect();
    DocumentInput { sentences }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: SentenceInput,
    /// `BOS tokens EOS`.
    pub target: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct Vocabs<'a> {
    pub src: &'a Vocab,
    pub tgt: &'a Vocab,
    pub labels: &'a LabelVocab,
}

/// One example per sentence, each with up to `k` preceding sentences of the
/// same document as context.
pub fn make_examples(doc: &DocumentPair, k: usize, max_depth: usize, vocabs: Vocabs<'_>) -> Vec<Example> {
    let input = document_input(doc, max_depth, vocabs.src, vocabs.labels);
    doc.tgt
        .iter()
        .enumerate()
        .map(|(j, tgt)| Example {
            input: input.sentence_input(j, k),
            target: vocabs.tgt.encode_target(tgt),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub docs: usize,
    pub sentences_per_doc: usize,
    pub vocab_size: usize,
    pub relations: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            docs: 16,
            sentences_per_doc: 4,
            vocab_size: 40,
            relations: ["BACKGROUND", "CONTRAST", "ELABORATION"].map(String::from).to_vec(),
            min_len: 3,
            max_len: 7,
        }
    }
}

/// Every label key a synthetic sentence can have, sorted; a sentence's
/// substitution shift is `1 + ` its key's position.
pub fn synth_keys(relations: &[String]) -> Vec<String> {
    let mut keys: Vec<String> = relations
        .iter()
        .flat_map(|r| [format!("NUCLEUS_{r}"), format!("SATELLITE_{r}")])
        .chain([NOPATH.to_string()])
        .collect();
    keys.sort();
    keys.dedup();
    keys
}

/// Random documents whose target sentence is the reversed source with every
/// word index shifted by an amount keyed on the root-nearest discourse label
/// of the sentence's first token.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<Vec<DocumentPair>> {
    if cfg.docs == 0 || cfg.sentences_per_doc == 0 || cfg.vocab_size == 0 {
        return Err(CorpusError::Synth("document, sentence and vocabulary counts must be at least 1".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(CorpusError::Synth("sentence lengths need 1 <= min_len <= max_len".into()));
    }
    let relations = cfg
        .relations
        .iter()
        .map(|r| Relation::new(r))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CorpusError::Synth(e.to_string()))?;
    if relations.is_empty() {
        return Err(CorpusError::Synth("at least one relation is required".into()));
    }
    let keys = synth_keys(&cfg.relations);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut docs = Vec::with_capacity(cfg.docs);
    for d in 0..cfg.docs {
        let src: Vec<Vec<usize>> = (0..cfg.sentences_per_doc)
            .map(|_| {
                let len = rng.gen_range(cfg.min_len..=cfg.max_len);
                (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect()
            })
            .collect();
        let mut edus = Vec::new();
        for s in &src {
            if s.len() >= 2 && rng.gen_bool(0.5) {
                let cut = rng.gen_range(1..s.len());
                edus.push(cut);
                edus.push(s.len() - cut);
            } else {
                edus.push(s.len());
            }
        }
        let tree = random_tree(&mut rng, &edus, &relations);
        let total: usize = src.iter().map(Vec::len).sum();
        let paths = tree.token_paths(total, usize::MAX).expect("generated tree covers the document");
        let mut offset = 0;
        let mut tgt = Vec::with_capacity(src.len());
        for s in &src {
            let key = paths[offset].labels().first().map_or(NOPATH, String::as_str);
            let shift = 1 + keys.iter().position(|k| k == key).expect("keys cover every label");
            tgt.push(
                s.iter()
                    .rev()
                    .map(|&w| format!("v{}", (w + shift) % cfg.vocab_size))
                    .collect(),
            );
            offset += s.len();
        }
        let src = src
            .into_iter()
            .map(|s| s.into_iter().map(|w| format!("w{w}")).collect())
            .collect();
        docs.push(DocumentPair::new(format!("synth-{d:04}"), src, tgt, tree)?);
    }
    Ok(docs)
}
