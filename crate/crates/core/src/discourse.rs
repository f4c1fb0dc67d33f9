//! RST discourse trees: parsing, validation and root-to-leaf path labels.
//!
//! Tree files are s-expressions:
//!
//! ```text
//! tree     := node
//! node     := leaf | internal
//! internal := '(' RELATION child child ')'
//! child    := '(' ('N'|'S') node ')'
//! leaf     := '(' 'EDU' edu_id start_tok end_tok_exclusive ')'
//! RELATION := [A-Z][A-Z_-]*
//! ```
//!
//! Each edge on the walk from the root to an EDU contributes the label
//! `CHILD_IMPORTANCE + "_" + PARENT_RELATION`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

pub const NOPATH: &str = "NOPATH";
pub const PAD_LABEL: &str = "PAD";
pub const UNK_LABEL: &str = "UNK_LABEL";
pub const DEFAULT_MAX_DEPTH: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiscourseError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("invalid tree at {path}: {msg}")]
    Invariant { path: String, msg: String },
    #[error("no EDU with id {0}")]
    UnknownEdu(u32),
    #[error("tree covers {covered} tokens but the document has {expected}")]
    Alignment { expected: usize, covered: usize },
    #[error("invalid path label {0:?}")]
    Label(String),
    #[error("label vocabulary: {0}")]
    Vocab(String),
}

type Result<T> = std::result::Result<T, DiscourseError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Importance {
    Nucleus,
    Satellite,
}

impl Importance {
    pub fn as_str(self) -> &'static str {
        match self {
            Importance::Nucleus => "NUCLEUS",
            Importance::Satellite => "SATELLITE",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Importance::Nucleus => "N",
            Importance::Satellite => "S",
        }
    }
}

/// Uppercase relation name such as `ELABORATION` or `SAME-UNIT`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Relation(String);

impl Relation {
    pub fn new(name: &str) -> Result<Self> {
        if is_relation(name) {
            Ok(Self(name.to_string()))
        } else {
            Err(DiscourseError::Label(name.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

fn is_relation(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('A'..='Z'))
        && chars.all(|c| c.is_ascii_uppercase() || c == '_' || c == '-')
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Child {
    pub importance: Importance,
    pub node: Node,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Node {
    Internal {
        relation: Relation,
        left: Box<Child>,
        right: Box<Child>,
    },
    Leaf {
        edu_id: u32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EduSpan {
    pub edu_id: u32,
    pub start: usize,
    pub end: usize,
}

/// A validated binary RST tree over contiguous EDU spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscourseTree {
    root: Node,
    spans: Vec<EduSpan>,
}

/// Root-to-leaf labels such as `SATELLITE_ELABORATION`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PathLabelSequence(Vec<String>);

impl PathLabelSequence {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        for l in &labels {
            if l != NOPATH && split_label(l).is_none() {
                return Err(DiscourseError::Label(l.clone()));
            }
        }
        Ok(Self(labels))
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn nopath() -> Self {
        Self(vec![NOPATH.to_string()])
    }
}

impl fmt::Display for PathLabelSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

/// Splits `IMPORTANCE_RELATION` into its parts.
pub fn split_label(label: &str) -> Option<(Importance, Relation)> {
    let (imp, rel) = label.split_once('_')?;
    let importance = match imp {
        "NUCLEUS" => Importance::Nucleus,
        "SATELLITE" => Importance::Satellite,
        _ => return None,
    };
    Relation::new(rel).ok().map(|r| (importance, r))
}

fn edge_label(importance: Importance, relation: &Relation) -> String {
    format!("{}_{}", importance.as_str(), relation.as_str())
}

impl DiscourseTree {
    /// Builds and validates a tree from an already-constructed root.
    pub fn from_root(root: Node, spans: Vec<EduSpan>) -> Result<Self> {
        let tree = Self { root, spans };
        tree.validate()?;
        Ok(tree)
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn spans(&self) -> &[EduSpan] {
        &self.spans
    }

    pub fn edu_count(&self) -> usize {
        self.spans.len()
    }

    /// Number of tokens covered by the leaves.
    pub fn token_count(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }

    fn validate(&self) -> Result<()> {
        fn walk(node: &Node, path: &mut String, leaves: &mut Vec<(u32, String)>) -> Result<()> {
            match node {
                Node::Leaf { edu_id } => leaves.push((*edu_id, path.clone())),
                Node::Internal {
                    relation,
                    left,
                    right,
                } => {
                    if !is_relation(relation.as_str()) {
                        return Err(DiscourseError::Invariant {
                            path: path.clone(),
                            msg: format!("bad relation label {:?}", relation.as_str()),
                        });
                    }
                    if left.importance == Importance::Satellite
                        && right.importance == Importance::Satellite
                    {
                        return Err(DiscourseError::Invariant {
                            path: path.clone(),
                            msg: format!("{} node has no NUCLEUS child", relation.as_str()),
                        });
                    }
                    for (tag, child) in [(".0", left), (".1", right)] {
                        let len = path.len();
                        path.push_str(tag);
                        walk(&child.node, path, leaves)?;
                        path.truncate(len);
                    }
                }
            }
            Ok(())
        }
        let mut leaves = Vec::new();
        walk(&self.root, &mut "root".to_string(), &mut leaves)?;
        if leaves.len() != self.spans.len() {
            return Err(DiscourseError::Invariant {
                path: "root".into(),
                msg: format!("{} leaves but {} spans", leaves.len(), self.spans.len()),
            });
        }
        let mut expected_start = 0;
        let mut prev_id: Option<u32> = None;
        for ((leaf_id, path), span) in leaves.iter().zip(&self.spans) {
            if *leaf_id != span.edu_id {
                return Err(DiscourseError::Invariant {
                    path: path.clone(),
                    msg: format!("leaf EDU {leaf_id} does not match span EDU {}", span.edu_id),
                });
            }
            if prev_id.is_some_and(|p| span.edu_id <= p) {
                return Err(DiscourseError::Invariant {
                    path: path.clone(),
                    msg: format!("EDU ids out of order at EDU {}", span.edu_id),
                });
            }
            if span.end <= span.start {
                return Err(DiscourseError::Invariant {
                    path: path.clone(),
                    msg: format!("EDU {} has empty span {}..{}", span.edu_id, span.start, span.end),
                });
            }
            if span.start < expected_start {
                return Err(DiscourseError::Invariant {
                    path: path.clone(),
                    msg: format!(
                        "EDU {} span {}..{} overlaps the previous EDU ending at {expected_start}",
                        span.edu_id, span.start, span.end
                    ),
                });
            }
            if span.start > expected_start {
                return Err(DiscourseError::Invariant {
                    path: path.clone(),
                    msg: format!(
                        "EDU {} starts at {} leaving tokens {expected_start}..{} uncovered",
                        span.edu_id, span.start, span.start
                    ),
                });
            }
            expected_start = span.end;
            prev_id = Some(span.edu_id);
        }
        Ok(())
    }

    /// Canonical single-line s-expression.
    pub fn to_sexpr(&self) -> String {
        fn emit(node: &Node, spans: &[EduSpan], out: &mut String) {
            match node {
                Node::Leaf { edu_id } => {
                    let s = spans.iter().find(|s| s.edu_id == *edu_id).expect("validated");
                    out.push_str(&format!("(EDU {} {} {})", s.edu_id, s.start, s.end));
                }
                Node::Internal {
                    relation,
                    left,
                    right,
                } => {
                    out.push('(');
                    out.push_str(relation.as_str());
                    for child in [left, right] {
                        out.push_str(" (");
                        out.push_str(child.importance.short());
                        out.push(' ');
                        emit(&child.node, spans, out);
                        out.push(')');
                    }
                    out.push(')');
                }
            }
        }
        let mut out = String::new();
        emit(&self.root, &self.spans, &mut out);
        out
    }

    /// Root-to-leaf labels for one EDU; the root contributes none.
    pub fn extract_path(&self, edu_id: u32) -> Result<PathLabelSequence> {
        fn find(node: &Node, target: u32, acc: &mut Vec<String>) -> bool {
            match node {
                Node::Leaf { edu_id } => *edu_id == target,
                Node::Internal {
                    relation,
                    left,
                    right,
                } => {
                    for child in [left, right] {
                        acc.push(edge_label(child.importance, relation));
                        if find(&child.node, target, acc) {
                            return true;
                        }
                        acc.pop();
                    }
                    false
                }
            }
        }
        let mut labels = Vec::new();
        if find(&self.root, edu_id, &mut labels) {
            Ok(PathLabelSequence(labels))
        } else {
            Err(DiscourseError::UnknownEdu(edu_id))
        }
    }

    /// Paths for every EDU in leaf order, truncated to the `max_depth`
    /// leaf-nearest labels, with empty paths replaced by `NOPATH`.
    pub fn edu_paths(&self, max_depth: usize) -> Vec<PathLabelSequence> {
        let max_depth = max_depth.max(1);
        self.spans
            .iter()
            .map(|s| {
                let full = self.extract_path(s.edu_id).expect("span ids come from leaves");
                truncate_path(full, max_depth)
            })
            .collect()
    }

    /// Index into [`Self::spans`] of the EDU covering each token.
    pub fn token_edu_index(&self, doc_token_count: usize) -> Result<Vec<usize>> {
        if self.token_count() != doc_token_count {
            return Err(DiscourseError::Alignment {
                expected: doc_token_count,
                covered: self.token_count(),
            });
        }
        let mut out = Vec::with_capacity(doc_token_count);
        for (i, s) in self.spans.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, s.end - s.start));
        }
        Ok(out)
    }

    /// One path per document token; tokens of the same EDU share a path.
    pub fn token_paths(
        &self,
        doc_token_count: usize,
        max_depth: usize,
    ) -> Result<Vec<PathLabelSequence>> {
        let index = self.token_edu_index(doc_token_count)?;
        let paths = self.edu_paths(max_depth);
        Ok(index.into_iter().map(|i| paths[i].clone()).collect())
    }

    /// Every distinct edge label in the tree.
    pub fn labels(&self) -> BTreeSet<String> {
        fn walk(node: &Node, out: &mut BTreeSet<String>) {
            if let Node::Internal {
                relation,
                left,
                right,
            } = node
            {
                for child in [left, right] {
                    out.insert(edge_label(child.importance, relation));
                    walk(&child.node, out);
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.root, &mut out);
        out
    }
}

fn truncate_path(path: PathLabelSequence, max_depth: usize) -> PathLabelSequence {
    if path.is_empty() {
        return PathLabelSequence::nopath();
    }
    let labels = path.0;
    let skip = labels.len().saturating_sub(max_depth);
    PathLabelSequence(labels[skip..].to_vec())
}

// ---- parsing ----

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Open,
    Close,
    Atom(String),
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            chars: text.chars().peekable(),
            line: 1,
            col: 1,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    /// Next token with its starting (line, column).
    fn next(&mut self) -> Option<(Tok, usize, usize)> {
        while self.chars.peek().is_some_and(|c| c.is_whitespace()) {
            self.bump();
        }
        let (line, col) = (self.line, self.col);
        let c = *self.chars.peek()?;
        let tok = match c {
            '(' => {
                self.bump();
                Tok::Open
            }
            ')' => {
                self.bump();
                Tok::Close
            }
            _ => {
                let mut s = String::new();
                while let Some(&c) = self.chars.peek() {
                    if c.is_whitespace() || c == '(' || c == ')' {
                        break;
                    }
                    s.push(c);
                    self.bump();
                }
                Tok::Atom(s)
            }
        };
        Some((tok, line, col))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    peeked: Option<(Tok, usize, usize)>,
    spans: Vec<EduSpan>,
}

impl Parser<'_> {
    fn peek(&mut self) -> Option<&(Tok, usize, usize)> {
        if self.peeked.is_none() {
            self.peeked = self.lexer.next();
        }
        self.peeked.as_ref()
    }

    fn next(&mut self) -> Option<(Tok, usize, usize)> {
        self.peek();
        self.peeked.take()
    }

    fn err<T>(&self, line: usize, col: usize, msg: impl Into<String>) -> Result<T> {
        Err(DiscourseError::Syntax {
            line,
            col,
            msg: msg.into(),
        })
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<()> {
        match self.next() {
            Some((t, _, _)) if t == want => Ok(()),
            Some((t, l, c)) => self.err(l, c, format!("expected {what}, found {t:?}")),
            None => self.err(self.lexer.line, self.lexer.col, format!("expected {what}, found end of input")),
        }
    }

    fn atom(&mut self, what: &str) -> Result<(String, usize, usize)> {
        match self.next() {
            Some((Tok::Atom(s), l, c)) => Ok((s, l, c)),
            Some((t, l, c)) => self.err(l, c, format!("expected {what}, found {t:?}")),
            None => self.err(self.lexer.line, self.lexer.col, format!("expected {what}, found end of input")),
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let (s, l, c) = self.atom(what)?;
        s.parse::<usize>()
            .or_else(|_| self.err(l, c, format!("expected {what}, found {s:?}")))
    }

    fn node(&mut self, path: &str) -> Result<Node> {
        self.expect(Tok::Open, "'('")?;
        let (head, l, c) = self.atom("relation or EDU")?;
        if head == "EDU" {
            let id = self.number("EDU id")?;
            let start = self.number("start token")?;
            let end = self.number("end token")?;
            self.expect(Tok::Close, "')' after EDU")?;
            let edu_id = u32::try_from(id).or_else(|_| self.err(l, c, "EDU id too large"))?;
            self.spans.push(EduSpan { edu_id, start, end });
            return Ok(Node::Leaf { edu_id });
        }
        if !is_relation(&head) {
            return self.err(l, c, format!("invalid relation label {head:?}"));
        }
        let relation = Relation(head);
        let left = self.child(&format!("{path}.0"))?;
        let right = self.child(&format!("{path}.1"))?;
        match self.peek() {
            Some((Tok::Close, _, _)) => {
                self.next();
            }
            Some((Tok::Open, _, _)) => {
                return Err(DiscourseError::Invariant {
                    path: path.to_string(),
                    msg: format!("{} node is not binary", relation.as_str()),
                })
            }
            _ => {
                self.expect(Tok::Close, "')' closing relation")?;
            }
        }
        Ok(Node::Internal {
            relation,
            left: Box::new(left),
            right: Box::new(right),
        })
    }

    fn child(&mut self, path: &str) -> Result<Child> {
        match self.peek() {
            Some((Tok::Close, _, _)) => {
                let parent = path.rsplit_once('.').map_or(path, |(p, _)| p).to_string();
                return Err(DiscourseError::Invariant {
                    path: parent,
                    msg: "node is not binary".into(),
                });
            }
            _ => self.expect(Tok::Open, "'(' starting a child")?,
        }
        let (tag, l, c) = self.atom("N or S")?;
        let importance = match tag.as_str() {
            "N" => Importance::Nucleus,
            "S" => Importance::Satellite,
            _ => return self.err(l, c, format!("expected N or S, found {tag:?}")),
        };
        let node = self.node(path)?;
        self.expect(Tok::Close, "')' closing child")?;
        Ok(Child { importance, node })
    }
}

/// Parses and validates one tree.
pub fn parse_tree(text: &str) -> Result<DiscourseTree> {
    let mut p = Parser {
        lexer: Lexer::new(text),
        peeked: None,
        spans: Vec::new(),
    };
    let root = p.node("root")?;
    if let Some((t, l, c)) = p.next() {
        return p.err(l, c, format!("unexpected {t:?} after tree"));
    }
    DiscourseTree::from_root(root, p.spans)
}

// ---- label vocabulary ----

/// Sorted label inventory including the reserved `NOPATH`, `PAD` and
/// `UNK_LABEL`; ids are positions in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocab {
    labels: Vec<String>,
}

impl LabelVocab {
    pub fn from_labels<I: IntoIterator<Item = String>>(labels: I) -> Self {
        let mut set: BTreeSet<String> = labels.into_iter().collect();
        for r in [NOPATH, PAD_LABEL, UNK_LABEL] {
            set.insert(r.to_string());
        }
        Self {
            labels: set.into_iter().collect(),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn unk(&self) -> usize {
        self.id(UNK_LABEL).expect("reserved")
    }

    pub fn pad(&self) -> usize {
        self.id(PAD_LABEL).expect("reserved")
    }

    pub fn nopath(&self) -> usize {
        self.id(NOPATH).expect("reserved")
    }

    /// Maps labels to ids; unseen labels become `UNK_LABEL`.
    pub fn encode(&self, path: &PathLabelSequence) -> Vec<usize> {
        path.labels()
            .iter()
            .map(|l| self.id(l).unwrap_or_else(|| self.unk()))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.labels.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let labels: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(String::from).collect();
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DiscourseError::Vocab("labels are not strictly sorted".into()));
        }
        for r in [NOPATH, PAD_LABEL, UNK_LABEL] {
            if !labels.iter().any(|l| l == r) {
                return Err(DiscourseError::Vocab(format!("missing reserved label {r}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.to_text())
    }

    pub fn load(path: &Path) -> std::result::Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        Ok(Self::from_text(&fs::read_to_string(path)?)?)
    }
}

/// Sorted set of all labels observed in `trees`, plus reserved labels.
pub fn label_vocabulary<'a, I: IntoIterator<Item = &'a DiscourseTree>>(trees: I) -> LabelVocab {
    LabelVocab::from_labels(trees.into_iter().flat_map(|t| t.labels()))
}

// ---- random trees ----

/// Random valid tree over EDUs with the given token lengths. Nuclearity is
/// drawn uniformly from N-S, S-N and N-N; relations from `relations`.
pub fn random_tree<R: Rng>(rng: &mut R, edu_lengths: &[usize], relations: &[Relation]) -> DiscourseTree {
    assert!(!edu_lengths.is_empty() && !relations.is_empty());
    assert!(edu_lengths.iter().all(|&l| l > 0));
    let mut spans = Vec::with_capacity(edu_lengths.len());
    let mut start = 0;
    for (i, &len) in edu_lengths.iter().enumerate() {
        spans.push(EduSpan {
            edu_id: i as u32 + 1,
            start,
            end: start + len,
        });
        start += len;
    }
    fn build<R: Rng>(rng: &mut R, lo: usize, hi: usize, relations: &[Relation]) -> Node {
        if hi - lo == 1 {
            return Node::Leaf {
                edu_id: lo as u32 + 1,
            };
        }
        let split = rng.gen_range(lo + 1..hi);
        let relation = relations[rng.gen_range(0..relations.len())].clone();
        let (li, ri) = match rng.gen_range(0..3) {
            0 => (Importance::Nucleus, Importance::Satellite),
            1 => (Importance::Satellite, Importance::Nucleus),
            _ => (Importance::Nucleus, Importance::Nucleus),
        };
        let left = build(rng, lo, split, relations);
        let right = build(rng, split, hi, relations);
        Node::Internal {
            relation,
            left: Box::new(Child {
                importance: li,
                node: left,
            }),
            right: Box::new(Child {
                importance: ri,
                node: right,
            }),
        }
    }
    let root = build(rng, 0, edu_lengths.len(), relations);
    DiscourseTree::from_root(root, spans).expect("generator produces valid trees")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Six EDUs over three sentences; the path to e5 runs through two
    /// ELABORATION satellites and ends as the satellite of a CONTRAST.
    pub(crate) const SIX_EDU_TREE: &str = "(ELABORATION \
        (N (BACKGROUND (S (EDU 1 0 4)) (N (ELABORATION (N (EDU 2 4 9)) (S (EDU 3 9 13)))))) \
        (S (ELABORATION (N (EDU 4 13 17)) (S (CONTRAST (S (EDU 5 17 21)) (N (EDU 6 21 26)))))))";

    const TWO: &str = "(CONTRAST (N (EDU 1 0 3)) (S (EDU 2 3 7)))";

    #[test]
    fn parse_examples() {
        let t = parse_tree("(EDU 1 0 5)").unwrap();
        assert_eq!(t.edu_count(), 1);
        assert_eq!(t.token_count(), 5);

        let t = parse_tree(TWO).unwrap();
        match t.root() {
            Node::Internal { relation, left, right } => {
                assert_eq!(relation.as_str(), "CONTRAST");
                assert_eq!(left.importance, Importance::Nucleus);
                assert_eq!(right.importance, Importance::Satellite);
            }
            _ => panic!("expected internal root"),
        }
        assert_eq!(t.spans()[1], EduSpan { edu_id: 2, start: 3, end: 7 });

        let err = parse_tree("(X (S (EDU 1 0 1)) (S (EDU 2 1 2)))").unwrap_err();
        assert!(matches!(err, DiscourseError::Invariant { ref path, .. } if path == "root"), "{err}");
        assert!(err.to_string().contains("NUCLEUS"));
    }

    #[test]
    fn parse_errors_carry_positions() {
        let err = parse_tree("(CONTRAST\n  (N (EDU 1 0 3))\n  (Q (EDU 2 3 7)))").unwrap_err();
        assert_eq!(
            err,
            DiscourseError::Syntax { line: 3, col: 4, msg: "expected N or S, found \"Q\"".into() }
        );
        let err = parse_tree("(contrast (N (EDU 1 0 3)) (S (EDU 2 3 7)))").unwrap_err();
        assert!(matches!(err, DiscourseError::Syntax { line: 1, col: 2, .. }));
        assert!(matches!(parse_tree("(EDU 1 0 3"), Err(DiscourseError::Syntax { .. })));
        assert!(matches!(parse_tree("(EDU 1 0 3) x"), Err(DiscourseError::Syntax { .. })));
    }

    #[test]
    fn structural_violations() {
        let three = "(LIST (N (EDU 1 0 1)) (N (EDU 2 1 2)) (N (EDU 3 2 3)))";
        let err = parse_tree(three).unwrap_err();
        assert!(matches!(err, DiscourseError::Invariant { ref path, .. } if path == "root"));
        assert!(err.to_string().contains("not binary"));

        let unary = "(LIST (N (EDU 1 0 1)))";
        assert!(parse_tree(unary).unwrap_err().to_string().contains("not binary"));

        let overlap = "(LIST (N (EDU 1 0 3)) (N (EDU 2 2 5)))";
        let err = parse_tree(overlap).unwrap_err();
        assert!(matches!(err, DiscourseError::Invariant { ref path, .. } if path == "root.1"));
        assert!(err.to_string().contains("overlaps"));

        let gap = "(LIST (N (EDU 1 0 3)) (N (EDU 2 4 5)))";
        assert!(parse_tree(gap).unwrap_err().to_string().contains("uncovered"));

        let order = "(LIST (N (EDU 2 0 3)) (N (EDU 1 3 5)))";
        assert!(parse_tree(order).unwrap_err().to_string().contains("out of order"));

        let nested = "(A (N (B (S (EDU 1 0 1)) (S (EDU 2 1 2)))) (S (EDU 3 2 3)))";
        let err = parse_tree(nested).unwrap_err();
        assert!(matches!(err, DiscourseError::Invariant { ref path, .. } if path == "root.0"));
    }

    #[test]
    fn multinuclear_is_allowed() {
        assert!(parse_tree("(JOINT (N (EDU 1 0 1)) (N (EDU 2 1 2)))").is_ok());
        assert!(parse_tree("(SAME-UNIT (N (EDU 1 0 1)) (N (EDU 2 1 2)))").is_ok());
    }

    #[test]
    fn extract_path_examples() {
        let six = parse_tree(SIX_EDU_TREE).unwrap();
        assert_eq!(
            six.extract_path(5).unwrap().to_string(),
            "SATELLITE_ELABORATION SATELLITE_ELABORATION SATELLITE_CONTRAST"
        );
        assert!(parse_tree("(EDU 1 0 5)").unwrap().extract_path(1).unwrap().is_empty());
        let two = parse_tree(TWO).unwrap();
        assert_eq!(two.extract_path(1).unwrap().labels(), &["NUCLEUS_CONTRAST".to_string()]);
        assert_eq!(two.extract_path(9), Err(DiscourseError::UnknownEdu(9)));
    }

    #[test]
    fn token_paths_examples() {
        let two = parse_tree(TWO).unwrap();
        let paths = two.token_paths(7, DEFAULT_MAX_DEPTH).unwrap();
        assert_eq!(paths[4].labels(), &["SATELLITE_CONTRAST".to_string()]);
        assert_eq!(paths[0], paths[1]);
        assert_eq!(paths[1], paths[2]);
        assert_ne!(paths[2], paths[3]);
        assert_eq!(
            two.token_paths(8, 16).unwrap_err(),
            DiscourseError::Alignment { expected: 8, covered: 7 }
        );

        let single = parse_tree("(EDU 1 0 2)").unwrap();
        let p = single.token_paths(2, 16).unwrap();
        assert_eq!(p[0].labels(), &[NOPATH.to_string()]);
    }

    #[test]
    fn deep_paths_keep_leaf_nearest_labels() {
        // left-branching chain: EDU 1 sits under 20 internal nodes
        let mut text = String::from("(EDU 1 0 1)");
        for i in 0..20 {
            let rel = if i % 2 == 0 { "ELABORATION" } else { "CONTRAST" };
            text = format!("({rel} (N {text}) (S (EDU {} {} {})))", i + 2, i + 1, i + 2);
        }
        let tree = parse_tree(&text).unwrap();
        let full = tree.extract_path(1).unwrap();
        assert_eq!(full.len(), 20);
        let truncated = &tree.token_paths(21, 16).unwrap()[0];
        assert_eq!(truncated.labels(), &full.labels()[4..]);
    }

    #[test]
    fn label_vocabulary_examples() {
        let empty = label_vocabulary(std::iter::empty());
        assert_eq!(empty.labels(), &["NOPATH", "PAD", "UNK_LABEL"]);

        let six = parse_tree(SIX_EDU_TREE).unwrap();
        let v = label_vocabulary([&six]);
        for l in [
            "NUCLEUS_CONTRAST",
            "SATELLITE_CONTRAST",
            "NUCLEUS_ELABORATION",
            "SATELLITE_ELABORATION",
            "NUCLEUS_BACKGROUND",
            "SATELLITE_BACKGROUND",
        ] {
            assert!(v.id(l).is_some(), "{l}");
        }
        assert!(v.labels().windows(2).all(|w| w[0] < w[1]));
        let unseen = PathLabelSequence::new(vec!["NUCLEUS_CAUSE".into()]).unwrap();
        assert_eq!(v.encode(&unseen), vec![v.unk()]);
        assert_eq!(LabelVocab::from_text(&v.to_text()).unwrap(), v);
        assert!(LabelVocab::from_text("B\nA\n").is_err());
    }

    #[test]
    fn label_split() {
        let (imp, rel) = split_label("SATELLITE_TEXTUAL_ORGANIZATION").unwrap();
        assert_eq!(imp, Importance::Satellite);
        assert_eq!(rel.as_str(), "TEXTUAL_ORGANIZATION");
        assert!(split_label("CORE_X").is_none());
        assert!(PathLabelSequence::new(vec!["bogus".into()]).is_err());
    }
}
