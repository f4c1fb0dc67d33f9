//! Corpus-level BLEU and TER over case-sensitive token lists, single
//! reference.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("reference {0} is empty")]
    EmptyReference(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub hyp: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn new(hyp: &str, reference: &str) -> Self {
        Self {
            hyp: hyp.split_whitespace().map(String::from).collect(),
            reference: reference.split_whitespace().map(String::from).collect(),
        }
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and hypothesis n-gram total over the corpus.
pub fn modified_precision(pairs: &[EvalPair], n: usize) -> (usize, usize) {
    let mut matches = 0;
    let mut total = 0;
    for p in pairs {
        let refs = ngrams(&p.reference, n);
        for (g, c) in ngrams(&p.hyp, n) {
            matches += c.min(refs.get(g).copied().unwrap_or(0));
            total += c;
        }
    }
    (matches, total)
}

/// `exp(1 − r/c)` when `c < r`, else 1; zero for an empty hypothesis.
pub fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// BLEU in `[0, 100]`. Without smoothing, any order with no matches gives 0;
/// with smoothing, orders above one use `(m+1)/(t+1)`.
pub fn corpus_bleu(pairs: &[EvalPair], max_n: usize, smoothing: bool) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let c: usize = pairs.iter().map(|p| p.hyp.len()).sum();
    let r: usize = pairs.iter().map(|p| p.reference.len()).sum();
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = modified_precision(pairs, n);
        let p = if smoothing && n > 1 {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        } else if m == 0 {
            return Ok(0.0);
        } else {
            m as f64 / t as f64
        };
        log_sum += p.ln();
    }
    Ok(100.0 * brevity_penalty(c, r) * (log_sum / max_n as f64).exp())
}

/// Word-level Levenshtein distance.
pub fn edit_distance(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const MAX_SHIFT_LEN: usize = 10;

/// Moves `hyp[start..start+len]` so that it begins at index `dest` of the
/// remaining sequence.
pub fn apply_shift(hyp: &[String], start: usize, len: usize, dest: usize) -> Vec<String> {
    let mut rest: Vec<String> = hyp[..start].iter().chain(&hyp[start + len..]).cloned().collect();
    let block = hyp[start..start + len].to_vec();
    rest.splice(dest..dest, block);
    rest
}

fn occurs_in(span: &[String], reference: &[String]) -> bool {
    reference.windows(span.len()).any(|w| w == span)
}

/// Edits for one pair: greedy block shifts (each costing one edit), then
/// Levenshtein distance. A shift is taken only if it lowers the total
/// (`d0 − d1 − 1 > 0`); among equal gains the leftmost, then shortest, then
/// earliest-destination shift wins.
pub fn ter_edits(hyp: &[String], reference: &[String]) -> usize {
    let mut cur = hyp.to_vec();
    let mut shifts = 0;
    let mut d0 = edit_distance(&cur, reference);
    loop {
        let mut best: Option<(Vec<String>, usize)> = None;
        for start in 0..cur.len() {
            for len in 1..=MAX_SHIFT_LEN.min(cur.len() - start) {
                if !occurs_in(&cur[start..start + len], reference) {
                    continue;
                }
                for dest in 0..=cur.len() - len {
                    if dest == start {
                        continue;
                    }
                    let shifted = apply_shift(&cur, start, len, dest);
                    let d1 = edit_distance(&shifted, reference);
                    if d1 + 1 < d0 && best.as_ref().is_none_or(|b| d1 < b.1) {
                        best = Some((shifted, d1));
                    }
                }
            }
        }
        match best {
            Some((shifted, d1)) => {
                cur = shifted;
                d0 = d1;
                shifts += 1;
            }
            None => return shifts + d0,
        }
    }
}

/// TER × 100: total edits over total reference length.
pub fn corpus_ter(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut edits = 0;
    let mut len = 0;
    for (i, p) in pairs.iter().enumerate() {
        if p.reference.is_empty() {
            return Err(MetricsError::EmptyReference(i));
        }
        edits += ter_edits(&p.hyp, &p.reference);
        len += p.reference.len();
    }
    Ok(100.0 * edits as f64 / len as f64)
}

/// Rounds to two decimals for reporting.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_perfect() {
        let pairs = [EvalPair::new("the cat sat on the mat", "the cat sat on the mat")];
        assert!((corpus_bleu(&pairs, 4, false).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_clipping() {
        let pairs = [EvalPair::new("the the the the the the the", "the cat is on the mat")];
        assert_eq!(modified_precision(&pairs, 1), (2, 7));
        assert_eq!(corpus_bleu(&pairs, 4, false).unwrap(), 0.0);
    }

    #[test]
    fn bleu_brevity() {
        assert!((brevity_penalty(3, 6) - (-1f64).exp()).abs() < 1e-12);
        let pairs = [EvalPair::new("a b c", "a b c d e f")];
        let bleu = corpus_bleu(&pairs, 3, false).unwrap();
        assert!((bleu - 100.0 * (-1f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn bleu_smoothing_avoids_zero() {
        let pairs = [EvalPair::new("a x b y", "a b c d")];
        assert_eq!(corpus_bleu(&pairs, 4, false).unwrap(), 0.0);
        assert!(corpus_bleu(&pairs, 4, true).unwrap() > 0.0);
        assert_eq!(corpus_bleu(&[], 4, false), Err(MetricsError::EmptyCorpus));
    }

    #[test]
    fn ter_examples() {
        assert_eq!(corpus_ter(&[EvalPair::new("a b c", "a b c")]).unwrap(), 0.0);
        assert!((corpus_ter(&[EvalPair::new("a b x d e", "a b c d e")]).unwrap() - 20.0).abs() < 1e-12);
        assert!((corpus_ter(&[EvalPair::new("b c d a", "a b c d")]).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(corpus_ter(&[EvalPair::new("a", "")]), Err(MetricsError::EmptyReference(0)));
        assert_eq!(ter_edits(&[], &EvalPair::new("", "a b").reference), 2);
    }

    #[test]
    fn shift_moves_block() {
        let h = EvalPair::new("a b c d e", "").hyp;
        assert_eq!(apply_shift(&h, 1, 2, 2).join(" "), "a d b c e");
        assert_eq!(apply_shift(&h, 3, 1, 0).join(" "), "d a b c e");
    }
}
