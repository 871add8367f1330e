//! Fuzzy correction of generated answers against a sample's OCR candidates.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::Region;
use crate::text::canonicalize;

pub const DEFAULT_THRESHOLD: u8 = 80;
pub const DEFAULT_MAX_NGRAM: usize = 4;

/// Edit distance over two char slices (two-row dynamic program).
pub fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    if a.len() < b.len() {
        return levenshtein_chars(b, a);
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance between the canonical forms of `a` and `b`, counted
/// in Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = canonicalize(a).chars().collect();
    let b: Vec<char> = canonicalize(b).chars().collect();
    levenshtein_chars(&a, &b)
}

/// `round(100 * (1 - d / max(|a|, |b|)))`, rounding half up; two empty
/// strings score 100.
pub fn similarity(a: &str, b: &str) -> u8 {
    let a: Vec<char> = canonicalize(a).chars().collect();
    let b: Vec<char> = canonicalize(b).chars().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 100;
    }
    let kept = longest - levenshtein_chars(&a, &b);
    // floor(100 * kept / longest + 1/2) in integers
    ((200 * kept + longest) / (2 * longest)) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    Token,
    Ngram,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidatePool {
    pub entries: Vec<(String, CandidateSource)>,
}

/// Canonical scene-token texts sorted by `(y1, x1)` of their boxes.
pub fn reading_order_texts(tokens: &[Region]) -> Vec<String> {
    let mut order: Vec<&Region> = tokens.iter().collect();
    order.sort_by(|a, b| {
        a.bbox
            .y1
            .total_cmp(&b.bbox.y1)
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
    });
    order.iter().map(|r| canonicalize(&r.text)).collect()
}

impl CandidatePool {
    /// Tokens followed by their contiguous n-grams (2 <= n <= `max_ngram`).
    /// `texts` must already be in reading order. Duplicates keep the first
    /// occurrence; empty strings are dropped.
    pub fn from_texts<S: AsRef<str>>(texts: &[S], max_ngram: usize) -> Self {
        let canon: Vec<String> = texts
            .iter()
            .map(|t| canonicalize(t.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        let tokens = canon.iter().cloned().map(|t| (t, CandidateSource::Token));
        let grams = crate::text::ngrams(&canon, 2, max_ngram)
            .into_iter()
            .map(|g| (g, CandidateSource::Ngram));
        for (text, source) in tokens.chain(grams) {
            if seen.insert(text.clone()) {
                entries.push((text, source));
            }
        }
        Self { entries }
    }

    pub fn from_regions(tokens: &[Region], max_ngram: usize) -> Self {
        Self::from_texts(&reading_order_texts(tokens), max_ngram)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.entries.iter().any(|(t, _)| t == text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub original: String,
    pub corrected: String,
    pub best_candidate: Option<String>,
    pub score: u8,
    pub applied: bool,
}

/// Replaces `answer` by its most similar pool entry when that entry scores at
/// least `threshold`. Ties prefer the shorter, then lexicographically smaller
/// candidate. Exact members and empty pools pass through unchanged.
pub fn correct_answer(answer: &str, pool: &CandidatePool, threshold: u8) -> CorrectionResult {
    let canon = canonicalize(answer);
    let pass = |best: Option<String>, score: u8| CorrectionResult {
        original: answer.to_string(),
        corrected: answer.to_string(),
        best_candidate: best,
        score,
        applied: false,
    };
    if pool.contains(&canon) {
        return pass(Some(canon), 100);
    }
    let best = pool
        .entries
        .iter()
        .map(|(c, _)| (similarity(&canon, c), c))
        .max_by(|(sa, a), (sb, b)| {
            sa.cmp(sb)
                .then_with(|| b.chars().count().cmp(&a.chars().count()))
                .then_with(|| b.cmp(a))
        });
    match best {
        None => pass(None, 0),
        Some((score, cand)) if score >= threshold => CorrectionResult {
            original: answer.to_string(),
            corrected: cand.clone(),
            best_candidate: Some(cand.clone()),
            score,
            applied: true,
        },
        Some((score, cand)) => pass(Some(cand.clone()), score),
    }
}
