//! Word error rate.
//!
//! Per-utterance WER comes from a unit-cost Levenshtein alignment over
//! space-delimited words. When several alignments share the minimum cost the
//! backtrace prefers a substitution over an insertion/deletion pair.
//!
//! An empty reference is flagged: its WER is 0 for an empty hypothesis and 1
//! otherwise (every hypothesis word is an insertion, counted against the
//! hypothesis length).

use serde::Serialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
    pub empty_reference: bool,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Levenshtein alignment of two token sequences with S/D/I counts.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, usize, usize) {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = sub.min(del).min(ins);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut d, mut ins) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if cost[(i - 1) * w + j - 1] + diff == here {
                s += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[(i - 1) * w + j] + 1 == here {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    (s, d, ins)
}

pub fn wer(reference: &[&str], hypothesis: &[&str]) -> WerBreakdown {
    let (s, d, i) = align(reference, hypothesis);
    let n = reference.len();
    let wer = if n == 0 {
        if hypothesis.is_empty() {
            0.0
        } else {
            1.0
        }
    } else {
        (s + d + i) as f64 / n as f64
    };
    WerBreakdown {
        substitutions: s,
        deletions: d,
        insertions: i,
        ref_words: n,
        wer,
        empty_reference: n == 0,
    }
}

pub fn wer_text(reference: &str, hypothesis: &str) -> WerBreakdown {
    wer(&words(reference), &words(hypothesis))
}

/// Character error rate over non-space characters; debugging aid only.
pub fn cer_text(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let h: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let (s, d, i) = align(&r, &h);
    if r.is_empty() {
        return if h.is_empty() { 0.0 } else { 1.0 };
    }
    (s + d + i) as f64 / r.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusWer {
    /// Mean of per-utterance WER (primary convention).
    pub utterance_averaged: f64,
    /// Σ errors / Σ reference words.
    pub pooled: f64,
    pub per_utterance: Vec<WerBreakdown>,
}

pub fn corpus_wer<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> CorpusWer {
    let per: Vec<WerBreakdown> = pairs.iter().map(|(r, h)| wer_text(r.as_ref(), h.as_ref())).collect();
    let n = per.len().max(1) as f64;
    let utterance_averaged = per.iter().map(|b| b.wer).sum::<f64>() / n;
    let errors: usize = per.iter().map(WerBreakdown::errors).sum();
    let refs: usize = per.iter().map(|b| b.ref_words).sum();
    let pooled = if refs == 0 {
        if errors == 0 {
            0.0
        } else {
            1.0
        }
    } else {
        errors as f64 / refs as f64
    };
    CorpusWer {
        utterance_averaged,
        pooled,
        per_utterance: per,
    }
}
