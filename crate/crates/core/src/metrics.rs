//! Answer metrics: exact match, token F1, ROUGE-L and cloze accuracy.
//!
//! All functions take token sequences. Exact match and F1 normalize answers the
//! way SQuAD-style evaluation does: case folding, removal of punctuation, and
//! dropping the articles "a", "an" and "the". ROUGE-L compares tokens verbatim.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

pub fn normalize_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .filter_map(|t| {
            let cleaned: String = t
                .as_ref()
                .chars()
                .filter(|c| !c.is_ascii_punctuation() && !c.is_whitespace())
                .flat_map(char::to_lowercase)
                .collect();
            if cleaned.is_empty() || ARTICLES.contains(&cleaned.as_str()) {
                None
            } else {
                Some(cleaned)
            }
        })
        .collect()
}

/// 1.0 when the normalized sequences are equal, else 0.0.
pub fn exact_match<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> f64 {
    if normalize_tokens(pred) == normalize_tokens(gold) {
        1.0
    } else {
        0.0
    }
}

/// Harmonic mean of precision and recall over normalized token multisets.
pub fn token_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> f64 {
    let p = normalize_tokens(pred);
    let g = normalize_tokens(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with beta = 1.
pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(cand: &[S], reference: &[T]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / cand.len() as f64;
    let recall = lcs as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Mean metrics over `n` evaluated samples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub em: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Running sums for building a [`MetricReport`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccumulator {
    em: f64,
    f1: f64,
    rouge_l: f64,
    correct: f64,
    n: usize,
}

impl MetricAccumulator {
    /// Adds one span prediction. `correct` is exact positional agreement.
    pub fn add_span<S: AsRef<str>, T: AsRef<str>>(&mut self, pred: &[S], gold: &[T], correct: bool) {
        self.em += exact_match(pred, gold);
        self.f1 += token_f1(pred, gold);
        self.rouge_l += rouge_l(pred, gold);
        self.correct += f64::from(u8::from(correct));
        self.n += 1;
    }

    /// Adds one cloze prediction; every metric reduces to accuracy.
    pub fn add_choice(&mut self, correct: bool) {
        let v = f64::from(u8::from(correct));
        self.em += v;
        self.f1 += v;
        self.rouge_l += v;
        self.correct += v;
        self.n += 1;
    }

    pub fn report(&self) -> MetricReport {
        if self.n == 0 {
            return MetricReport::default();
        }
        let n = self.n as f64;
        MetricReport {
            em: self.em / n,
            f1: self.f1 / n,
            rouge_l: self.rouge_l / n,
            accuracy: self.correct / n,
            n: self.n,
        }
    }
}
