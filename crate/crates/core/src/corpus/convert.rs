//! Free-text answers to passage spans by ROUGE-L search.

use std::cmp::Ordering;

use super::tokenize::Token;
use super::{Answer, Sample, TaskId};

/// A sample whose answer is free text rather than a passage span.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeSample {
    pub id: String,
    pub question: Vec<Token>,
    pub passage: Vec<Token>,
    pub answer_text: Vec<Token>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanMatch {
    pub begin: usize,
    pub end: usize,
    pub lcs: usize,
    /// ROUGE-L F1 of the span against the answer.
    pub score: f64,
}

/// Finds the passage span with the highest ROUGE-L against `answer`, comparing
/// case-folded tokens. Ties go to the earliest begin, then the shortest span.
///
/// Runs in O(n² · |answer|) by extending one LCS row per begin position.
pub fn best_span(passage: &[Token], answer: &[Token]) -> Option<SpanMatch> {
    if passage.is_empty() || answer.is_empty() {
        return None;
    }
    let ans: Vec<&str> = answer.iter().map(|t| t.lower.as_str()).collect();
    let r = ans.len();
    let mut best: Option<(usize, usize, usize)> = None; // (begin, end, lcs)
    let mut prev = vec![0usize; r + 1];
    let mut cur = vec![0usize; r + 1];
    for b in 0..passage.len() {
        prev.iter_mut().for_each(|x| *x = 0);
        for e in b..passage.len() {
            let w = passage[e].lower.as_str();
            cur[0] = 0;
            for j in 1..=r {
                cur[j] = if w == ans[j - 1] {
                    prev[j - 1] + 1
                } else {
                    prev[j].max(cur[j - 1])
                };
            }
            std::mem::swap(&mut prev, &mut cur);
            let lcs = prev[r];
            let cand_len = e - b + 1;
            let better = match best {
                None => true,
                Some((bb, be, bl)) => {
                    // score = 2·lcs / (cand_len + r); compare exactly.
                    let lhs = lcs * (be - bb + 1 + r);
                    let rhs = bl * (cand_len + r);
                    lhs.cmp(&rhs) == Ordering::Greater
                }
            };
            if better {
                best = Some((b, e, lcs));
            }
        }
    }
    best.map(|(begin, end, lcs)| SpanMatch {
        begin,
        end,
        lcs,
        score: 2.0 * lcs as f64 / (end - begin + 1 + r) as f64,
    })
}

/// Picks the best-scoring span across several passages; earlier passages win ties.
/// Returns the passage index alongside the match.
pub fn best_span_over_passages(
    passages: &[Vec<Token>],
    answer: &[Token],
) -> Option<(usize, SpanMatch)> {
    let mut best: Option<(usize, SpanMatch)> = None;
    for (i, p) in passages.iter().enumerate() {
        if let Some(m) = best_span(p, answer) {
            if best.as_ref().is_none_or(|(_, b)| m.score > b.score) {
                best = Some((i, m));
            }
        }
    }
    best
}

/// Converts a free-text answer into a span sample, or `None` when the best span
/// scores below `rouge_threshold`.
pub fn convert_generative_to_span(
    sample: &GenerativeSample,
    rouge_threshold: f64,
    task_id: TaskId,
) -> Option<(Sample, SpanMatch)> {
    let m = best_span(&sample.passage, &sample.answer_text)?;
    if m.score < rouge_threshold {
        return None;
    }
    let converted = Sample {
        id: sample.id.clone(),
        task_id,
        question: sample.question.clone(),
        passage: sample.passage.clone(),
        answer: Answer::Span {
            begin: m.begin,
            end: m.end,
        },
        weight: 1.0,
    };
    Some((converted, m))
}
