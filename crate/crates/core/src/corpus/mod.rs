//! Dataset ingestion, answer-format conversion, minibatch partitioning and
//! dataset statistics.

mod convert;
mod io;
mod tokenize;

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use convert::{
    best_span, best_span_over_passages, convert_generative_to_span, GenerativeSample, SpanMatch,
};
pub use io::{
    load_dataset, load_generative, parse_dataset, parse_generative, save_dataset,
    to_json_string, DatasetFormat, LoadOptions, DEFAULT_MAX_PASSAGE_TOKENS,
};
pub use tokenize::{detokenize, lemmatize, tokenize, tokenize_str, Token};

/// Task identifier. Task 1 is always the target task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl TaskId {
    pub const TARGET: TaskId = TaskId(1);

    pub fn is_target(self) -> bool {
        self == Self::TARGET
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Answer {
    /// Inclusive token range in the passage.
    Span { begin: usize, end: usize },
    /// Candidate entities, each given by its occurrence positions in the passage.
    Cloze {
        candidates: Vec<Vec<usize>>,
        gold: usize,
    },
}

impl Answer {
    /// Answer length in tokens. A cloze answer is a single entity token.
    pub fn len(&self) -> usize {
        match self {
            Answer::Span { begin, end } => end - begin + 1,
            Answer::Cloze { .. } => 1,
        }
    }

    pub fn is_span(&self) -> bool {
        matches!(self, Answer::Span { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task_id: TaskId,
    pub question: Vec<Token>,
    pub passage: Vec<Token>,
    pub answer: Answer,
    pub weight: f64,
}

impl Sample {
    /// Checks the answer against the passage and the weight contract.
    pub fn validate(&self) -> Result<()> {
        let n = self.passage.len();
        if n == 0 {
            return Err(Error::data(&self.id, "empty passage"));
        }
        if self.question.is_empty() {
            return Err(Error::data(&self.id, "empty question"));
        }
        match &self.answer {
            Answer::Span { begin, end } => {
                if begin > end {
                    return Err(Error::data(
                        &self.id,
                        format!("answer begin {begin} is after end {end}"),
                    ));
                }
                if *end >= n {
                    return Err(Error::data(
                        &self.id,
                        format!("answer end {end} is outside a passage of {n} tokens"),
                    ));
                }
            }
            Answer::Cloze { candidates, gold } => {
                if candidates.is_empty() {
                    return Err(Error::data(&self.id, "cloze sample without candidates"));
                }
                if *gold >= candidates.len() {
                    return Err(Error::data(
                        &self.id,
                        format!("gold candidate {gold} out of {} candidates", candidates.len()),
                    ));
                }
                for (c, occ) in candidates.iter().enumerate() {
                    if occ.is_empty() {
                        return Err(Error::data(
                            &self.id,
                            format!("candidate {c} has no occurrences"),
                        ));
                    }
                    if let Some(bad) = occ.iter().find(|&&i| i >= n) {
                        return Err(Error::data(
                            &self.id,
                            format!("candidate {c} occurrence {bad} is outside a passage of {n} tokens"),
                        ));
                    }
                }
            }
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::data(
                &self.id,
                format!("weight {} outside [0, 1]", self.weight),
            ));
        }
        if self.task_id.is_target() && self.weight != 1.0 {
            return Err(Error::data(&self.id, "target-task samples must have weight 1"));
        }
        Ok(())
    }

    /// Gold answer tokens for span samples.
    pub fn answer_tokens(&self) -> Option<&[Token]> {
        match self.answer {
            Answer::Span { begin, end } => Some(&self.passage[begin..=end]),
            Answer::Cloze { .. } => None,
        }
    }

    /// Cuts the passage to `limit` tokens. Returns `None` when the answer no
    /// longer fits. Cloze candidates that lose every occurrence are removed.
    pub fn truncated(mut self, limit: usize) -> Option<Sample> {
        if self.passage.len() <= limit {
            return Some(self);
        }
        self.passage.truncate(limit);
        match &mut self.answer {
            Answer::Span { end, .. } => {
                if *end >= limit {
                    return None;
                }
            }
            Answer::Cloze { candidates, gold } => {
                let mut kept = Vec::with_capacity(candidates.len());
                let mut new_gold = None;
                for (c, occ) in candidates.drain(..).enumerate() {
                    let occ: Vec<usize> = occ.into_iter().filter(|&i| i < limit).collect();
                    if occ.is_empty() {
                        continue;
                    }
                    if c == *gold {
                        new_gold = Some(kept.len());
                    }
                    kept.push(occ);
                }
                *candidates = kept;
                *gold = new_gold?;
            }
        }
        Some(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub avg_passage_tokens: f64,
    /// `None` when the dataset has no span answers.
    pub avg_answer_tokens: Option<f64>,
}

/// All samples of one task, plus the word inventory seen in them.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: TaskId,
    pub samples: Vec<Sample>,
    pub vocab: HashMap<String, usize>,
    pub stats: DatasetStats,
}

impl TaskDataset {
    pub fn new(task_id: TaskId, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.task_id != task_id {
                return Err(Error::data(
                    &s.id,
                    format!("sample has task {} inside a task-{} dataset", s.task_id, task_id),
                ));
            }
            s.validate()?;
        }
        let mut vocab = HashMap::new();
        for s in &samples {
            for t in s.question.iter().chain(&s.passage) {
                let next = vocab.len();
                vocab.entry(t.lower.clone()).or_insert(next);
            }
        }
        let stats = compute_stats(&samples);
        Ok(TaskDataset {
            task_id,
            samples,
            vocab,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn dataset_stats(ds: &TaskDataset) -> DatasetStats {
    compute_stats(&ds.samples)
}

fn compute_stats(samples: &[Sample]) -> DatasetStats {
    let count = samples.len();
    if count == 0 {
        return DatasetStats {
            count: 0,
            avg_passage_tokens: 0.0,
            avg_answer_tokens: None,
        };
    }
    let passage_total: usize = samples.iter().map(|s| s.passage.len()).sum();
    let spans: Vec<usize> = samples
        .iter()
        .filter(|s| s.answer.is_span())
        .map(|s| s.answer.len())
        .collect();
    let avg_answer_tokens = if spans.is_empty() {
        None
    } else {
        Some(spans.iter().sum::<usize>() as f64 / spans.len() as f64)
    };
    DatasetStats {
        count,
        avg_passage_tokens: passage_total as f64 / count as f64,
        avg_answer_tokens,
    }
}

/// Indices of the samples in one minibatch, all from a single task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub task_id: TaskId,
    pub indices: Vec<usize>,
}

/// Shuffles the sample order with `rng`, then chunks it into
/// `ceil(len / batch_size)` batches.
pub fn make_minibatches<R: Rng + ?Sized>(
    ds: &TaskDataset,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Minibatch> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|c| Minibatch {
            task_id: ds.task_id,
            indices: c.to_vec(),
        })
        .collect()
}
