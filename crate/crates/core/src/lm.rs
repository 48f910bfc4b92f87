//! Per-task scoring models: an interpolated add-k n-gram language model over
//! questions and a smoothed histogram of answer lengths.
//!
//! Both produce cross-entropy style scores in nats.
//!
//! # Question LM
//!
//! The vocabulary holds the `vocab_size` most frequent case-folded words (ties
//! broken alphabetically) plus `<unk>` at id 0. Each question is left-padded
//! with `order - 1` begin markers; the marker is only ever context, never
//! predicted. With `V` vocabulary entries, `k` the add-k constant and `λ` the
//! interpolation weight:
//!
//! ```text
//! P1(w)       = (c(w) + k) / (N + kV)
//! Pj(w | h)   = λ (c(h, w) + k) / (c(h) + kV) + (1 - λ) P(j-1)(w | h')   if c(h) > 0
//!             = P(j-1)(w | h')                                          otherwise
//! ```
//!
//! where `h'` drops the oldest word of `h`. Every level is normalized over the
//! vocabulary, so the mixture is too.
//!
//! # Answer-length model
//!
//! Add-k counts over lengths `1..=max_observed + 5`, plus one overflow bucket
//! shared by every longer length, so unseen lengths always score finitely when
//! `k > 0`.
//!
//! # File format
//!
//! [`TaskScorer::to_json`] writes a JSON object with `"format": "mtmrc-task-scorer"`
//! and `"version": 1`. N-gram tables are lists of `{context, total, next}` rows,
//! with `next` a list of `[word_id, count]` pairs, sorted by context then word id.
//! Context ids equal to the vocabulary length denote the begin marker.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
const FORMAT_NAME: &str = "mtmrc-task-scorer";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub order: usize,
    pub vocab_size: usize,
    /// Add-k constant; 0 disables smoothing.
    pub k: f64,
    /// Weight of the higher-order estimate at each interpolation level.
    pub lambda: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            order: 3,
            vocab_size: 10_000,
            k: 0.1,
            lambda: 0.7,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order < 1 {
            return Err(Error::Config("lm order must be at least 1".into()));
        }
        if self.vocab_size < 1 {
            return Err(Error::Config("lm vocab_size must be at least 1".into()));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("lm k must be finite and >= 0, got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lm lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionLanguageModel {
    config: LmConfig,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// `tables[j]` holds counts for contexts of length `j`.
    tables: Vec<HashMap<Vec<u32>, ContextCounts>>,
}

impl QuestionLanguageModel {
    /// Trains on case-folded question token sequences.
    pub fn train<S: AsRef<str>>(questions: &[Vec<S>], config: LmConfig) -> Result<Self> {
        config.validate()?;
        if questions.iter().all(|q| q.is_empty()) {
            return Err(Error::Training(
                "cannot train a question language model on an empty corpus".into(),
            ));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for q in questions {
            for w in q {
                *freq.entry(w.as_ref()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(config.vocab_size);

        let mut vocab = Vec::with_capacity(ranked.len() + 1);
        vocab.push(UNK.to_string());
        vocab.extend(ranked.into_iter().map(|(w, _)| w.to_string()));
        let index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();

        let mut lm = QuestionLanguageModel {
            config,
            vocab,
            index,
            tables: vec![HashMap::new(); config.order],
        };
        let bos = lm.bos();
        for q in questions {
            if q.is_empty() {
                continue;
            }
            let padded = lm.padded_ids(q, bos);
            for pos in (config.order - 1)..padded.len() {
                let w = padded[pos];
                for ctx_len in 0..config.order {
                    let ctx = padded[pos - ctx_len..pos].to_vec();
                    let entry = lm.tables[ctx_len].entry(ctx).or_default();
                    entry.total += 1;
                    *entry.next.entry(w).or_default() += 1;
                }
            }
        }
        Ok(lm)
    }

    fn bos(&self) -> u32 {
        self.vocab.len() as u32
    }

    fn padded_ids<S: AsRef<str>>(&self, q: &[S], bos: u32) -> Vec<u32> {
        let mut ids = vec![bos; self.config.order - 1];
        ids.extend(q.iter().map(|w| self.word_id(w.as_ref())));
        ids
    }

    /// Vocabulary id, or 0 for out-of-vocabulary words.
    pub fn word_id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    /// Probability of word id `w` after `history` (most recent last). Only the
    /// last `order - 1` history entries matter; the begin marker is
    /// `vocab().len()`.
    pub fn prob_id(&self, w: u32, history: &[u32]) -> f64 {
        let v = self.vocab.len() as f64;
        let k = self.config.k;
        let lambda = self.config.lambda;
        let unigram = &self.tables[0][&Vec::new()];
        let mut p = (unigram.next.get(&w).copied().unwrap_or(0) as f64 + k)
            / (unigram.total as f64 + k * v);
        for ctx_len in 1..self.config.order {
            if history.len() < ctx_len {
                break;
            }
            let ctx = &history[history.len() - ctx_len..];
            if let Some(cc) = self.tables[ctx_len].get(ctx) {
                if cc.total > 0 {
                    let c = cc.next.get(&w).copied().unwrap_or(0) as f64;
                    let higher = (c + k) / (cc.total as f64 + k * v);
                    p = lambda * higher + (1.0 - lambda) * p;
                }
            }
        }
        p
    }

    /// Mean negative log-probability (nats) of the question's words. An empty
    /// question scores 0.
    pub fn cross_entropy<S: AsRef<str>>(&self, q: &[S]) -> f64 {
        if q.is_empty() {
            return 0.0;
        }
        let padded = self.padded_ids(q, self.bos());
        let ctx = self.config.order - 1;
        let mut sum = 0.0;
        for pos in ctx..padded.len() {
            sum += self.prob_id(padded[pos], &padded[pos - ctx..pos]).ln();
        }
        -sum / q.len() as f64
    }

    /// Context keys present in the count tables, per context length. Used to
    /// check normalization.
    pub fn contexts(&self) -> Vec<Vec<u32>> {
        self.tables.iter().flat_map(|t| t.keys().cloned()).collect()
    }
}

/// Trains a question LM; see [`QuestionLanguageModel::train`].
pub fn train_question_lm<S: AsRef<str>>(
    questions: &[Vec<S>],
    config: LmConfig,
) -> Result<QuestionLanguageModel> {
    QuestionLanguageModel::train(questions, config)
}

pub fn question_cross_entropy<S: AsRef<str>>(lm: &QuestionLanguageModel, q: &[S]) -> f64 {
    lm.cross_entropy(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerLengthModel {
    /// `counts[l - 1]` is the number of answers of length `l`, for
    /// `1 <= l <= max_len`.
    counts: Vec<u64>,
    /// Add-k smoothing constant.
    k: f64,
}

pub const ANSWER_LENGTH_MARGIN: usize = 5;

impl AnswerLengthModel {
    /// Builds the histogram from observed lengths with add-`k` smoothing over
    /// `1..=max_observed + 5` and the overflow bucket.
    pub fn train(lengths: &[usize], k: f64) -> Result<Self> {
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::Config(format!("answer-length smoothing must be >= 0, got {k}")));
        }
        if lengths.contains(&0) {
            return Err(Error::Training("answer lengths must be positive".into()));
        }
        if lengths.is_empty() && k == 0.0 {
            return Err(Error::Training(
                "cannot build an unsmoothed answer-length model from no answers".into(),
            ));
        }
        let max_len = lengths.iter().copied().max().unwrap_or(0) + ANSWER_LENGTH_MARGIN;
        let mut counts = vec![0u64; max_len];
        for &l in lengths {
            counts[l - 1] += 1;
        }
        Ok(AnswerLengthModel { counts, k })
    }

    pub fn max_len(&self) -> usize {
        self.counts.len()
    }

    fn total(&self) -> f64 {
        self.counts.iter().sum::<u64>() as f64 + self.k * (self.counts.len() + 1) as f64
    }

    pub fn freq(&self, len: usize) -> f64 {
        let c = if (1..=self.counts.len()).contains(&len) {
            self.counts[len - 1] as f64
        } else {
            0.0
        };
        (c + self.k) / self.total()
    }

    /// Probability shared by all lengths above `max_len`.
    pub fn overflow_mass(&self) -> f64 {
        self.k / self.total()
    }

    /// `-ln freq(len)`.
    pub fn score(&self, len: usize) -> f64 {
        -self.freq(len).ln()
    }
}

pub fn answer_length_score(alm: &AnswerLengthModel, answer_len: usize) -> f64 {
    alm.score(answer_len)
}

/// The pair of models scoring one task's samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScorer {
    pub question_lm: QuestionLanguageModel,
    pub answer_lm: AnswerLengthModel,
}

#[derive(Serialize, Deserialize)]
struct ContextRow {
    context: Vec<u32>,
    total: u64,
    next: Vec<(u32, u64)>,
}

#[derive(Serialize, Deserialize)]
struct ScorerFile {
    format: String,
    version: u32,
    config: LmConfig,
    vocab: Vec<String>,
    tables: Vec<Vec<ContextRow>>,
    answer_lengths: AnswerLengthModel,
}

impl TaskScorer {
    pub fn to_json(&self) -> String {
        let lm = &self.question_lm;
        let tables = lm
            .tables
            .iter()
            .map(|t| {
                let sorted: BTreeMap<&Vec<u32>, &ContextCounts> = t.iter().collect();
                sorted
                    .into_iter()
                    .map(|(ctx, cc)| {
                        let next: BTreeMap<u32, u64> =
                            cc.next.iter().map(|(&w, &c)| (w, c)).collect();
                        ContextRow {
                            context: ctx.clone(),
                            total: cc.total,
                            next: next.into_iter().collect(),
                        }
                    })
                    .collect()
            })
            .collect();
        let file = ScorerFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            config: lm.config,
            vocab: lm.vocab.clone(),
            tables,
            answer_lengths: self.answer_lm.clone(),
        };
        serde_json::to_string(&file).expect("scorer always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScorerFile = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid scorer file: {e}")))?;
        if file.format != FORMAT_NAME || file.version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported scorer file {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        if file.tables.len() != file.config.order || file.vocab.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Config("scorer file is inconsistent with its config".into()));
        }
        let index = file
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        let tables = file
            .tables
            .into_iter()
            .map(|rows| {
                rows.into_iter()
                    .map(|r| {
                        (
                            r.context,
                            ContextCounts {
                                total: r.total,
                                next: r.next.into_iter().collect(),
                            },
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(TaskScorer {
            question_lm: QuestionLanguageModel {
                config: file.config,
                vocab: file.vocab,
                index,
                tables,
            },
            answer_lm: file.answer_lengths,
        })
    }
}
