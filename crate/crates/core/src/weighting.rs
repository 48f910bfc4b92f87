//! Cross-entropy-difference sample weights for auxiliary-task samples.
//!
//! Every auxiliary sample of task `k` is scored four ways: its question under
//! the target question LM and under task `k`'s own LM, and its answer length
//! under the target and task-`k` length models. Each family of scores is
//! min-max normalized:
//!
//! * target-model scores over the union of all auxiliary samples;
//! * task-`k` scores over the samples of task `k` only.
//!
//! The difference `(H'1Q - H'kQ) + (H'1A - H'kA)` is low for samples that look
//! like the target task and unlike their own task. Weights are
//! `1 - minmax(CED)` over all auxiliary samples of all tasks. Target samples
//! always keep weight 1. A constant score family normalizes to all zeros.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TaskDataset, TaskId};
use crate::error::{Error, Result};
use crate::lm::{AnswerLengthModel, LmConfig, QuestionLanguageModel, TaskScorer};

/// Maps scores linearly onto [0, 1]. Constant (or empty) input maps to zeros.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|&x| (x - min) / range).collect()
}

/// Cross-entropy difference of normalized scores, in [-2, 2].
pub fn ced(h1q: f64, hkq: f64, h1a: f64, hka: f64) -> f64 {
    (h1q - hkq) + (h1a - hka)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub task: TaskId,
    /// Position of the sample inside its dataset.
    pub index: usize,
    pub h1q: f64,
    pub hkq: f64,
    pub h1a: f64,
    pub hka: f64,
    pub h1q_norm: f64,
    pub hkq_norm: f64,
    pub h1a_norm: f64,
    pub hka_norm: f64,
    pub ced: f64,
    pub ced_prime: f64,
}

/// Scores for every auxiliary sample, ordered by (task, id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeightSummary {
    pub task: TaskId,
    pub count: usize,
    pub mean_ced_prime: f64,
    pub mean_question_score: f64,
    pub mean_answer_score: f64,
}

impl ScoreTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes each row's weight into its sample and resets target weights to 1.
    pub fn apply(&self, target: &mut TaskDataset, auxiliaries: &mut [TaskDataset]) {
        for s in &mut target.samples {
            s.weight = 1.0;
        }
        let mut by_task: HashMap<TaskId, &mut TaskDataset> =
            auxiliaries.iter_mut().map(|d| (d.task_id, d)).collect();
        for row in &self.rows {
            if let Some(ds) = by_task.get_mut(&row.task) {
                ds.samples[row.index].weight = row.ced_prime;
            }
        }
    }

    /// Tab-separated export, six decimals, rows already in (task, id) order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\ttask\tH1Q\tHkQ\tH1A\tHkA\tCED\tCEDprime\n");
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.id, r.task, r.h1q, r.hkq, r.h1a, r.hka, r.ced, r.ced_prime
            )
            .expect("writing to a String cannot fail");
        }
        out
    }

    /// Per-task means of the weight and of its question and answer components,
    /// each component negated and min-max normalized over all rows.
    pub fn summaries(&self) -> Vec<TaskWeightSummary> {
        let q_part: Vec<f64> = self.rows.iter().map(|r| -(r.h1q_norm - r.hkq_norm)).collect();
        let a_part: Vec<f64> = self.rows.iter().map(|r| -(r.h1a_norm - r.hka_norm)).collect();
        let q_norm = minmax_normalize(&q_part);
        let a_norm = minmax_normalize(&a_part);
        let mut tasks: Vec<TaskId> = self.rows.iter().map(|r| r.task).collect();
        tasks.dedup();
        tasks
            .into_iter()
            .map(|task| {
                let idx: Vec<usize> = (0..self.rows.len())
                    .filter(|&i| self.rows[i].task == task)
                    .collect();
                let n = idx.len() as f64;
                TaskWeightSummary {
                    task,
                    count: idx.len(),
                    mean_ced_prime: idx.iter().map(|&i| self.rows[i].ced_prime).sum::<f64>() / n,
                    mean_question_score: idx.iter().map(|&i| q_norm[i]).sum::<f64>() / n,
                    mean_answer_score: idx.iter().map(|&i| a_norm[i]).sum::<f64>() / n,
                }
            })
            .collect()
    }

    /// The `n` highest and `n` lowest weighted rows (ties in table order).
    pub fn extremes(&self, n: usize) -> (Vec<&ScoreRow>, Vec<&ScoreRow>) {
        let mut sorted: Vec<&ScoreRow> = self.rows.iter().collect();
        sorted.sort_by(|a, b| b.ced_prime.total_cmp(&a.ced_prime));
        let top = sorted.iter().take(n).copied().collect();
        let bottom = sorted.iter().rev().take(n).copied().collect();
        (top, bottom)
    }
}

/// Trains one question LM and one answer-length model per task.
pub fn train_scorers(
    datasets: &[&TaskDataset],
    lm_config: LmConfig,
    length_smoothing: f64,
) -> Result<HashMap<TaskId, TaskScorer>> {
    datasets
        .par_iter()
        .map(|ds| {
            let questions: Vec<Vec<&str>> = ds
                .samples
                .iter()
                .map(|s| s.question.iter().map(|t| t.lower.as_str()).collect())
                .collect();
            let question_lm = QuestionLanguageModel::train(&questions, lm_config).map_err(|e| {
                Error::Training(format!("question LM for task {}: {e}", ds.task_id))
            })?;
            let lengths: Vec<usize> = ds.samples.iter().map(|s| s.answer.len()).collect();
            let answer_lm = AnswerLengthModel::train(&lengths, length_smoothing)?;
            Ok((
                ds.task_id,
                TaskScorer {
                    question_lm,
                    answer_lm,
                },
            ))
        })
        .collect()
}

/// Scores every auxiliary sample and derives its weight. Does not modify the
/// datasets; see [`ScoreTable::apply`].
pub fn assign_weights(
    target: &TaskDataset,
    auxiliaries: &[TaskDataset],
    scorers: &HashMap<TaskId, TaskScorer>,
) -> Result<ScoreTable> {
    let missing = |t: TaskId| Error::Config(format!("no scoring models for task {t}"));
    let target_scorer = scorers.get(&target.task_id).ok_or_else(|| missing(target.task_id))?;

    // Raw scores, grouped per auxiliary task.
    let mut per_task = Vec::with_capacity(auxiliaries.len());
    for ds in auxiliaries {
        let own = scorers.get(&ds.task_id).ok_or_else(|| missing(ds.task_id))?;
        let raw: Vec<[f64; 4]> = ds
            .samples
            .par_iter()
            .map(|s| {
                let q: Vec<&str> = s.question.iter().map(|t| t.lower.as_str()).collect();
                let len = s.answer.len();
                [
                    target_scorer.question_lm.cross_entropy(&q),
                    own.question_lm.cross_entropy(&q),
                    target_scorer.answer_lm.score(len),
                    own.answer_lm.score(len),
                ]
            })
            .collect();
        per_task.push(raw);
    }

    let all_h1q: Vec<f64> = per_task.iter().flatten().map(|r| r[0]).collect();
    let all_h1a: Vec<f64> = per_task.iter().flatten().map(|r| r[2]).collect();
    let h1q_norm = minmax_normalize(&all_h1q);
    let h1a_norm = minmax_normalize(&all_h1a);

    let mut rows = Vec::with_capacity(all_h1q.len());
    let mut offset = 0;
    for (ds, raw) in auxiliaries.iter().zip(&per_task) {
        let hkq: Vec<f64> = raw.iter().map(|r| r[1]).collect();
        let hka: Vec<f64> = raw.iter().map(|r| r[3]).collect();
        let hkq_norm = minmax_normalize(&hkq);
        let hka_norm = minmax_normalize(&hka);
        for (i, (s, r)) in ds.samples.iter().zip(raw).enumerate() {
            let g = offset + i;
            rows.push(ScoreRow {
                id: s.id.clone(),
                task: ds.task_id,
                index: i,
                h1q: r[0],
                hkq: r[1],
                h1a: r[2],
                hka: r[3],
                h1q_norm: h1q_norm[g],
                hkq_norm: hkq_norm[i],
                h1a_norm: h1a_norm[g],
                hka_norm: hka_norm[i],
                ced: ced(h1q_norm[g], hkq_norm[i], h1a_norm[g], hka_norm[i]),
                ced_prime: 0.0,
            });
        }
        offset += raw.len();
    }

    let ceds: Vec<f64> = rows.iter().map(|r| r.ced).collect();
    for (row, n) in rows.iter_mut().zip(minmax_normalize(&ceds)) {
        row.ced_prime = 1.0 - n;
    }
    rows.sort_by(|a, b| a.task.cmp(&b.task).then_with(|| a.id.cmp(&b.id)));
    Ok(ScoreTable { rows })
}
