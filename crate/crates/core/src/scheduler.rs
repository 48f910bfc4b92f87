//! Epoch-level ordering of task-tagged minibatches.
//!
//! [`schedule_simple`] shuffles every batch of every task together.
//! [`schedule_mixture`] keeps all target batches and adds `floor(alpha * N1)`
//! auxiliary batches drawn from the pool of all auxiliary tasks.
//!
//! Picking and shuffling use separate streams derived from the seed, so with
//! `alpha = 0` the mixture schedule equals the single-task schedule exactly.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::corpus::TaskId;
use crate::error::{Error, Result};
use crate::seed::{self, STREAM_PICK, STREAM_SHUFFLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScheduleEntry {
    pub task: TaskId,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    pub epoch: usize,
    pub seed: u64,
    pub entries: Vec<ScheduleEntry>,
}

impl BatchSchedule {
    /// One `epoch<TAB>task<TAB>batch` line per entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", self.epoch, e.task, e.batch)
                .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn count_for(&self, task: TaskId) -> usize {
        self.entries.iter().filter(|e| e.task == task).count()
    }
}

/// How auxiliary batches are drawn by [`schedule_mixture`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AuxSampling {
    #[default]
    WithoutReplacement,
    WithReplacement,
}

/// Number of auxiliary batches for ratio `alpha`: `floor(alpha * n_target)`.
/// A 1e-9 slack absorbs products such as `0.29 * 100 = 28.999999999999996`.
pub fn aux_batch_count(alpha: f64, n_target: usize) -> usize {
    (alpha * n_target as f64 + 1e-9).floor() as usize
}

fn shuffle_rng(seed: u64, epoch: usize) -> seed::StreamRng {
    seed::rng(seed, &[STREAM_SHUFFLE, epoch as u64])
}

fn all_entries(batch_counts: &[(TaskId, usize)]) -> impl Iterator<Item = ScheduleEntry> + '_ {
    batch_counts
        .iter()
        .flat_map(|&(task, n)| (0..n).map(move |batch| ScheduleEntry { task, batch }))
}

/// Uniform random permutation of every `(task, batch)` pair.
pub fn schedule_simple(epoch: usize, batch_counts: &[(TaskId, usize)], seed: u64) -> BatchSchedule {
    let mut entries: Vec<ScheduleEntry> = all_entries(batch_counts).collect();
    entries.shuffle(&mut shuffle_rng(seed, epoch));
    BatchSchedule {
        epoch,
        seed,
        entries,
    }
}

/// All target batches plus `floor(alpha * N1)` auxiliary batches, shuffled.
/// The target task must come first in `batch_counts`.
pub fn schedule_mixture(
    epoch: usize,
    batch_counts: &[(TaskId, usize)],
    alpha: f64,
    sampling: AuxSampling,
    seed: u64,
) -> Result<BatchSchedule> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Schedule(format!("mixture ratio must be finite and >= 0, got {alpha}")));
    }
    let Some(&(target, n_target)) = batch_counts.first() else {
        return Err(Error::Schedule("no tasks to schedule".into()));
    };
    if !target.is_target() {
        return Err(Error::Schedule(format!(
            "the first task must be the target (task 1), got task {target}"
        )));
    }
    let pool: Vec<ScheduleEntry> = all_entries(&batch_counts[1..]).collect();
    let picks = aux_batch_count(alpha, n_target);
    let mut entries: Vec<ScheduleEntry> = all_entries(&batch_counts[..1]).collect();
    if picks > 0 {
        let mut rng = seed::rng(seed, &[STREAM_PICK, epoch as u64]);
        match sampling {
            AuxSampling::WithoutReplacement => {
                if picks > pool.len() {
                    return Err(Error::Schedule(format!(
                        "mixture ratio {alpha} needs {picks} auxiliary batches but only {} exist; \
                         lower alpha or sample with replacement",
                        pool.len()
                    )));
                }
                entries.extend(index::sample(&mut rng, pool.len(), picks).iter().map(|i| pool[i]));
            }
            AuxSampling::WithReplacement => {
                if pool.is_empty() {
                    return Err(Error::Schedule("no auxiliary batches to sample from".into()));
                }
                entries.extend((0..picks).map(|_| pool[rng.gen_range(0..pool.len())]));
            }
        }
    }
    entries.shuffle(&mut shuffle_rng(seed, epoch));
    Ok(BatchSchedule {
        epoch,
        seed,
        entries,
    })
}
