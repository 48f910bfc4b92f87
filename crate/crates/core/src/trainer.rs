//! Training loop: batch scheduling, weighted loss, Adamax, parameter moving
//! averages, dev evaluation and best-epoch selection.
//!
//! Every random choice is drawn from a stream derived from `TrainConfig::seed`
//! and the position it serves (epoch, batch, slot), and per-sample gradients
//! are summed in batch order. Parallel and single-threaded runs therefore
//! produce bit-identical results.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_minibatches, Answer, Minibatch, Sample, TaskDataset, TaskId};
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::{save_checkpoint, Mat, ModelConfig, ModelVocab, Network, Prediction};
use crate::scheduler::{schedule_mixture, schedule_simple, AuxSampling, BatchSchedule};
use crate::seed::{self, STREAM_BATCHES, STREAM_DROPOUT, STREAM_EMBEDDING, STREAM_INIT};
use crate::weighting::{assign_weights, train_scorers, ScoreTable};

/// How auxiliary data enters training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingMode {
    /// Every batch of every task, uniform sample weights.
    #[default]
    None,
    /// All target batches plus `alpha · N1` auxiliary batches per epoch.
    Mixture,
    /// Every batch of every task, auxiliary samples weighted by CED′.
    Ced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub mode: WeightingMode,
    /// Mixture ratio; required by, and only allowed with, `mode = mixture`.
    pub alpha: Option<f64>,
    /// Draw auxiliary batches with replacement in mixture mode.
    pub with_replacement: bool,
    pub seed: u64,
    pub ema_decay: f64,
    /// Global gradient-norm limit.
    pub clip_norm: f64,
    /// Single-threaded execution.
    pub deterministic: bool,
    /// In `ced` mode, use the weights already on the samples instead of
    /// scoring the auxiliary tasks.
    pub precomputed_weights: bool,
    pub lm: LmConfig,
    pub length_smoothing: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.002,
            epochs: 50,
            mode: WeightingMode::None,
            alpha: None,
            with_replacement: false,
            seed: 0,
            ema_decay: 0.995,
            clip_norm: 5.0,
            deterministic: false,
            precomputed_weights: false,
            lm: LmConfig::default(),
            length_smoothing: 1.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad(format!("learning_rate must be in (0, 1], got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1], got {}", self.ema_decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(self.length_smoothing > 0.0) {
            return bad(format!("length_smoothing must be positive, got {}", self.length_smoothing));
        }
        match (self.mode, self.alpha) {
            (WeightingMode::Mixture, None) => return bad("mode = mixture requires alpha".into()),
            (WeightingMode::Mixture, Some(a)) if !(a >= 0.0 && a.is_finite()) => {
                return bad(format!("alpha must be finite and >= 0, got {a}"));
            }
            (WeightingMode::None | WeightingMode::Ced, Some(_)) => {
                return bad("alpha is only used with mode = mixture".into());
            }
            _ => {}
        }
        self.lm.validate()?;
        self.model.validate()
    }

    fn aux_sampling(&self) -> AuxSampling {
        if self.with_replacement {
            AuxSampling::WithReplacement
        } else {
            AuxSampling::WithoutReplacement
        }
    }
}

/// Adamax optimizer state (first moment and exponentially weighted infinity
/// norm per parameter).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Mat>,
    pub u: Vec<Mat>,
}

impl AdamaxState {
    pub fn new(params: &[Mat]) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Mat], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        AdamaxState {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            u: zeros,
        }
    }
}

/// One Adamax update:
/// `m ← β1·m + (1-β1)·g`, `u ← max(β2·u, |g| + eps)`,
/// `θ ← θ - lr / (1 - β1^t) · m / u`.
pub fn adamax_step(params: &mut [Mat], grads: &[Mat], state: &mut AdamaxState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("optimizer tensor counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!("optimizer tensor {i} has mismatched shapes")));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in tensor {i}")));
        }
    }
    if !lr.is_finite() {
        return Err(Error::Numeric(format!("non-finite learning rate {lr}")));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let step_size = lr / (1.0 - b1.powi(state.step as i32));
    for ((p, g), (m, u)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.u.iter_mut())) {
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m.data[j] = b1 * m.data[j] + (1.0 - b1) * gj;
            u.data[j] = (b2 * u.data[j]).max(gj.abs() + eps);
            p.data[j] -= step_size * m.data[j] / u.data[j];
        }
    }
    Ok(())
}

/// Exponential moving average of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Mat>,
}

impl EmaState {
    /// Shadow initialized to a copy of `params`.
    pub fn new(params: &[Mat], decay: f64) -> Self {
        EmaState {
            decay,
            shadow: params.to_vec(),
        }
    }

    /// Shadow initialized to zeros.
    pub fn zeros_like(params: &[Mat], decay: f64) -> Self {
        EmaState {
            decay,
            shadow: params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect(),
        }
    }

    /// `shadow ← decay·shadow + (1 - decay)·params`
    pub fn update(&mut self, params: &[Mat]) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (a, b) in s.data.iter_mut().zip(&p.data) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_em: f64,
    pub dev_f1: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Moving-average parameters of the best dev epoch.
#[derive(Debug, Clone)]
pub struct BestModel {
    pub epoch: usize,
    pub params: Vec<Mat>,
    pub report: MetricReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The network holding the final live parameters.
    pub network: Network,
    pub best: BestModel,
    pub history: Vec<EpochLog>,
    pub reports: Vec<MetricReport>,
    /// Per-epoch sum of weighted batch losses, in schedule order.
    pub batch_losses: Vec<Vec<f64>>,
    /// Auxiliary weights computed in `ced` mode.
    pub weights: Option<ScoreTable>,
}

impl TrainOutcome {
    /// Writes the best epoch's moving-average parameters.
    pub fn save_best(&self, path: impl AsRef<Path>, cfg: &TrainConfig) -> Result<()> {
        let meta = serde_json::json!({
            "epoch": self.best.epoch,
            "dev": self.best.report,
            "train": cfg,
        });
        save_checkpoint(path, &self.network, &self.best.params, &meta)
    }
}

/// Weighted gradients of one minibatch, averaged over its samples.
///
/// `dropout_seed` enables training mode; slot `i` draws from the stream
/// `[dropout_seed, i]`. Samples with weight 0 are skipped entirely.
/// Returns the mean weighted loss and the dense gradients.
pub fn batch_gradients(
    net: &Network,
    params: &[Mat],
    batch: &[(&Sample, f64)],
    dropout_seed: Option<u64>,
    parallel: bool,
) -> Result<(f64, Vec<Mat>)> {
    let run = |(slot, (sample, weight)): (usize, &(&Sample, f64))| {
        if *weight == 0.0 {
            return Ok(None);
        }
        let mut rng = dropout_seed.map(|s| seed::rng(s, &[slot as u64]));
        let (loss, grads) = net.loss_and_gradients(params, sample, *weight, rng.as_mut())?;
        Ok(Some((loss * weight, grads)))
    };
    let results: Vec<Result<_>> = if parallel {
        batch.par_iter().enumerate().map(run).collect()
    } else {
        batch.iter().enumerate().map(run).collect()
    };
    let mut total = Vec::with_capacity(params.len());
    total.extend(params.iter().map(|p| Mat::zeros(p.rows, p.cols)));
    let mut loss = 0.0;
    for r in results {
        if let Some((l, g)) = r? {
            loss += l;
            g.accumulate_into(&mut total);
        }
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    for t in &mut total {
        t.scale_assign(inv);
    }
    Ok((loss * inv, total))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Mat::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Exact match, F1 and ROUGE-L over `dev` (accuracy for cloze samples).
pub fn evaluate(net: &Network, params: &[Mat], dev: &[Sample], parallel: bool) -> Result<MetricReport> {
    let predict = |s: &Sample| net.predict(params, s);
    let preds: Vec<Result<Prediction>> = if parallel {
        dev.par_iter().map(predict).collect()
    } else {
        dev.iter().map(predict).collect()
    };
    let mut acc = MetricAccumulator::default();
    for (s, p) in dev.iter().zip(preds) {
        match (p?, &s.answer) {
            (Prediction::Span { begin, end }, Answer::Span { begin: gb, end: ge }) => {
                let pred: Vec<&str> = s.passage[begin..=end].iter().map(|t| t.surface.as_str()).collect();
                let gold: Vec<&str> = s.passage[*gb..=*ge].iter().map(|t| t.surface.as_str()).collect();
                acc.add_span(&pred, &gold, (begin, end) == (*gb, *ge));
            }
            (Prediction::Cloze(c), Answer::Cloze { gold, .. }) => acc.add_choice(c == *gold),
            _ => unreachable!("prediction kind follows the answer kind"),
        }
    }
    Ok(acc.report())
}

/// The batch order the trainer uses in `epoch`, given per-task batch counts
/// with the target first.
pub fn epoch_schedule(cfg: &TrainConfig, counts: &[(TaskId, usize)], epoch: usize) -> Result<BatchSchedule> {
    match cfg.mode {
        WeightingMode::Mixture => schedule_mixture(
            epoch,
            counts,
            cfg.alpha.unwrap_or(0.0),
            cfg.aux_sampling(),
            cfg.seed,
        ),
        WeightingMode::None | WeightingMode::Ced => Ok(schedule_simple(epoch, counts, cfg.seed)),
    }
}

/// Vocabulary and freshly initialized network for the given training tasks.
pub fn build_network(datasets: &[&TaskDataset], cfg: &TrainConfig) -> Result<Network> {
    let vocab = ModelVocab::from_datasets(datasets.iter().copied(), seed::derive(cfg.seed, &[STREAM_EMBEDDING]));
    Network::new(cfg.model.clone(), vocab, seed::derive(cfg.seed, &[STREAM_INIT]))
}

pub fn train(
    target: &TaskDataset,
    auxiliaries: &[TaskDataset],
    dev: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_callback(target, auxiliaries, dev, cfg, |_| {})
}

/// Index of the best report by F1 (accuracy for cloze tasks); ties go to the
/// earlier epoch.
pub fn best_epoch(reports: &[MetricReport]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in reports.iter().enumerate() {
        if best.is_none_or(|b| r.f1 > reports[b].f1) {
            best = Some(i);
        }
    }
    best
}

/// [`train`], calling `on_epoch` after every epoch's evaluation.
pub fn train_with_callback(
    target: &TaskDataset,
    auxiliaries: &[TaskDataset],
    dev: &[Sample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    train_network(None, target, auxiliaries, dev, cfg, on_epoch)
}

/// Training starting from `initial` (a network whose vocabulary and layout
/// the caller chose) or, when `None`, from a fresh network built over the
/// training tasks.
pub fn train_network(
    initial: Option<Network>,
    target: &TaskDataset,
    auxiliaries: &[TaskDataset],
    dev: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !target.task_id.is_target() {
        return Err(Error::Config(format!("the target dataset must be task 1, got task {}", target.task_id)));
    }
    if target.is_empty() {
        return Err(Error::Config("the target dataset is empty".into()));
    }
    let mut seen = vec![target.task_id];
    for ds in auxiliaries {
        if seen.contains(&ds.task_id) {
            return Err(Error::Config(format!("task {} appears twice", ds.task_id)));
        }
        seen.push(ds.task_id);
    }

    let mut weights_table = None;
    let mut aux: Vec<TaskDataset> = auxiliaries.to_vec();
    let weighted = cfg.mode == WeightingMode::Ced;
    if weighted && !cfg.precomputed_weights && !aux.is_empty() {
        let mut all: Vec<&TaskDataset> = vec![target];
        all.extend(auxiliaries);
        let scorers = train_scorers(&all, cfg.lm, cfg.length_smoothing)?;
        let table = assign_weights(target, auxiliaries, &scorers)?;
        let mut t = target.clone();
        table.apply(&mut t, &mut aux);
        weights_table = Some(table);
    }

    let mut tasks: Vec<&TaskDataset> = vec![target];
    tasks.extend(aux.iter().filter(|ds| !ds.is_empty()));
    let by_id: HashMap<TaskId, &TaskDataset> = tasks.iter().map(|d| (d.task_id, *d)).collect();

    let mut net = match initial {
        Some(n) => n,
        None => build_network(&tasks, cfg)?,
    };
    let mut params = net.params.tensors().to_vec();
    let mut opt = AdamaxState::new(&params);
    let mut ema = EmaState::new(&params, cfg.ema_decay);
    let parallel = !cfg.deterministic;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut batch_losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestModel> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let batches: HashMap<TaskId, Vec<Minibatch>> = tasks
            .iter()
            .map(|ds| {
                let mut rng = seed::rng(cfg.seed, &[STREAM_BATCHES, epoch as u64, u64::from(ds.task_id.0)]);
                (ds.task_id, make_minibatches(ds, cfg.batch_size, &mut rng))
            })
            .collect();
        let counts: Vec<(TaskId, usize)> = tasks.iter().map(|d| (d.task_id, batches[&d.task_id].len())).collect();
        let schedule = epoch_schedule(cfg, &counts, epoch)?;

        let mut epoch_losses = Vec::with_capacity(schedule.entries.len());
        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        for (pos, entry) in schedule.entries.iter().enumerate() {
            let ds = by_id[&entry.task];
            let mb = &batches[&entry.task][entry.batch];
            let items: Vec<(&Sample, f64)> = mb
                .indices
                .iter()
                .map(|&i| {
                    let s = &ds.samples[i];
                    (s, if weighted { s.weight } else { 1.0 })
                })
                .collect();
            let dropout_seed = seed::derive(cfg.seed, &[STREAM_DROPOUT, epoch as u64, pos as u64]);
            let coords = |e: Error| match e {
                Error::Numeric(m) => Error::Numeric(format!(
                    "epoch {epoch}, batch {pos} (task {}, batch {}): {m}",
                    entry.task, entry.batch
                )),
                other => other,
            };
            let (loss, mut grads) =
                batch_gradients(&net, &params, &items, Some(dropout_seed), parallel).map_err(coords)?;
            if !loss.is_finite() {
                return Err(coords(Error::Numeric(format!("loss diverged to {loss}"))));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adamax_step(&mut params, &grads, &mut opt, cfg.learning_rate).map_err(coords)?;
            ema.update(&params);
            epoch_losses.push(loss);
            loss_sum += loss * items.len() as f64;
            sample_count += items.len();
        }

        let report = evaluate(&net, &ema.shadow, dev, parallel)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / sample_count.max(1) as f64,
            dev_em: report.em,
            dev_f1: report.f1,
            lr: cfg.learning_rate,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&log);
        if best.as_ref().is_none_or(|b| best_epoch(&[b.report, report]) == Some(1)) {
            best = Some(BestModel {
                epoch,
                params: ema.shadow.clone(),
                report,
            });
        }
        history.push(log);
        reports.push(report);
        batch_losses.push(epoch_losses);
    }

    net.params.tensors_mut().clone_from_slice(&params);
    Ok(TrainOutcome {
        network: net,
        best: best.expect("at least one epoch"),
        history,
        reports,
        batch_losses,
        weights: weights_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamax_two_step_scalar_trace() {
        let mut p = vec![Mat::scalar(0.5)];
        let mut st = AdamaxState::new(&p);
        let g = vec![Mat::scalar(1.0)];
        adamax_step(&mut p, &g, &mut st, 0.002).unwrap();
        // m = 0.1, u = 1 + 1e-8, step = 0.002 / 0.1 * 0.1 / u
        let u = 1.0 + 1e-8;
        assert!((st.m[0].data[0] - 0.1).abs() < 1e-15);
        assert_eq!(st.u[0].data[0], u);
        assert!((p[0].data[0] - (0.5 - 0.002 / u)).abs() < 1e-15);
        adamax_step(&mut p, &g, &mut st, 0.002).unwrap();
        // m = 0.19, u = max(0.999 u, u) = u, bias correction 1 - 0.81
        assert!((st.m[0].data[0] - 0.19).abs() < 1e-15);
        assert!((p[0].data[0] - (0.5 - 0.004 / u)).abs() < 1e-15);
    }

    #[test]
    fn adamax_degenerate_cases() {
        let mut p = vec![Mat::from_vec(1, 2, vec![1.0, -2.0])];
        let mut st = AdamaxState::new(&p);
        for _ in 0..5 {
            adamax_step(&mut p, &[Mat::zeros(1, 2)], &mut st, 0.01).unwrap();
        }
        assert_eq!(p[0].data, vec![1.0, -2.0]);
        adamax_step(&mut p, &[Mat::from_vec(1, 2, vec![3.0, 1.0])], &mut st, 0.0).unwrap();
        assert_eq!(p[0].data, vec![1.0, -2.0]);
        assert!(st.m[0].data[0] > 0.0);
        let err = adamax_step(&mut p, &[Mat::from_vec(1, 2, vec![f64::NAN, 1.0])], &mut st, 0.01).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn ema_closed_forms() {
        let p = vec![Mat::scalar(1.0)];
        let mut e = EmaState::zeros_like(&p, 0.995);
        e.update(&p);
        assert!((e.shadow[0].data[0] - 0.005).abs() < 1e-15);
        for k in 2..=200 {
            e.update(&p);
            let want = 1.0 - 0.995f64.powi(k);
            assert!((e.shadow[0].data[0] - want).abs() < 1e-12);
        }
        let mut e = EmaState::zeros_like(&p, 0.0);
        e.update(&[Mat::scalar(3.5)]);
        assert_eq!(e.shadow[0].data[0], 3.5);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Mat::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data, vec![3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g[0].data[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mixture_without_alpha = TrainConfig {
            mode: WeightingMode::Mixture,
            ..TrainConfig::default()
        };
        assert!(mixture_without_alpha.validate().is_err());
        let alpha_without_mixture = TrainConfig {
            alpha: Some(0.5),
            ..TrainConfig::default()
        };
        assert!(alpha_without_mixture.validate().is_err());
        let zero_lr = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(zero_lr.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"mode": "mixture", "alpha": 0.25}"#).unwrap();
        assert!(parsed.validate().is_ok());
        assert_eq!(parsed.batch_size, 32);
    }
}
