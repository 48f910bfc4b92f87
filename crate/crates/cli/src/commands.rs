use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mtmrc::corpus::{
    convert_generative_to_span, dataset_stats, load_dataset, load_generative, save_dataset, DatasetFormat,
    LoadOptions, TaskDataset, TaskId,
};
use mtmrc::model::load_checkpoint;
use mtmrc::synth;
use mtmrc::trainer::{epoch_schedule, evaluate, train_with_callback, EpochLog, TrainConfig, WeightingMode};
use mtmrc::weighting::{assign_weights, train_scorers, ScoreTable};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{write_file, Benchmark, Failure, RunRecord};

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize") + "\n"
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

pub fn ingest(out: &Path, input: &Path, format: &str, task: u32, max_tokens: usize) -> Result<RunRecord, Failure> {
    let format: DatasetFormat = format.parse()?;
    let opts = LoadOptions {
        task_id: TaskId(task),
        max_passage_tokens: (max_tokens > 0).then_some(max_tokens),
    };
    let ds = load_dataset(input, format, &opts)?;
    let data = out.join(format!("{}.json", file_stem(input)));
    save_dataset(&data, &ds.samples)?;
    let stats = out.join(format!("{}.stats.json", file_stem(input)));
    write_file(&stats, to_json(&ds.stats))?;
    println!("{}: {} samples -> {}", input.display(), ds.len(), data.display());
    Ok(RunRecord {
        inputs: vec![input.to_path_buf()],
        outputs: vec![data, stats],
    })
}

#[derive(Serialize)]
struct FileStats {
    path: PathBuf,
    count: usize,
    avg_passage_tokens: f64,
    avg_answer_tokens: Option<f64>,
}

pub fn stats(cfg: &RunConfig, out: &Path, files: &[PathBuf]) -> Result<RunRecord, Failure> {
    let files = if files.is_empty() { cfg.inputs() } else { files.to_vec() };
    if files.is_empty() {
        return Err(Failure::input("no dataset files given and the config names none"));
    }
    let opts = LoadOptions {
        task_id: TaskId::TARGET,
        max_passage_tokens: cfg.data.max_passage_tokens,
    };
    let mut rows = Vec::new();
    for f in &files {
        let s = dataset_stats(&load_dataset(f, cfg.data.format, &opts)?);
        println!(
            "{}\t{}\t{:.2}\t{}",
            f.display(),
            s.count,
            s.avg_passage_tokens,
            s.avg_answer_tokens.map_or("-".into(), |a| format!("{a:.2}"))
        );
        rows.push(FileStats {
            path: f.clone(),
            count: s.count,
            avg_passage_tokens: s.avg_passage_tokens,
            avg_answer_tokens: s.avg_answer_tokens,
        });
    }
    let path = out.join("stats.json");
    write_file(&path, to_json(&rows))?;
    Ok(RunRecord {
        inputs: files,
        outputs: vec![path],
    })
}

#[derive(Serialize)]
struct ConversionReport {
    total: usize,
    converted: usize,
    dropped: Vec<String>,
    mean_rouge_l: f64,
}

pub fn convert_span(out: &Path, input: &Path, threshold: f64, task: u32) -> Result<RunRecord, Failure> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::input(format!("--threshold must lie in [0, 1], got {threshold}")));
    }
    let raw = load_generative(input)?;
    let mut samples = Vec::new();
    let mut dropped = Vec::new();
    let mut score_sum = 0.0;
    for g in &raw {
        match convert_generative_to_span(g, threshold, TaskId(task)) {
            Some((s, m)) => {
                score_sum += m.score;
                samples.push(s);
            }
            None => dropped.push(g.id.clone()),
        }
    }
    if !dropped.is_empty() {
        eprintln!("warning: {} of {} samples had no span with ROUGE-L >= {threshold}", dropped.len(), raw.len());
    }
    let report = ConversionReport {
        total: raw.len(),
        converted: samples.len(),
        mean_rouge_l: if samples.is_empty() { 0.0 } else { score_sum / samples.len() as f64 },
        dropped,
    };
    let data = out.join(format!("{}.span.json", file_stem(input)));
    save_dataset(&data, &samples)?;
    let rep = out.join(format!("{}.conversion.json", file_stem(input)));
    write_file(&rep, to_json(&report))?;
    println!("converted {} of {} (mean ROUGE-L {:.4})", report.converted, report.total, report.mean_rouge_l);
    Ok(RunRecord {
        inputs: vec![input.to_path_buf()],
        outputs: vec![data, rep],
    })
}

fn load_tasks(cfg: &RunConfig) -> Result<(TaskDataset, Vec<TaskDataset>), Failure> {
    Ok((cfg.target()?, cfg.auxiliaries()?))
}

pub fn train_lm(cfg: &RunConfig, out: &Path) -> Result<RunRecord, Failure> {
    let (target, aux) = load_tasks(cfg)?;
    let all: Vec<&TaskDataset> = std::iter::once(&target).chain(&aux).collect();
    let scorers = train_scorers(&all, cfg.train.lm, cfg.train.length_smoothing)?;
    let dir = out.join("lm");
    std::fs::create_dir_all(&dir).map_err(|e| Failure::input(format!("cannot create {}: {e}", dir.display())))?;
    let mut outputs = Vec::new();
    for ds in &all {
        let s = &scorers[&ds.task_id];
        let path = dir.join(format!("task{}.json", ds.task_id));
        write_file(&path, s.to_json())?;
        println!(
            "task {}: {} questions, vocabulary {}, answer lengths up to {}",
            ds.task_id,
            ds.len(),
            s.question_lm.vocab().len(),
            s.answer_lm.max_len()
        );
        outputs.push(path);
    }
    Ok(RunRecord {
        inputs: cfg.inputs(),
        outputs,
    })
}

#[derive(Serialize)]
struct WeightSummary<'a> {
    tasks: Vec<mtmrc::weighting::TaskWeightSummary>,
    top: Vec<&'a mtmrc::weighting::ScoreRow>,
    bottom: Vec<&'a mtmrc::weighting::ScoreRow>,
}

fn warn_degenerate(table: &ScoreTable) {
    let constant = |f: &dyn Fn(&mtmrc::weighting::ScoreRow) -> f64, rows: &[&mtmrc::weighting::ScoreRow]| {
        rows.windows(2).all(|w| f(w[0]) == f(w[1]))
    };
    let all: Vec<_> = table.rows.iter().collect();
    if all.len() > 1 && constant(&|r| r.h1q, &all) {
        eprintln!("warning: target-LM question scores are constant over all auxiliary samples; normalized to zeros");
    }
    if all.len() > 1 && constant(&|r| r.h1a, &all) {
        eprintln!("warning: target answer-length scores are constant over all auxiliary samples; normalized to zeros");
    }
    let mut tasks: Vec<TaskId> = all.iter().map(|r| r.task).collect();
    tasks.dedup();
    for t in tasks {
        let rows: Vec<_> = all.iter().copied().filter(|r| r.task == t).collect();
        if constant(&|r| r.hkq, &rows) || constant(&|r| r.hka, &rows) {
            eprintln!("warning: task {t} has constant own-model scores; normalized to zeros");
        }
    }
}

pub fn weights(cfg: &RunConfig, out: &Path) -> Result<RunRecord, Failure> {
    let (target, aux) = load_tasks(cfg)?;
    let tsv = out.join("weights.tsv");
    let summary = out.join("weights_summary.json");
    let table = if aux.is_empty() {
        eprintln!("warning: no auxiliary tasks configured; writing an empty weight table");
        ScoreTable::default()
    } else {
        let all: Vec<&TaskDataset> = std::iter::once(&target).chain(&aux).collect();
        let scorers = train_scorers(&all, cfg.train.lm, cfg.train.length_smoothing)?;
        let table = assign_weights(&target, &aux, &scorers)?;
        warn_degenerate(&table);
        table
    };
    write_file(&tsv, table.to_tsv())?;
    let (top, bottom) = table.extremes(5);
    let s = WeightSummary {
        tasks: table.summaries(),
        top,
        bottom,
    };
    write_file(&summary, to_json(&s))?;
    println!("task\tcount\tmean CED'\tquestion\tanswer");
    for t in &s.tasks {
        println!(
            "{}\t{}\t{:.3}\t{:.3}\t{:.3}",
            t.task, t.count, t.mean_ced_prime, t.mean_question_score, t.mean_answer_score
        );
    }
    for (label, rows) in [("highest", &s.top), ("lowest", &s.bottom)] {
        if !rows.is_empty() {
            println!("{label} weights:");
        }
        for r in rows.iter() {
            println!("  {:.3}\ttask {}\t{}", r.ced_prime, r.task, r.id);
        }
    }
    Ok(RunRecord {
        inputs: cfg.inputs(),
        outputs: vec![tsv, summary],
    })
}

pub fn schedule(cfg: &RunConfig, out: &Path, epochs: usize) -> Result<RunRecord, Failure> {
    let (target, aux) = load_tasks(cfg)?;
    let bs = cfg.train.batch_size;
    let counts: Vec<(TaskId, usize)> = std::iter::once(&target)
        .chain(aux.iter().filter(|d| !d.is_empty()))
        .map(|d| (d.task_id, d.len().div_ceil(bs)))
        .collect();
    let mut dump = String::new();
    for epoch in 0..epochs {
        let s = epoch_schedule(&cfg.train, &counts, epoch)?;
        dump.push_str(&s.dump());
        let per_task: Vec<String> = counts.iter().map(|(t, _)| format!("task {t}: {}", s.count_for(*t))).collect();
        println!("epoch {epoch}: {} batches ({})", s.entries.len(), per_task.join(", "));
    }
    let path = out.join("schedule.tsv");
    write_file(&path, dump)?;
    Ok(RunRecord {
        inputs: cfg.inputs(),
        outputs: vec![path],
    })
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    train_loss: f64,
    dev_em: f64,
    dev_f1: f64,
    lr: f64,
}

impl From<&EpochLog> for LogLine {
    fn from(l: &EpochLog) -> Self {
        LogLine {
            epoch: l.epoch,
            train_loss: l.train_loss,
            dev_em: l.dev_em,
            dev_f1: l.dev_f1,
            lr: l.lr,
        }
    }
}

#[derive(Serialize)]
struct TrainReport {
    best_epoch: usize,
    dev: mtmrc::metrics::MetricReport,
    history: Vec<LogLine>,
}

fn run_training(
    tc: &TrainConfig,
    target: &TaskDataset,
    aux: &[TaskDataset],
    dev: &TaskDataset,
    dir: &Path,
) -> Result<(TrainReport, Vec<PathBuf>), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("cannot create {}: {e}", dir.display())))?;
    let mut log = String::new();
    let outcome = train_with_callback(target, aux, &dev.samples, tc, |l| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  dev EM {:.4}  F1 {:.4}  ({} ms)",
            l.epoch, l.train_loss, l.dev_em, l.dev_f1, l.wall_ms
        );
        log.push_str(&serde_json::to_string(&LogLine::from(l)).expect("log serializes"));
        log.push('\n');
    })?;
    let log_path = dir.join("train_log.jsonl");
    write_file(&log_path, log)?;
    let ckpt = dir.join("best.ckpt");
    outcome.save_best(&ckpt, tc)?;
    let mut outputs = vec![log_path, ckpt];
    if let Some(t) = &outcome.weights {
        let p = dir.join("weights.tsv");
        write_file(&p, t.to_tsv())?;
        outputs.push(p);
    }
    let report = TrainReport {
        best_epoch: outcome.best.epoch,
        dev: outcome.best.report,
        history: outcome.history.iter().map(LogLine::from).collect(),
    };
    let rep = dir.join("report.json");
    write_file(&rep, to_json(&report))?;
    outputs.push(rep);
    Ok((report, outputs))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<RunRecord, Failure> {
    let (target, aux) = load_tasks(cfg)?;
    let dev = cfg.dev()?;
    let (report, outputs) = run_training(&cfg.train, &target, &aux, &dev, out)?;
    println!(
        "best epoch {}: dev EM {:.4}, F1 {:.4}",
        report.best_epoch, report.dev.em, report.dev.f1
    );
    Ok(RunRecord {
        inputs: cfg.inputs(),
        outputs,
    })
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    data: PathBuf,
    dev: mtmrc::metrics::MetricReport,
    logged: serde_json::Value,
}

pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<RunRecord, Failure> {
    let ckpt = checkpoint.map_or_else(|| out.join("best.ckpt"), Path::to_path_buf);
    let (net, meta) = load_checkpoint(&ckpt)?;
    let data = match data {
        Some(d) => d.to_path_buf(),
        None => cfg
            .data
            .dev
            .clone()
            .ok_or_else(|| Failure::input("eval needs --data or data.dev in the config"))?,
    };
    let opts = LoadOptions {
        task_id: TaskId::TARGET,
        max_passage_tokens: cfg.data.max_passage_tokens,
    };
    let ds = load_dataset(&data, cfg.data.format, &opts)?;
    let report = evaluate(&net, net.params.tensors(), &ds.samples, !cfg.deterministic)?;
    println!(
        "EM {:.4}  F1 {:.4}  ROUGE-L {:.4}  accuracy {:.4}  (n = {})",
        report.em, report.f1, report.rouge_l, report.accuracy, report.n
    );
    let path = out.join("eval.json");
    write_file(
        &path,
        to_json(&EvalReport {
            checkpoint: ckpt.clone(),
            data: data.clone(),
            dev: report,
            logged: meta.get("dev").cloned().unwrap_or(serde_json::Value::Null),
        }),
    )?;
    Ok(RunRecord {
        inputs: vec![ckpt, data],
        outputs: vec![path],
    })
}

pub fn sweep(cfg: &RunConfig, out: &Path, alphas: Option<&[f64]>) -> Result<RunRecord, Failure> {
    let alphas = alphas.unwrap_or(&cfg.sweep.alphas);
    if alphas.is_empty() {
        return Err(Failure::input("the alpha grid is empty"));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
        return Err(Failure::input(format!("alpha must be finite and >= 0, got {a}")));
    }
    let (target, aux) = load_tasks(cfg)?;
    let dev = cfg.dev()?;
    let mut csv = String::from("alpha,dev_em,dev_f1\n");
    let mut outputs = Vec::new();
    for &alpha in alphas {
        let tc = TrainConfig {
            mode: WeightingMode::Mixture,
            alpha: Some(alpha),
            ..cfg.train.clone()
        };
        eprintln!("alpha {alpha}");
        let (report, files) = run_training(&tc, &target, &aux, &dev, &out.join(format!("alpha_{alpha}")))?;
        writeln!(csv, "{alpha},{},{}", report.dev.em, report.dev.f1).expect("writing to a String cannot fail");
        println!("alpha {alpha}: dev EM {:.4}, F1 {:.4}", report.dev.em, report.dev.f1);
        outputs.extend(files);
    }
    let path = out.join("sweep.csv");
    write_file(&path, csv)?;
    outputs.insert(0, path);
    Ok(RunRecord {
        inputs: cfg.inputs(),
        outputs,
    })
}

pub fn gen_synth(
    cfg: &RunConfig,
    out: &Path,
    benchmark: Benchmark,
    target_size: usize,
    dev_size: usize,
    aux_size: usize,
) -> Result<RunRecord, Failure> {
    let seed = cfg.seed;
    let (b, aux_names): (synth::Benchmark, &[&str]) = match benchmark {
        Benchmark::ThreeTask => (
            synth::three_task_benchmark(target_size, dev_size, aux_size, aux_size, seed)?,
            &["related", "distant"],
        ),
        Benchmark::Weighting => {
            let mut b = synth::weighting_benchmark(target_size, aux_size, aux_size, seed)?;
            b.dev = synth::three_task_benchmark(0, dev_size, 0, 0, seed)?.dev;
            (b, &["same", "different"])
        }
        Benchmark::Copy => {
            let all = synth::copy_task(target_size + dev_size, 80, (8, 20), seed);
            let (t, d) = all.split_at(target_size);
            (
                synth::Benchmark {
                    target: TaskDataset::new(TaskId::TARGET, t.to_vec())?,
                    dev: d.to_vec(),
                    auxiliaries: Vec::new(),
                },
                &[],
            )
        }
    };
    let mut outputs = Vec::new();
    let mut save = |name: &str, samples: &[mtmrc::corpus::Sample]| -> Result<(), Failure> {
        let p = out.join(format!("{name}.json"));
        save_dataset(&p, samples)?;
        outputs.push(p);
        Ok(())
    };
    save("target", &b.target.samples)?;
    save("dev", &b.dev)?;
    for (name, ds) in aux_names.iter().zip(&b.auxiliaries) {
        save(name, &ds.samples)?;
    }
    let aux_list: Vec<String> = aux_names.iter().map(|n| format!("\"{n}.json\"")).collect();
    let config = format!(
        "seed = {seed}\ndeterministic = true\nout = \"run\"\n\n[data]\ntarget = \"target.json\"\ndev = \"dev.json\"\n\
         auxiliaries = [{}]\n\n[train]\nepochs = 5\nmode = \"ced\"\n\n[train.model]\nembed_dim = 16\n\
         align_dim = 16\nreduce_dim = 16\nhidden = 16\n\n[sweep]\nalphas = [0.0, 0.25, 0.5, 1.0]\n",
        aux_list.join(", ")
    );
    let cpath = out.join("config.toml");
    write_file(&cpath, config)?;
    outputs.push(cpath);
    println!("wrote {} files to {}", outputs.len(), out.display());
    Ok(RunRecord {
        inputs: Vec::new(),
        outputs,
    })
}
