mod common;

use common::oracle::oracle_weights;
use common::random_task;
use mtmrc::corpus::TaskDataset;
use mtmrc::lm::LmConfig;
use mtmrc::synth;
use mtmrc::weighting::{assign_weights, train_scorers, ScoreTable};

fn pipeline(target: &TaskDataset, aux: &[TaskDataset], cfg: LmConfig, k_len: f64) -> ScoreTable {
    let all: Vec<&TaskDataset> = std::iter::once(target).chain(aux).collect();
    let scorers = train_scorers(&all, cfg, k_len).unwrap();
    assign_weights(target, aux, &scorers).unwrap()
}

fn compare(target: &TaskDataset, aux: &[TaskDataset], cfg: LmConfig, k_len: f64) -> usize {
    let table = pipeline(target, aux, cfg, k_len);
    let expected = oracle_weights(target, aux, cfg, k_len);
    assert_eq!(table.rows.len(), expected.len());
    for (id, raw, w) in &expected {
        let row = table.rows.iter().find(|r| &r.id == id).unwrap();
        let got = [row.h1q, row.hkq, row.h1a, row.hka];
        for (a, b) in got.iter().zip(raw) {
            assert!((a - b).abs() <= 1e-9, "{id}: raw {got:?} vs {raw:?}");
        }
        assert!((row.ced_prime - w).abs() <= 1e-9, "{id}: {} vs {w}", row.ced_prime);
        assert!((0.0..=1.0).contains(&row.ced_prime));
    }
    expected.len()
}

#[test]
fn matches_brute_force_on_random_corpora() {
    let configs = [
        LmConfig::default(),
        LmConfig { order: 1, ..LmConfig::default() },
        LmConfig { order: 2, vocab_size: 5, k: 0.5, lambda: 0.3 },
        LmConfig { order: 4, vocab_size: 12, k: 1.0, lambda: 1.0 },
    ];
    for seed in 0..8u64 {
        let cfg = configs[seed as usize % configs.len()];
        let target = random_task(1, 60, seed);
        let aux: Vec<_> = (2..=4).map(|t| random_task(t, 40 + 10 * t as usize, seed)).collect();
        compare(&target, &aux, cfg, [1.0, 0.1, 3.0][seed as usize % 3]);
    }
}

#[test]
fn weights_are_applied_to_auxiliaries_only() {
    let mut target = random_task(1, 30, 3);
    let mut aux = vec![random_task(2, 30, 3), random_task(3, 20, 3)];
    target.samples[0].weight = 0.25;
    let table = pipeline(&target, &aux, LmConfig::default(), 1.0);
    table.apply(&mut target, &mut aux);
    assert!(target.samples.iter().all(|s| s.weight == 1.0));
    for row in &table.rows {
        let ds = aux.iter().find(|d| d.task_id == row.task).unwrap();
        assert_eq!(ds.samples[row.index].id, row.id);
        assert_eq!(ds.samples[row.index].weight, row.ced_prime);
    }
    let min = table.rows.iter().map(|r| r.ced_prime).fold(1.0, f64::min);
    let max = table.rows.iter().map(|r| r.ced_prime).fold(0.0, f64::max);
    assert_eq!((min, max), (0.0, 1.0));
}

#[test]
fn no_auxiliary_tasks_give_an_empty_table() {
    let target = random_task(1, 10, 1);
    let table = pipeline(&target, &[], LmConfig::default(), 1.0);
    assert!(table.is_empty());
    assert_eq!(table.to_tsv().lines().count(), 1);
    assert!(table.summaries().is_empty());
}

#[test]
fn identical_samples_get_zero_weights() {
    // Every auxiliary sample is the same, so every score family is constant
    // and normalizes to zero; CED is then 0 everywhere and so is minmax(CED).
    let target = random_task(1, 10, 1);
    let mut one = random_task(2, 1, 1).samples;
    let template = one.pop().unwrap();
    let aux = TaskDataset::new(
        template.task_id,
        (0..5).map(|i| mtmrc::corpus::Sample { id: format!("x{i}"), ..template.clone() }).collect(),
    )
    .unwrap();
    let table = pipeline(&target, &[aux], LmConfig::default(), 1.0);
    assert!(table.rows.iter().all(|r| r.ced == 0.0 && r.ced_prime == 1.0));
}

#[test]
fn table_exports_are_ordered_and_summarized() {
    let target = random_task(1, 20, 7);
    let aux = vec![random_task(3, 15, 7), random_task(2, 25, 7)];
    let table = pipeline(&target, &aux, LmConfig::default(), 1.0);
    let tsv = table.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "id\ttask\tH1Q\tHkQ\tH1A\tHkA\tCED\tCEDprime");
    assert_eq!(lines.len(), 41);
    assert!(lines[1].starts_with("t2s00000\t2\t"));
    let sums = table.summaries();
    assert_eq!(sums.iter().map(|s| (s.task.0, s.count)).collect::<Vec<_>>(), vec![(2, 25), (3, 15)]);
    for s in &sums {
        assert!((0.0..=1.0).contains(&s.mean_ced_prime));
        assert!((0.0..=1.0).contains(&s.mean_question_score));
        assert!((0.0..=1.0).contains(&s.mean_answer_score));
    }
    let (top, bottom) = table.extremes(5);
    assert_eq!(top.len(), 5);
    assert!(top[0].ced_prime >= top[4].ced_prime && bottom[0].ced_prime <= bottom[4].ced_prime);
}

#[test]
fn target_like_auxiliary_outranks_distant_one() {
    let b = synth::weighting_benchmark(300, 300, 300, 11).unwrap();
    let table = pipeline(&b.target, &b.auxiliaries, LmConfig::default(), 1.0);
    let sums = table.summaries();
    assert!(sums[0].mean_ced_prime > sums[1].mean_ced_prime + 0.1, "{sums:?}");
}
