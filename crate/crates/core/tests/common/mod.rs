//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use mtmrc::corpus::{tokenize, Answer, Sample, TaskDataset, TaskId, Token};
use mtmrc::model::{Mat, ModelConfig, ModelVocab, Network};
use rand::Rng;

pub fn sample(id: &str, task: u32, passage: &str, question: &str, answer: Answer) -> Sample {
    Sample {
        id: id.into(),
        task_id: TaskId(task),
        question: tokenize(question),
        passage: tokenize(passage),
        answer,
        weight: 1.0,
    }
}

pub fn network_for(samples: &[&Sample], cfg: ModelConfig, seed: u64) -> Network {
    let words = samples
        .iter()
        .flat_map(|s| s.passage.iter().chain(&s.question).map(|t| t.lower.clone()));
    Network::new(cfg, ModelVocab::from_words(words, seed ^ 0xabc), seed).unwrap()
}

/// Adds uniform noise to every parameter so that no ReLU input sits exactly on
/// its kink (zero biases on zero rows would otherwise do that).
pub fn jitter(net: &mut Network, seed: u64, amount: f64) {
    let mut rng = mtmrc::seed::rng(seed, &[99]);
    for t in net.params.tensors_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Central-difference check of every parameter scalar. The relative error of
/// one entry is `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(net: &Network, sample: &Sample, h: f64, floor: f64) -> GradCheck {
    let params = net.params.tensors().to_vec();
    let (_, grads) = net.loss_and_gradients(&params, sample, 1.0, None).unwrap();
    let analytic = grads.to_dense(&net.params.shapes());
    let loss = |p: &[Mat]| {
        let mut t = net.forward(p, sample, None).unwrap();
        net.sample_loss(&mut t, sample).unwrap()
    };
    let mut out = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let mut work = params.clone();
    for (i, name) in net.params.names().iter().enumerate() {
        for j in 0..params[i].len() {
            let orig = params[i].data[j];
            work[i].data[j] = orig + h;
            let plus = loss(&work);
            work[i].data[j] = orig - h;
            let minus = loss(&work);
            work[i].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{name}[{j}]: analytic {a:e}, numeric {numeric:e}");
            }
            out.checked += 1;
        }
    }
    out
}

/// Passage of 6 tokens, question of 3, span answer.
pub fn gradcheck_span_sample() -> Sample {
    sample(
        "g1",
        1,
        "rivers flow into the Sea slowly",
        "where rivers flowing",
        Answer::Span { begin: 3, end: 4 },
    )
}

pub fn gradcheck_config() -> ModelConfig {
    ModelConfig::tiny(4, 2)
}

/// A random span task: questions over a task-specific mix of shared and
/// private words, answer lengths drawn from a task-specific range.
pub fn random_task(task: u32, n: usize, seed: u64) -> TaskDataset {
    let mut rng = mtmrc::seed::rng(seed, &[0xda7a, u64::from(task)]);
    let shared = ["what", "who", "the", "a", "of", "is", "Did", "when"];
    let private: Vec<String> = (0..rng.gen_range(3..30)).map(|i| format!("t{task}w{i}")).collect();
    let share = rng.gen_range(0.0..1.0);
    let max_len = rng.gen_range(1..12);
    let samples = (0..n)
        .map(|i| {
            let qlen = rng.gen_range(1..9);
            let question = (0..qlen)
                .map(|_| {
                    if rng.gen_bool(share) {
                        Token::new(shared[rng.gen_range(0..shared.len())])
                    } else {
                        Token::new(&private[rng.gen_range(0..private.len())])
                    }
                })
                .collect();
            let alen = rng.gen_range(1..=max_len);
            let begin = rng.gen_range(0..3);
            Sample {
                id: format!("t{task}s{i:05}"),
                task_id: TaskId(task),
                question,
                passage: (0..begin + alen + 2).map(|j| Token::new(&format!("p{j}"))).collect(),
                answer: Answer::Span { begin, end: begin + alen - 1 },
                weight: 1.0,
            }
        })
        .collect();
    TaskDataset::new(TaskId(task), samples).unwrap()
}
