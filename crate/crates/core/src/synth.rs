//! Deterministic synthetic reading-comprehension tasks.
//!
//! The main family is a "clause world": a passage is a run of clauses
//! `entity relation+s value… .` and a question asks for the values attached to
//! one `(entity, relation)` pair. Task styles vary the question wording, the
//! answer length, and whether the answer runs on into following clauses.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Answer, Sample, TaskDataset, TaskId, Token};
use crate::error::Result;
use crate::seed::{self, StreamRng};

pub const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ne", "pu", "ri", "so", "ta", "vu", "ze", "ba", "do", "fi", "gu", "ho", "ji", "ke",
    "lu", "ma", "no",
];

/// Disjoint from [`SYLLABLES`], so the two inventories never share a word.
pub const ALT_SYLLABLES: [&str; 12] = [
    "xa", "qo", "wy", "zr", "xe", "qi", "wo", "yx", "qu", "xy", "wq", "zx",
];

/// `n` distinct pseudo-words of `min_syl..=max_syl` syllables.
pub fn word_pool(syllables: &[&str], n: usize, min_syl: usize, max_syl: usize, rng: &mut StreamRng) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        assert!(attempts < 1000 * (n + 10), "syllable inventory too small for {n} words");
        let k = rng.gen_range(min_syl..=max_syl);
        let w: String = (0..k).map(|_| *syllables.choose(rng).expect("syllables")).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Word inventories of one clause world.
#[derive(Debug, Clone)]
pub struct ClauseWorld {
    pub entities: Vec<String>,
    /// Relation base forms; passages use the base form plus "s".
    pub relations: Vec<String>,
    pub values: Vec<String>,
}

impl ClauseWorld {
    pub fn new(syllables: &[&str], entities: usize, relations: usize, values: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[0x5e]);
        let mut all = word_pool(syllables, entities + relations + values, 2, 3, &mut rng);
        let values_v = all.split_off(entities + relations);
        let relations_v: Vec<String> = all.split_off(entities).into_iter().map(|w| format!("{w}r")).collect();
        ClauseWorld {
            entities: all,
            relations: relations_v,
            values: values_v,
        }
    }

    pub fn standard(seed: u64) -> Self {
        Self::new(&SYLLABLES, 120, 8, 240, seed)
    }
}

/// How questions and answers of one task look.
#[derive(Debug, Clone)]
pub struct TaskStyle {
    pub question_prefix: Vec<String>,
    pub question_suffix: Vec<String>,
    /// Inclusive range of value tokens per clause.
    pub value_len: (usize, usize),
    /// Inclusive range of clauses per passage.
    pub clauses: (usize, usize),
    /// The answer also covers this many following clauses.
    pub run_on: usize,
}

impl TaskStyle {
    pub fn new(prefix: &str, suffix: &str, value_len: (usize, usize), clauses: (usize, usize)) -> Self {
        let split = |s: &str| s.split_whitespace().map(String::from).collect();
        TaskStyle {
            question_prefix: split(prefix),
            question_suffix: split(suffix),
            value_len,
            clauses,
            run_on: 0,
        }
    }

    pub fn target() -> Self {
        Self::new("what does", "?", (1, 3), (4, 6))
    }
}

fn tokens(words: &[String]) -> Vec<Token> {
    words.iter().map(|w| Token::new(w)).collect()
}

/// `n` samples of `style` in `world`, ids `{prefix}{i}`.
pub fn clause_samples(world: &ClauseWorld, style: &TaskStyle, task: TaskId, n: usize, seed: u64, prefix: &str) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let mut rng = seed::rng(seed, &[u64::from(task.0), i as u64]);
            clause_sample(world, style, task, format!("{prefix}{i}"), &mut rng)
        })
        .collect()
}

fn clause_sample(world: &ClauseWorld, style: &TaskStyle, task: TaskId, id: String, rng: &mut StreamRng) -> Sample {
    let k = rng.gen_range(style.clauses.0..=style.clauses.1).max(style.run_on + 1);
    // Distinct (entity, relation) pairs; entities repeat so the relation matters.
    let ents: Vec<&String> = world.entities.choose_multiple(rng, k.div_ceil(2).max(1)).collect();
    let mut pairs: Vec<(&String, &String)> = Vec::with_capacity(k);
    while pairs.len() < k {
        let e = *ents.choose(rng).expect("entities");
        let r = world.relations.choose(rng).expect("relations");
        if !pairs.contains(&(e, r)) {
            pairs.push((e, r));
        }
    }
    let asked = rng.gen_range(0..k - style.run_on);
    let mut passage: Vec<String> = Vec::new();
    let mut begin = 0;
    let mut end = 0;
    for (c, (e, r)) in pairs.iter().enumerate() {
        passage.push((*e).clone());
        passage.push(format!("{r}s"));
        if c == asked {
            begin = passage.len();
        }
        let len = rng.gen_range(style.value_len.0..=style.value_len.1);
        passage.extend((0..len).map(|_| world.values.choose(rng).expect("values").clone()));
        if c == asked + style.run_on {
            end = passage.len() - 1;
        }
        passage.push(".".into());
    }
    let (e, r) = pairs[asked];
    let mut question = style.question_prefix.clone();
    question.push(e.clone());
    question.push(r.clone());
    question.extend(style.question_suffix.iter().cloned());
    Sample {
        id,
        task_id: task,
        question: tokens(&question),
        passage: tokens(&passage),
        answer: Answer::Span { begin, end },
        weight: 1.0,
    }
}

/// Passages of distinct random words; the question is one of them and the
/// answer is its position.
pub fn copy_task(n: usize, vocab: usize, passage_len: (usize, usize), seed: u64) -> Vec<Sample> {
    let mut rng = seed::rng(seed, &[0xc0]);
    let words = word_pool(&SYLLABLES, vocab, 2, 2, &mut rng);
    (0..n)
        .map(|i| {
            let mut rng = seed::rng(seed, &[0xc1, i as u64]);
            let len = rng.gen_range(passage_len.0..=passage_len.1).min(vocab);
            let passage: Vec<String> = words.choose_multiple(&mut rng, len).cloned().collect();
            let pos = rng.gen_range(0..len);
            Sample {
                id: format!("copy{i}"),
                task_id: TaskId::TARGET,
                question: tokens(&passage[pos..=pos]),
                passage: tokens(&passage),
                answer: Answer::Span { begin: pos, end: pos },
                weight: 1.0,
            }
        })
        .collect()
}

/// Target training set, target dev set and auxiliary tasks.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub target: TaskDataset,
    pub dev: Vec<Sample>,
    pub auxiliaries: Vec<TaskDataset>,
}

/// Target task G, a related auxiliary task drawn from G's generator, and a
/// distant one that looks exactly like G but whose answers run on through the
/// next clause, so its labels conflict with G's and its answers are several
/// times longer.
pub fn three_task_benchmark(target: usize, dev: usize, related: usize, distant: usize, seed: u64) -> Result<Benchmark> {
    let world = ClauseWorld::standard(seed);
    let g = TaskStyle::target();
    let b = TaskStyle { run_on: 1, ..g.clone() };
    let train = clause_samples(&world, &g, TaskId(1), target, seed, "g");
    let dev = clause_samples(&world, &g, TaskId(1), dev, seed ^ 0xdef, "gdev");
    let mut auxiliaries = Vec::new();
    if related > 0 {
        auxiliaries.push(TaskDataset::new(TaskId(2), clause_samples(&world, &g, TaskId(2), related, seed, "a"))?);
    }
    if distant > 0 {
        auxiliaries.push(TaskDataset::new(TaskId(3), clause_samples(&world, &b, TaskId(3), distant, seed, "b"))?);
    }
    Ok(Benchmark {
        target: TaskDataset::new(TaskId(1), train)?,
        dev,
        auxiliaries,
    })
}

/// Target G, auxiliary A drawn from G's own generator, and auxiliary B with a
/// disjoint vocabulary and answers four times as long.
pub fn weighting_benchmark(n_target: usize, n_a: usize, n_b: usize, seed: u64) -> Result<Benchmark> {
    let world = ClauseWorld::standard(seed);
    let other = ClauseWorld::new(&ALT_SYLLABLES, 120, 8, 240, seed);
    let g = TaskStyle::target();
    let b = TaskStyle::new("xyqo wyzr", "qi", (4, 12), (4, 6));
    let target = clause_samples(&world, &g, TaskId(1), n_target, seed, "g");
    let a = clause_samples(&world, &g, TaskId(2), n_a, seed ^ 0xa, "a");
    let bb = clause_samples(&other, &b, TaskId(3), n_b, seed ^ 0xb, "b");
    Ok(Benchmark {
        target: TaskDataset::new(TaskId(1), target)?,
        dev: Vec::new(),
        auxiliaries: vec![TaskDataset::new(TaskId(2), a)?, TaskDataset::new(TaskId(3), bb)?],
    })
}
