use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::convert::GenerativeSample;
use super::tokenize::{detokenize, tokenize};
use super::{Answer, Sample, TaskDataset, TaskId};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_PASSAGE_TOKENS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    SpanJson,
    ClozeJson,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span" | "span-json" => Ok(DatasetFormat::SpanJson),
            "cloze" | "cloze-json" => Ok(DatasetFormat::ClozeJson),
            other => Err(Error::Config(format!(
                "unknown dataset format '{other}' (expected span-json or cloze-json)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub task_id: TaskId,
    /// Passages are cut to this many tokens; samples whose answer falls past the
    /// cut are dropped. `None` keeps passages whole.
    pub max_passage_tokens: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            task_id: TaskId::TARGET,
            max_passage_tokens: Some(DEFAULT_MAX_PASSAGE_TOKENS),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SpanRecord {
    id: String,
    question: String,
    passage: String,
    answer_begin: usize,
    answer_end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClozeRecord {
    id: String,
    question: String,
    passage: String,
    candidates: Vec<Vec<usize>>,
    gold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

#[derive(Deserialize)]
struct GenerativeRecord {
    id: String,
    question: String,
    passage: String,
    answer_text: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_json<'a, T: Deserialize<'a>>(path: &Path, text: &'a str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_dataset(path: &Path, format: DatasetFormat, opts: &LoadOptions) -> Result<TaskDataset> {
    parse_dataset(path, &read(path)?, format, opts)
}

/// Parses dataset JSON already in memory; `origin` is only used in error messages.
pub fn parse_dataset(
    origin: &Path,
    text: &str,
    format: DatasetFormat,
    opts: &LoadOptions,
) -> Result<TaskDataset> {
    let weight_of = |w: Option<f64>| w.unwrap_or(1.0);
    let raw: Vec<Sample> = match format {
        DatasetFormat::SpanJson => parse_json::<Vec<SpanRecord>>(origin, text)?
            .into_iter()
            .map(|r| Sample {
                id: r.id,
                task_id: opts.task_id,
                question: tokenize(&r.question),
                passage: tokenize(&r.passage),
                answer: Answer::Span {
                    begin: r.answer_begin,
                    end: r.answer_end,
                },
                weight: weight_of(r.weight),
            })
            .collect(),
        DatasetFormat::ClozeJson => parse_json::<Vec<ClozeRecord>>(origin, text)?
            .into_iter()
            .map(|r| Sample {
                id: r.id,
                task_id: opts.task_id,
                question: tokenize(&r.question),
                passage: tokenize(&r.passage),
                answer: Answer::Cloze {
                    candidates: r.candidates,
                    gold: r.gold,
                },
                weight: weight_of(r.weight),
            })
            .collect(),
    };
    let mut samples = Vec::with_capacity(raw.len());
    for s in raw {
        // Validate against the untruncated passage so bad indices are reported,
        // not silently dropped.
        s.validate()?;
        match opts.max_passage_tokens {
            Some(limit) => samples.extend(s.truncated(limit)),
            None => samples.push(s),
        }
    }
    TaskDataset::new(opts.task_id, samples)
}

pub fn load_generative(path: &Path) -> Result<Vec<GenerativeSample>> {
    parse_generative(path, &read(path)?)
}

pub fn parse_generative(origin: &Path, text: &str) -> Result<Vec<GenerativeSample>> {
    Ok(parse_json::<Vec<GenerativeRecord>>(origin, text)?
        .into_iter()
        .map(|r| GenerativeSample {
            id: r.id,
            question: tokenize(&r.question),
            passage: tokenize(&r.passage),
            answer_text: tokenize(&r.answer_text),
        })
        .collect())
}

/// Serializes samples in the span or cloze schema (chosen per sample). Text
/// fields hold the space-joined token surfaces, so reloading reproduces the
/// tokens exactly.
pub fn to_json_string(samples: &[Sample]) -> String {
    let values: Vec<serde_json::Value> = samples
        .iter()
        .map(|s| {
            let weight = (s.weight != 1.0).then_some(s.weight);
            let question = detokenize(&s.question);
            let passage = detokenize(&s.passage);
            let v = match &s.answer {
                Answer::Span { begin, end } => serde_json::to_value(SpanRecord {
                    id: s.id.clone(),
                    question,
                    passage,
                    answer_begin: *begin,
                    answer_end: *end,
                    weight,
                }),
                Answer::Cloze { candidates, gold } => serde_json::to_value(ClozeRecord {
                    id: s.id.clone(),
                    question,
                    passage,
                    candidates: candidates.clone(),
                    gold: *gold,
                    weight,
                }),
            };
            v.expect("sample records always serialize")
        })
        .collect();
    serde_json::to_string_pretty(&values).expect("json values always serialize")
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    fs::write(path, to_json_string(samples)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO: &str = r#"[
  {"id": "q1", "question": "Who wrote it?", "passage": "Ann wrote the book .", "answer_begin": 0, "answer_end": 0},
  {"id": "q2", "question": "What did Ann write?", "passage": "Ann wrote the book .", "answer_begin": 2, "answer_end": 3}
]"#;

    fn opts() -> LoadOptions {
        LoadOptions::default()
    }

    #[test]
    fn loads_two_samples() {
        let ds = parse_dataset(Path::new("mem"), TWO, DatasetFormat::SpanJson, &opts()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[1].answer_tokens().unwrap()[1].surface, "book");
        assert_eq!(ds.samples[0].question.last().unwrap().surface, "?");
    }

    #[test]
    fn empty_list_loads() {
        let ds = parse_dataset(Path::new("mem"), "[]", DatasetFormat::SpanJson, &opts()).unwrap();
        assert_eq!(ds.stats.count, 0);
        assert_eq!(ds.stats.avg_passage_tokens, 0.0);
    }

    #[test]
    fn begin_after_end_is_data_error() {
        let text = r#"[{"id": "x9", "question": "q", "passage": "a b c", "answer_begin": 2, "answer_end": 1}]"#;
        match parse_dataset(Path::new("mem"), text, DatasetFormat::SpanJson, &opts()) {
            Err(Error::Data { sample_id, .. }) => assert_eq!(sample_id, "x9"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "[\n{\"id\": \"a\",\n \"question\": }\n]";
        match parse_dataset(Path::new("bad.json"), text, DatasetFormat::SpanJson, &opts()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn cloze_zero_occurrence_candidate_rejected() {
        let text = r#"[{"id": "c1", "question": "who", "passage": "ann met bob", "candidates": [[0], []], "gold": 0}]"#;
        let err = parse_dataset(Path::new("mem"), text, DatasetFormat::ClozeJson, &opts())
            .unwrap_err();
        assert!(matches!(err, Error::Data { .. }), "{err}");
    }

    #[test]
    fn truncation_at_load() {
        let passage: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let text = format!(
            r#"[{{"id": "a", "question": "q", "passage": "{p}", "answer_begin": 2, "answer_end": 3}},
               {{"id": "b", "question": "q", "passage": "{p}", "answer_begin": 12, "answer_end": 13}}]"#,
            p = passage.join(" ")
        );
        let o = LoadOptions {
            task_id: TaskId(2),
            max_passage_tokens: Some(10),
        };
        let ds = parse_dataset(Path::new("mem"), &text, DatasetFormat::SpanJson, &o).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].passage.len(), 10);
        assert_eq!(ds.task_id, TaskId(2));
    }

    #[test]
    fn generative_records() {
        let text = r#"[{"id": "g", "question": "define x", "passage": "x is a thing", "answer_text": "a thing"}]"#;
        let g = parse_generative(Path::new("mem"), text).unwrap();
        assert_eq!(g[0].answer_text.len(), 2);
    }

    proptest! {
        #[test]
        fn serialize_load_round_trip(
            words in proptest::collection::vec("[A-Za-z0-9]{1,6}|[.,!?'-]", 1..25),
            qwords in proptest::collection::vec("[A-Za-z]{1,6}|[?]", 1..6),
        ) {
            let passage = words.join(" ");
            let text = serde_json::json!([{
                "id": "r", "question": qwords.concat(), "passage": passage,
                "answer_begin": 0, "answer_end": 0
            }]).to_string();
            let o = LoadOptions { task_id: TaskId::TARGET, max_passage_tokens: None };
            let first = parse_dataset(Path::new("mem"), &text, DatasetFormat::SpanJson, &o).unwrap();
            let again = parse_dataset(Path::new("mem"), &to_json_string(&first.samples), DatasetFormat::SpanJson, &o).unwrap();
            prop_assert_eq!(first.samples, again.samples);
        }
    }
}
