//! Run configuration: one TOML file, validated before any work starts.
//!
//! ```toml
//! seed = 7
//! deterministic = true
//! out = "runs/demo"
//!
//! [data]
//! format = "span-json"
//! target = "target.json"
//! dev = "dev.json"
//! auxiliaries = ["related.json", "distant.json"]
//!
//! [train]
//! epochs = 10
//! mode = "ced"
//!
//! [train.model]
//! hidden = 16
//!
//! [sweep]
//! alphas = [0.0, 0.25, 0.5, 1.0]
//! ```
//!
//! Relative paths resolve against the config file's directory. The root seed
//! and the deterministic switch live at the top level only.

use std::path::{Path, PathBuf};

use mtmrc::corpus::{load_dataset, DatasetFormat, LoadOptions, TaskDataset, TaskId, DEFAULT_MAX_PASSAGE_TOKENS};
use mtmrc::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: DatasetFormat,
    pub max_passage_tokens: Option<usize>,
    pub target: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    /// Auxiliary tasks, numbered 2, 3, … in this order.
    pub auxiliaries: Vec<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DatasetFormat::SpanJson,
            max_passage_tokens: Some(DEFAULT_MAX_PASSAGE_TOKENS),
            target: None,
            dev: None,
            auxiliaries: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alphas: vec![0.0, 0.25, 0.5, 1.0],
        }
    }
}

/// Command-line values that override file keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, Failure> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::input(format!("cannot read config {}: {e}", p.display())))?;
                let mut cfg = Self::parse(&text).map_err(|m| Failure::input(format!("{}: {m}", p.display())))?;
                cfg.resolve(p.parent().unwrap_or(Path::new(".")));
                cfg
            }
            None => Self::parse("").expect("empty config is valid"),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = Some(o.clone());
        }
        cfg.deterministic |= overrides.deterministic;
        cfg.train.seed = cfg.seed;
        cfg.train.deterministic = cfg.deterministic;
        cfg.train.validate().map_err(|e| Failure::input(format!("[train] {e}")))?;
        for (i, a) in cfg.sweep.alphas.iter().enumerate() {
            if !(*a >= 0.0 && a.is_finite()) {
                return Err(Failure::input(format!("sweep.alphas[{i}] must be finite and >= 0, got {a}")));
            }
        }
        Ok(cfg)
    }

    /// Parses and checks key placement; values are validated by [`RunConfig::load`].
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
        if let Some(train) = table.get("train").and_then(toml::Value::as_table) {
            for key in ["seed", "deterministic"] {
                if train.contains_key(key) {
                    return Err(format!("train.{key}: set '{key}' at the top level of the config"));
                }
            }
        }
        toml::from_str(text).map_err(|e| e.to_string())
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        d.target.iter_mut().chain(d.dev.iter_mut()).chain(d.auxiliaries.iter_mut()).for_each(join);
        self.out.iter_mut().for_each(join);
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("mtmrc-out"))
    }

    fn load_one(&self, path: &Path, task: TaskId) -> Result<TaskDataset, Failure> {
        let opts = LoadOptions {
            task_id: task,
            max_passage_tokens: self.data.max_passage_tokens,
        };
        Ok(load_dataset(path, self.data.format, &opts)?)
    }

    pub fn target_path(&self) -> Result<&Path, Failure> {
        self.data
            .target
            .as_deref()
            .ok_or_else(|| Failure::input("data.target is required for this command"))
    }

    pub fn target(&self) -> Result<TaskDataset, Failure> {
        self.load_one(self.target_path()?, TaskId::TARGET)
    }

    pub fn auxiliaries(&self) -> Result<Vec<TaskDataset>, Failure> {
        self.data
            .auxiliaries
            .iter()
            .enumerate()
            .map(|(i, p)| self.load_one(p, TaskId(i as u32 + 2)))
            .collect()
    }

    pub fn dev(&self) -> Result<TaskDataset, Failure> {
        let path = self
            .data
            .dev
            .as_deref()
            .ok_or_else(|| Failure::input("data.dev is required for this command"))?;
        self.load_one(path, TaskId::TARGET)
    }

    /// Every data file the config names.
    pub fn inputs(&self) -> Vec<PathBuf> {
        let d = &self.data;
        d.target.iter().chain(&d.dev).chain(&d.auxiliaries).cloned().collect()
    }
}
