//! Run configuration: a strict JSON file naming the data, the split and every
//! hyperparameter of one experiment.

use std::path::{Path, PathBuf};

use oov_core::corpus::ImputePolicy;
use oov_core::embedders::{EmbedderConfig, EmbedderKind};
use oov_core::eval::{EvalConfig, ExperimentConfig, ModelConfig, SweepGrid};
use oov_core::trainer::TrainerConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Seed override read when `--seed` is absent.
pub const SEED_ENV: &str = "OOV_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub interactions: PathBuf,
    #[serde(default)]
    pub user_features: Option<PathBuf>,
    #[serde(default)]
    pub user_schema: Option<PathBuf>,
    #[serde(default)]
    pub item_features: Option<PathBuf>,
    #[serde(default)]
    pub item_schema: Option<PathBuf>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_list_delimiter")]
    pub list_delimiter: char,
    #[serde(default)]
    pub impute: ImputePolicy,
}

fn default_delimiter() -> char {
    ','
}

fn default_list_delimiter() -> char {
    '|'
}

impl DataConfig {
    pub fn new(interactions: impl Into<PathBuf>) -> Self {
        Self {
            interactions: interactions.into(),
            user_features: None,
            user_schema: None,
            item_features: None,
            item_schema: None,
            delimiter: default_delimiter(),
            list_delimiter: default_list_delimiter(),
            impute: ImputePolicy::default(),
        }
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        std::iter::once(&mut self.interactions).chain(
            [
                &mut self.user_features,
                &mut self.user_schema,
                &mut self.item_features,
                &mut self.item_schema,
            ]
            .into_iter()
            .flatten(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Target fraction of entities that first appear after the split time.
    pub oov_ratio: f64,
    /// Minimum interactions per user and item; 0 or 1 disables filtering.
    pub k_core: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            oov_ratio: 0.2,
            k_core: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub embedders: Vec<EmbedderKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub user_embedder: EmbedderConfig,
    pub item_embedder: EmbedderConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
    pub sweep: SweepGrid,
    pub compare: CompareConfig,
    /// Seeds for `sweep` and `compare-embedders`; empty means the trainer seed alone.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

const SECTIONS: [&str; 11] = [
    "data",
    "split",
    "model",
    "user_embedder",
    "item_embedder",
    "trainer",
    "eval",
    "sweep",
    "compare",
    "seeds",
    "out",
];

fn section<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, fallback: T, problems: &mut Vec<String>) -> T {
    match obj.get(key) {
        None => fallback,
        Some(v) => T::deserialize(v).unwrap_or_else(|e| {
            problems.push(format!("{key}: {e}"));
            fallback
        }),
    }
}

impl RunConfig {
    /// A config with defaults everywhere except the interaction file.
    pub fn new(interactions: impl Into<PathBuf>) -> Self {
        let experiment = ExperimentConfig::default();
        Self {
            data: DataConfig::new(interactions),
            split: SplitConfig::default(),
            model: experiment.model,
            user_embedder: experiment.user_embedder,
            item_embedder: experiment.item_embedder,
            trainer: experiment.trainer,
            eval: experiment.eval,
            sweep: SweepGrid::default(),
            compare: CompareConfig::default(),
            seeds: Vec::new(),
            out: PathBuf::from("out"),
        }
    }

    /// Parses and validates `text`. Relative paths are taken relative to `base_dir`.
    /// Every problem found is reported in one error.
    pub fn parse(text: &str, base_dir: &Path) -> CliResult<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config is not valid JSON: {e}")))?;
        let Value::Object(obj) = value else {
            return Err(CliError::Usage("config must be a JSON object".into()));
        };
        let mut problems: Vec<String> = obj
            .keys()
            .filter(|k| !SECTIONS.contains(&k.as_str()))
            .map(|k| format!("unknown key `{k}`"))
            .collect();
        let data: Option<DataConfig> = match obj.get("data") {
            None => {
                problems.push("missing `data` section".into());
                None
            }
            Some(_) => section(&obj, "data", None, &mut problems),
        };
        let mut cfg = Self::new("");
        cfg.split = section(&obj, "split", cfg.split, &mut problems);
        cfg.model = section(&obj, "model", cfg.model, &mut problems);
        cfg.user_embedder = section(&obj, "user_embedder", cfg.user_embedder, &mut problems);
        cfg.item_embedder = section(&obj, "item_embedder", cfg.item_embedder, &mut problems);
        cfg.trainer = section(&obj, "trainer", cfg.trainer, &mut problems);
        cfg.eval = section(&obj, "eval", cfg.eval, &mut problems);
        cfg.sweep = section(&obj, "sweep", cfg.sweep, &mut problems);
        cfg.compare = section(&obj, "compare", cfg.compare, &mut problems);
        cfg.seeds = section(&obj, "seeds", cfg.seeds, &mut problems);
        cfg.out = section(&obj, "out", cfg.out, &mut problems);
        if let Some(data) = data {
            cfg.data = data;
            cfg.resolve_paths(base_dir);
            problems.extend(cfg.data_violations());
        }
        problems.extend(cfg.violations());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Usage(format!("invalid config:\n  - {}", problems.join("\n  - "))))
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve_paths(&mut self, base_dir: &Path) {
        for p in self.data.paths_mut() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        if self.out.is_relative() {
            self.out = base_dir.join(&self.out);
        }
    }

    /// Range and consistency checks that do not touch the file system.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let r = self.split.oov_ratio;
        if !(r > 0.0 && r < 1.0) {
            out.push(format!("split.oov_ratio must lie in (0, 1), got {r}"));
        }
        if self.data.user_features.is_some() != self.data.user_schema.is_some() {
            out.push("data.user_features and data.user_schema must be given together".into());
        }
        if self.data.item_features.is_some() != self.data.item_schema.is_some() {
            out.push("data.item_features and data.item_schema must be given together".into());
        }
        if !self.data.delimiter.is_ascii() {
            out.push("data.delimiter must be a single ASCII character".into());
        }
        out.extend(self.experiment().violations());
        out
    }

    fn data_violations(&self) -> Vec<String> {
        let mut paths = vec![&self.data.interactions];
        paths.extend(
            [&self.data.user_features, &self.data.user_schema, &self.data.item_features, &self.data.item_schema]
                .into_iter()
                .flatten(),
        );
        paths
            .into_iter()
            .filter(|p| !p.is_file())
            .map(|p| format!("input file {} does not exist", p.display()))
            .collect()
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            user_embedder: self.user_embedder.clone(),
            item_embedder: self.item_embedder.clone(),
            trainer: self.trainer.clone(),
            eval: self.eval.clone(),
        }
    }

    /// Flag, then environment, then the file.
    pub fn apply_seed(&mut self, flag: Option<u64>) -> CliResult<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?,
            ),
            Err(_) => None,
        };
        if let Some(seed) = flag.or(env) {
            self.trainer.seed = seed;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.trainer.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_data(extra: &str) -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("log.csv"), "user,item,timestamp\n").unwrap();
        let text = format!(r#"{{"data": {{"interactions": "log.csv"}}{extra}}}"#);
        (dir, text)
    }

    #[test]
    fn defaults_are_materialized() {
        let (dir, text) = with_data("");
        let cfg = RunConfig::parse(&text, dir.path()).unwrap();
        assert_eq!(cfg.data.interactions, dir.path().join("log.csv"));
        assert_eq!(cfg.out, dir.path().join("out"));
        assert_eq!(cfg.trainer, TrainerConfig::default());
        assert_eq!(cfg.split.oov_ratio, 0.2);
        let back = RunConfig::parse(&cfg.to_json(), Path::new("/")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn all_problems_are_reported_together() {
        let (dir, text) = with_data(r#", "trainer": {"beta": 1.5}, "split": {"oov_ratio": 0}, "modle": {}, "eval": {"kk": 3}"#);
        let err = RunConfig::parse(&text, dir.path()).unwrap_err().to_string();
        for needle in ["unknown key `modle`", "eval:", "kk", "beta", "oov_ratio"] {
            assert!(err.contains(needle), "{needle} missing from {err}");
        }
    }

    #[test]
    fn missing_inputs_and_data_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunConfig::parse(r#"{"data": {"interactions": "nope.csv"}}"#, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), crate::error::EXIT_USAGE);
        assert!(err.to_string().contains("nope.csv"));
        let err = RunConfig::parse("{}", dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing `data`"));
        let err = RunConfig::parse("[1]", dir.path()).unwrap_err();
        assert!(err.to_string().contains("object"));
    }

    #[test]
    fn unpaired_feature_files_are_rejected() {
        let (dir, _) = with_data("");
        std::fs::write(dir.path().join("u.csv"), "id\n").unwrap();
        let text = r#"{"data": {"interactions": "log.csv", "user_features": "u.csv"}}"#;
        let err = RunConfig::parse(text, dir.path()).unwrap_err().to_string();
        assert!(err.contains("user_schema"), "{err}");
    }
}
