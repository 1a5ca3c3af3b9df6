//! End-to-end runs, one-at-a-time sensitivity sweeps and embedder comparisons.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{evaluate_all, EvalConfig, MetricsReport, Scorer};
use crate::embedders::{EmbedderConfig, EmbedderKind};
use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::trainer::{Dataset, LogRow, Trainer, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Bpr,
            dim: 16,
        }
    }
}

fn default_embedder() -> EmbedderConfig {
    EmbedderConfig::new(EmbedderKind::MLsh)
}

/// Everything that determines a train + evaluate run on a fixed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_embedder")]
    pub user_embedder: EmbedderConfig,
    #[serde(default = "default_embedder")]
    pub item_embedder: EmbedderConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            user_embedder: default_embedder(),
            item_embedder: default_embedder(),
            trainer: TrainerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.model.dim == 0 {
            out.push("model.dim must be positive".into());
        }
        out.extend(self.user_embedder.violations().into_iter().map(|v| format!("user_embedder: {v}")));
        out.extend(self.item_embedder.violations().into_iter().map(|v| format!("item_embedder: {v}")));
        out.extend(self.trainer.violations().into_iter().map(|v| format!("trainer: {v}")));
        out.extend(self.eval.violations().into_iter().map(|v| format!("eval: {v}")));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Hash of the parts that affect training; evaluation settings are excluded.
    pub fn training_hash(&self) -> String {
        Self {
            eval: EvalConfig::default(),
            ..self.clone()
        }
        .hash()
    }

    pub fn with_embedders(&self, kind: EmbedderKind) -> Self {
        let mut out = self.clone();
        out.user_embedder.kind = kind;
        out.item_embedder.kind = kind;
        out
    }
}

/// Trains and evaluates one configuration.
pub fn run_experiment(data: &Dataset, config: &ExperimentConfig, split_checksum: &str) -> Result<(Trainer, Vec<LogRow>, MetricsReport)> {
    config.validate()?;
    let mut trainer = Trainer::new(
        config.trainer.clone(),
        config.model.kind,
        config.model.dim,
        &config.user_embedder,
        &config.item_embedder,
        data,
    )?;
    let log = trainer.fit(data)?;
    let report = report_for(&trainer, data, config, split_checksum)?;
    Ok((trainer, log, report))
}

/// Evaluates a trained model under `config.eval`.
pub fn report_for(trainer: &Trainer, data: &Dataset, config: &ExperimentConfig, split_checksum: &str) -> Result<MetricsReport> {
    let scorer = Scorer {
        model: &trainer.model,
        user_embedder: &trainer.user_embedder,
        item_embedder: &trainer.item_embedder,
        data,
    };
    evaluate_all(&scorer, &config.eval, config.trainer.seed, &config.hash(), split_checksum)
}

/// Values for a one-at-a-time sweep. Each listed value is run with every
/// other hyperparameter at its base setting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub b_u: Vec<usize>,
    pub b_i: Vec<usize>,
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty() && self.beta.is_empty() && self.b_u.is_empty() && self.b_i.is_empty()
    }

    /// `(parameter, value as written, config)` in grid order.
    pub fn points(&self, base: &ExperimentConfig) -> Vec<(&'static str, String, ExperimentConfig)> {
        let mut out = Vec::new();
        for &a in &self.alpha {
            let mut c = base.clone();
            c.trainer.alpha = a;
            out.push(("alpha", a.to_string(), c));
        }
        for &b in &self.beta {
            let mut c = base.clone();
            c.trainer.beta = b;
            out.push(("beta", b.to_string(), c));
        }
        for &b in &self.b_u {
            let mut c = base.clone();
            c.user_embedder.buckets = b;
            out.push(("b_u", b.to_string(), c));
        }
        for &b in &self.b_i {
            let mut c = base.clone();
            c.item_embedder.buckets = b;
            out.push(("b_i", b.to_string(), c));
        }
        out
    }
}

/// One long-format sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub seed: u64,
    pub subset: String,
    pub metric: String,
    pub score: Option<f64>,
    pub status: String,
}

fn metric_rows(report: &MetricsReport) -> Vec<(String, String, f64)> {
    report
        .subsets
        .iter()
        .flat_map(|s| {
            [
                (s.subset.name().to_string(), format!("ndcg@{}", report.k), s.ndcg),
                (s.subset.name().to_string(), "auroc".to_string(), s.auroc),
            ]
        })
        .collect()
}

fn failed_rows(config: &ExperimentConfig) -> Vec<(String, String)> {
    config
        .eval
        .subsets
        .iter()
        .flat_map(|s| [(s.name().to_string(), format!("ndcg@{}", config.eval.k)), (s.name().to_string(), "auroc".to_string())])
        .collect()
}

/// Runs every grid point for every seed. Failed runs become rows with an
/// empty score and a `failed: ...` status instead of aborting the sweep.
pub fn sweep(data: &Dataset, base: &ExperimentConfig, grid: &SweepGrid, seeds: &[u64], split_checksum: &str) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let jobs: Vec<(&'static str, String, ExperimentConfig, u64)> = grid
        .points(base)
        .into_iter()
        .flat_map(|(p, v, c)| {
            seeds.iter().map(move |&s| {
                let mut c = c.clone();
                c.trainer.seed = s;
                (p, v.clone(), c, s)
            })
        })
        .collect();
    let rows: Vec<Vec<SweepRow>> = jobs
        .par_iter()
        .map(|(param, value, config, seed)| {
            let row = |subset: String, metric: String, score: Option<f64>, status: String| SweepRow {
                param: param.to_string(),
                value: value.clone(),
                seed: *seed,
                subset,
                metric,
                score,
                status,
            };
            match run_experiment(data, config, split_checksum) {
                Ok((_, _, report)) => metric_rows(&report)
                    .into_iter()
                    .map(|(s, m, v)| row(s, m, Some(v), "ok".into()))
                    .collect(),
                Err(e) => {
                    log::warn!("sweep {param}={value} seed {seed} failed: {e}");
                    failed_rows(config)
                        .into_iter()
                        .map(|(s, m)| row(s, m, None, format!("failed: {e}")))
                        .collect()
                }
            }
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Summary of one embedder on one subset and metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub embedder: String,
    pub subset: String,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Average rank among embedders per seed; 1 is best, ties share the mean rank.
    pub mean_rank: Option<f64>,
    pub runs_ok: usize,
    pub runs_failed: usize,
    pub error: Option<String>,
}

/// Trains and evaluates every embedder (for both users and items) under the
/// same seeds and base model.
pub fn compare_embedders(
    data: &Dataset,
    base: &ExperimentConfig,
    embedders: &[EmbedderKind],
    seeds: &[u64],
    split_checksum: &str,
) -> Result<Vec<ComparisonRow>> {
    if embedders.len() < 2 {
        return Err(Error::Config("comparison needs at least two embedders".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..embedders.len()).flat_map(|e| seeds.iter().map(move |&s| (e, s))).collect();
    let results: Vec<Result<MetricsReport>> = jobs
        .par_iter()
        .map(|&(e, seed)| {
            let mut config = base.with_embedders(embedders[e]);
            config.trainer.seed = seed;
            run_experiment(data, &config, split_checksum).map(|(_, _, r)| r)
        })
        .collect();

    let cells = failed_rows(base);
    // scores[embedder][seed][cell]
    let mut scores: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; seeds.len()]; embedders.len()];
    let mut errors: Vec<Option<String>> = vec![None; embedders.len()];
    for (&(e, seed), result) in jobs.iter().zip(results) {
        let s = seeds.iter().position(|&x| x == seed).expect("seed from list");
        match result {
            Ok(report) => scores[e][s] = Some(metric_rows(&report).into_iter().map(|(_, _, v)| v).collect()),
            Err(err) => {
                log::warn!("{} seed {seed} failed: {err}", embedders[e]);
                errors[e].get_or_insert_with(|| err.to_string());
            }
        }
    }

    let mut rows = Vec::new();
    for (e, kind) in embedders.iter().enumerate() {
        for (c, (subset, metric)) in cells.iter().enumerate() {
            let values: Vec<f64> = scores[e].iter().flatten().map(|v| v[c]).collect();
            let mut ranks = Vec::new();
            for (s, run) in scores[e].iter().enumerate() {
                let Some(mine) = run.as_ref().map(|v| v[c]) else { continue };
                let others: Vec<f64> = (0..embedders.len()).filter_map(|o| scores[o][s].as_ref().map(|v| v[c])).collect();
                let better = others.iter().filter(|&&x| x > mine).count() as f64;
                let equal = others.iter().filter(|&&x| x == mine).count() as f64;
                ranks.push(better + (equal + 1.0) / 2.0);
            }
            let n = values.len();
            let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
            let std = mean.map(|m| {
                if n < 2 {
                    0.0
                } else {
                    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                }
            });
            rows.push(ComparisonRow {
                embedder: kind.name().to_string(),
                subset: subset.clone(),
                metric: metric.clone(),
                mean,
                std,
                mean_rank: (!ranks.is_empty()).then(|| ranks.iter().sum::<f64>() / ranks.len() as f64),
                runs_ok: n,
                runs_failed: seeds.len() - n,
                error: errors[e].clone(),
            });
        }
    }
    Ok(rows)
}
