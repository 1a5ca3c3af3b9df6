//! One function per subcommand. Each computes everything in memory and
//! commits its files at the end, so a failed command leaves no outputs.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use oov_core::corpus::{load_interactions, normalize_per_feature, DelimiterConfig, FeatureMatrix, FeatureTable, InteractionLog};
use oov_core::embedders::EmbedderKind;
use oov_core::eval::{compare_embedders, report_for, sweep, ComparisonRow, MetricsReport, Subset, SweepRow};
use oov_core::splitter::{apply_split, choose_split_time, k_core_filter, Partition, SplitManifest};
use oov_core::toy::{generate, interactions_csv, ToyConfig, INTERACTIONS_FILE, ITEM_FEATURES_FILE, ITEM_SCHEMA_FILE, USER_FEATURES_FILE, USER_SCHEMA_FILE};
use oov_core::trainer::{Checkpoint, Dataset, LogRow, Trainer};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::Outputs;

pub const SPLIT_DIR: &str = "split";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const COMPARISON_CSV_FILE: &str = "comparison.csv";
pub const COMPARISON_TEXT_FILE: &str = "comparison.txt";
pub const SWEEP_CSV_FILE: &str = "sweep.csv";
pub const RUN_CONFIG_FILE: &str = "run.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The split and encoded features a run config describes.
pub struct Prepared {
    pub filtered: InteractionLog,
    pub manifest: SplitManifest,
    pub manifest_json: String,
    /// SHA-256 of `manifest_json`; identifies the split in checkpoints and reports.
    pub checksum: String,
    pub data: Dataset,
}

/// Loads one entity type's features. Imputed values are fitted on the IV entities only.
fn features(
    cfg: &RunConfig,
    (rows, schema): (&Option<PathBuf>, &Option<PathBuf>),
    ids: &indexmap::IndexSet<String>,
    iv: &[String],
) -> CliResult<Option<FeatureMatrix>> {
    let (Some(rows), Some(schema)) = (rows, schema) else {
        return Ok(None);
    };
    let mut table = FeatureTable::load(schema, rows, &delimiters(cfg), cfg.data.impute)?;
    let iv: HashSet<&str> = iv.iter().map(String::as_str).collect();
    table.refit_imputation(cfg.data.impute, |id| iv.contains(id));
    Ok(Some(normalize_per_feature(table.encode()?)?.align(ids)))
}

fn delimiters(cfg: &RunConfig) -> DelimiterConfig {
    DelimiterConfig {
        delimiter: cfg.data.delimiter as u8,
        list_delimiter: cfg.data.list_delimiter,
    }
}

pub fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let source = load_interactions(&cfg.data.interactions, &delimiters(cfg))?;
    let filtered = if cfg.split.k_core > 1 {
        k_core_filter(&source, cfg.split.k_core)
    } else {
        source.clone()
    };
    let t = choose_split_time(&filtered, cfg.split.oov_ratio)?;
    let split = apply_split(&filtered, t);
    let manifest = SplitManifest::new(&source, &filtered, &split, cfg.split.oov_ratio, cfg.split.k_core);
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let checksum = sha256_hex(manifest_json.as_bytes());
    let users = features(cfg, (&cfg.data.user_features, &cfg.data.user_schema), &filtered.ids.users, &manifest.iv_users)?;
    let items = features(cfg, (&cfg.data.item_features, &cfg.data.item_schema), &filtered.ids.items, &manifest.iv_items)?;
    Ok(Prepared {
        data: Dataset::new(split, users, items),
        filtered,
        manifest,
        manifest_json,
        checksum,
    })
}

pub fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(SPLIT_DIR).join(MANIFEST_FILE)
}

/// Fails unless `prepare-split` has written a manifest identical to the one the data produces now.
fn verify_manifest(cfg: &RunConfig, prep: &Prepared) -> CliResult<()> {
    let path = manifest_path(cfg);
    let on_disk = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read split manifest {} ({e}); run prepare-split first", path.display())))?;
    if on_disk != prep.manifest_json {
        return Err(CliError::Usage(format!(
            "split manifest {} (checksum {}) does not match the split of the current data and config (checksum {}); rerun prepare-split",
            path.display(),
            sha256_hex(on_disk.as_bytes()),
            prep.checksum
        )));
    }
    Ok(())
}

pub fn gen_toy(toy: &ToyConfig, out: &Path) -> CliResult<String> {
    let data = generate(toy)?;
    let mut outputs = Outputs::default();
    for (name, contents) in data.files() {
        outputs.add(out.join(name), contents);
    }
    let mut run = RunConfig::new(INTERACTIONS_FILE);
    run.data.user_features = Some(USER_FEATURES_FILE.into());
    run.data.user_schema = Some(USER_SCHEMA_FILE.into());
    run.data.item_features = Some(ITEM_FEATURES_FILE.into());
    run.data.item_schema = Some(ITEM_SCHEMA_FILE.into());
    run.out = PathBuf::from("run");
    run.trainer.seed = toy.seed;
    outputs.add(out.join(RUN_CONFIG_FILE), run.to_json());
    outputs.commit()?;
    Ok(format!(
        "wrote {} users, {} items, {} interactions to {}\n",
        data.log.n_users(),
        data.log.n_items(),
        data.log.len(),
        out.display()
    ))
}

pub fn prepare_split(cfg: &RunConfig) -> CliResult<String> {
    let prep = prepare(cfg)?;
    let dir = cfg.out.join(SPLIT_DIR);
    let mut outputs = Outputs::default();
    outputs.add(dir.join(MANIFEST_FILE), prep.manifest_json.clone());
    outputs.add(dir.join("train.csv"), interactions_csv(&prep.data.split.train));
    for p in Partition::ALL {
        outputs.add(dir.join(format!("eval_{}.csv", p.name())), interactions_csv(prep.data.split.eval(p)));
    }
    outputs.commit()?;
    let m = &prep.manifest;
    Ok(format!(
        "split time {}\nIV entities {} ({} users, {} items)\nrealized OOV fraction: users {:.4}, items {:.4}, overall {:.4} (target {})\nsplit checksum {}\n",
        m.split_time,
        m.n_iv(),
        m.iv_users.len(),
        m.iv_items.len(),
        m.oov_user_fraction,
        m.oov_item_fraction,
        m.oov_fraction,
        m.oov_ratio_target,
        prep.checksum
    ))
}

fn train_log_csv(rows: &[LogRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Usage(format!("cannot write training log: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Usage(format!("cannot write training log: {e}")))
}

fn new_trainer(cfg: &RunConfig, prep: &Prepared) -> CliResult<Trainer> {
    let exp = cfg.experiment();
    Ok(Trainer::new(
        exp.trainer.clone(),
        exp.model.kind,
        exp.model.dim,
        &exp.user_embedder,
        &exp.item_embedder,
        &prep.data,
    )?)
}

pub fn train(cfg: &RunConfig) -> CliResult<String> {
    cfg.experiment().validate()?;
    let prep = prepare(cfg)?;
    verify_manifest(cfg, &prep)?;
    let mut trainer = new_trainer(cfg, &prep)?;
    let log = trainer.fit(&prep.data)?;
    let ckpt = trainer.to_checkpoint(&cfg.experiment().training_hash(), &prep.checksum);
    let ckpt_json = serde_json::to_string(&ckpt).expect("checkpoint serializes") + "\n";
    let digest = sha256_hex(ckpt_json.as_bytes());

    let mut outputs = Outputs::default();
    outputs.add(cfg.out.join(CHECKPOINT_FILE), ckpt_json);
    outputs.add(cfg.out.join(TRAIN_LOG_FILE), train_log_csv(&log)?);
    outputs.add(cfg.out.join(RESOLVED_CONFIG_FILE), cfg.to_json());
    outputs.commit()?;

    let mut msg = String::new();
    if let Some(last) = log.iter().rev().find(|r| r.phase == "transductive") {
        let _ = writeln!(msg, "epoch {}: transductive loss {:.6}", last.epoch, last.loss);
    }
    let _ = writeln!(msg, "checkpoint {} sha256 {digest}", cfg.out.join(CHECKPOINT_FILE).display());
    Ok(msg)
}

pub fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, subsets: &[Subset]) -> CliResult<String> {
    let mut cfg = cfg.clone();
    if !subsets.is_empty() {
        cfg.eval.subsets = subsets.to_vec();
    }
    cfg.experiment().validate()?;
    let prep = prepare(&cfg)?;
    verify_manifest(&cfg, &prep)?;

    let path = checkpoint.map_or_else(|| cfg.out.join(CHECKPOINT_FILE), Path::to_path_buf);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: not a checkpoint: {e}", path.display())))?;
    if ckpt.split_checksum != prep.checksum {
        return Err(CliError::Usage(format!(
            "refusing to evaluate: checkpoint {} was trained on split {} but the current split is {}",
            path.display(),
            ckpt.split_checksum,
            prep.checksum
        )));
    }
    let hash = cfg.experiment().training_hash();
    if ckpt.config_hash != hash {
        return Err(CliError::Usage(format!(
            "refusing to evaluate: checkpoint {} was trained with configuration {} but the config describes {}",
            path.display(),
            ckpt.config_hash,
            hash
        )));
    }
    let mut trainer = new_trainer(&cfg, &prep)?;
    trainer.restore_checkpoint(&ckpt)?;
    let report = report_for(&trainer, &prep.data, &cfg.experiment(), &prep.checksum)?;
    let text = report.to_text();

    let mut outputs = Outputs::default();
    outputs.add(cfg.out.join(REPORT_JSON_FILE), report.to_json() + "\n");
    outputs.add(cfg.out.join(REPORT_TEXT_FILE), text.clone());
    outputs.commit()?;
    Ok(text)
}

/// Embedders-by-metric table; each cell is `mean ± std (rank)`.
pub fn comparison_text(rows: &[ComparisonRow], seeds: &[u64]) -> String {
    let mut columns: Vec<(String, String)> = Vec::new();
    for r in rows {
        let c = (r.subset.clone(), r.metric.clone());
        if !columns.contains(&c) {
            columns.push(c);
        }
    }
    let mut embedders: Vec<&str> = Vec::new();
    for r in rows {
        if !embedders.contains(&r.embedder.as_str()) {
            embedders.push(&r.embedder);
        }
    }
    let cell = |r: &ComparisonRow| match (r.mean, r.std, r.mean_rank) {
        (Some(m), Some(s), Some(k)) => format!("{m:.4} ± {s:.4} ({k:.2})"),
        _ => "failed".to_string(),
    };
    let width = 26;
    let mut out = format!("seeds: {}\n", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    let _ = write!(out, "{:<10}", "embedder");
    for (s, m) in &columns {
        let _ = write!(out, " {:>width$}", format!("{s} {m}"));
    }
    out.push('\n');
    for e in &embedders {
        let _ = write!(out, "{e:<10}");
        for (s, m) in &columns {
            let r = rows.iter().find(|r| r.embedder == *e && &r.subset == s && &r.metric == m).expect("complete table");
            let _ = write!(out, " {:>width$}", cell(r));
        }
        out.push('\n');
    }
    for e in &embedders {
        if let Some(err) = rows.iter().find(|r| r.embedder == *e).and_then(|r| r.error.as_ref()) {
            let _ = writeln!(out, "{e}: {err}");
        }
    }
    out
}

fn csv_bytes<T: serde::Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Usage(format!("cannot write csv: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Usage(format!("cannot write csv: {e}")))
}

pub fn compare(cfg: &RunConfig, embedders: &[EmbedderKind], seeds: &[u64]) -> CliResult<String> {
    let embedders = if embedders.is_empty() { cfg.compare.embedders.as_slice() } else { embedders };
    if embedders.len() < 2 {
        return Err(CliError::Usage(format!(
            "compare-embedders needs at least two embedders, got {}",
            embedders.len()
        )));
    }
    let seeds = if seeds.is_empty() { cfg.seeds() } else { seeds.to_vec() };
    cfg.experiment().validate()?;
    let prep = prepare(cfg)?;
    let rows = compare_embedders(&prep.data, &cfg.experiment(), embedders, &seeds, &prep.checksum)?;
    let text = comparison_text(&rows, &seeds);
    let mut outputs = Outputs::default();
    outputs.add(cfg.out.join(COMPARISON_CSV_FILE), csv_bytes(&rows)?);
    outputs.add(cfg.out.join(COMPARISON_TEXT_FILE), text.clone());
    outputs.commit()?;
    Ok(text)
}

pub fn run_sweep(cfg: &RunConfig, seeds: &[u64]) -> CliResult<(String, Vec<SweepRow>)> {
    if cfg.sweep.is_empty() {
        return Err(CliError::Usage("the config's `sweep` grid is empty".into()));
    }
    let seeds = if seeds.is_empty() { cfg.seeds() } else { seeds.to_vec() };
    cfg.experiment().validate()?;
    let prep = prepare(cfg)?;
    let rows = sweep(&prep.data, &cfg.experiment(), &cfg.sweep, &seeds, &prep.checksum)?;
    let failed = rows.iter().filter(|r| r.score.is_none()).count();
    let path = cfg.out.join(SWEEP_CSV_FILE);
    let mut outputs = Outputs::default();
    outputs.add(&path, csv_bytes(&rows)?);
    outputs.commit()?;
    Ok((
        format!("{} rows ({failed} failed) written to {}\n", rows.len(), path.display()),
        rows,
    ))
}

/// Reads a report written by `evaluate`.
pub fn read_report(path: &Path) -> CliResult<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: not a report: {e}", path.display())))
}
