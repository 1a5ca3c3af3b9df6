//! Ranking metrics and filtered evaluation over OOV subsets.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Event;
use crate::embedders::{EntityKind, OovEmbedder, OovQuery};
use crate::error::{Error, Result};
use crate::models::{recommend_topk, Model};
use crate::rng::{stream_rng, Stream};
use crate::splitter::Partition;
use crate::tensor::dot;
use crate::trainer::Dataset;

mod sweep;

pub use sweep::{
    compare_embedders, report_for, run_experiment, sweep, ComparisonRow, ExperimentConfig, ModelConfig, SweepGrid, SweepRow,
};

/// Normalized discounted cumulative gain of the first `k` entries of `ranked`.
/// Returns 0 when `relevant` is empty.
pub fn ndcg_at_k(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> Result<f64> {
    let mut seen = HashSet::with_capacity(ranked.len());
    if let Some(dup) = ranked.iter().find(|i| !seen.insert(**i)) {
        return Err(Error::DuplicateItem(*dup));
    }
    if relevant.is_empty() || k == 0 {
        return Ok(0.0);
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, via the rank-sum statistic.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auroc needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            what: "auroc scores".into(),
            diagnostics: "NaN score".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based rank within each group of equal scores
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        rank_sum_pos += mid_rank * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Evaluation subsets by vocabulary status of the interaction endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    OovUsers,
    OovItems,
    Transductive,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::All, Subset::OovUsers, Subset::OovItems, Subset::Transductive];

    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::OovUsers => "oov_users",
            Subset::OovItems => "oov_items",
            Subset::Transductive => "transductive",
        }
    }

    pub fn contains(self, p: Partition) -> bool {
        match self {
            Subset::All => true,
            Subset::OovUsers => matches!(p, Partition::OovUserIvItem | Partition::OovUserOovItem),
            Subset::OovItems => matches!(p, Partition::IvUserOovItem | Partition::OovUserOovItem),
            Subset::Transductive => p == Partition::IvUserIvItem,
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s.trim().to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown subset `{s}` (expected one of {})",
                    Self::ALL.map(Subset::name).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub subsets: Vec<Subset>,
    /// Rank only IV items for the OOV-user and `all` subsets.
    pub iv_items_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            subsets: Subset::ALL.to_vec(),
            iv_items_only: false,
        }
    }
}

impl EvalConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.k == 0 {
            out.push("eval k must be at least 1".into());
        }
        if self.subsets.is_empty() {
            out.push("at least one eval subset is required".into());
        }
        out
    }
}

/// Scores users against items through the base model and the OOV embedders.
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub user_embedder: &'a OovEmbedder,
    pub item_embedder: &'a OovEmbedder,
    pub data: &'a Dataset,
}

impl Scorer<'_> {
    /// Scoring vector of a real entity: the IV row if it has one, otherwise
    /// the OOV embedding of its dense id.
    pub fn vector(&self, entity: EntityKind, dense: u32) -> Result<Vec<f64>> {
        let features = self.data.features(entity, dense);
        let embedding = match self.data.row(entity, dense) {
            Some(r) => self.model.table(entity).row(r).to_vec(),
            None => {
                let ctx = self.data.iv_context(self.model, entity);
                let q = OovQuery::new(dense as u64, features);
                match entity {
                    EntityKind::User => self.user_embedder.embed(&q, &ctx)?,
                    EntityKind::Item => self.item_embedder.embed(&q, &ctx)?,
                }
            }
        };
        let out = self.model.represent(entity, &embedding, features);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite {
                what: format!("{} {dense} embedding", entity.name()),
                diagnostics: "scoring vector is not finite".into(),
            })
        }
    }
}

/// Metrics of one subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub subset: Subset,
    pub ndcg: f64,
    pub auroc: f64,
    /// Users with at least one eval positive in the subset.
    pub users: usize,
    /// Users of the subset whose positives were all training items.
    pub users_skipped: usize,
    pub interactions: usize,
    pub negatives: usize,
    pub catalog: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub seed: u64,
    pub config_hash: String,
    pub split_checksum: String,
    pub subsets: Vec<SubsetReport>,
}

impl MetricsReport {
    pub fn get(&self, subset: Subset) -> Option<&SubsetReport> {
        self.subsets.iter().find(|s| s.subset == subset)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned-column table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed {}  k {}  config {}  split {}", self.seed, self.k, short(&self.config_hash), short(&self.split_checksum));
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>10} {:>7} {:>8} {:>13} {:>10} {:>8}",
            "subset",
            format!("ndcg@{}", self.k),
            "auroc",
            "users",
            "skipped",
            "interactions",
            "negatives",
            "catalog"
        );
        for s in &self.subsets {
            let _ = writeln!(
                out,
                "{:<14} {:>10.6} {:>10.6} {:>7} {:>8} {:>13} {:>10} {:>8}",
                s.subset.name(),
                s.ndcg,
                s.auroc,
                s.users,
                s.users_skipped,
                s.interactions,
                s.negatives,
                s.catalog
            );
        }
        out
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Per-user work item of a subset.
struct UserTask {
    user: u32,
    relevant: HashSet<u32>,
    positives: Vec<u32>,
}

/// Evaluates one subset. Retrieval ranks the subset's catalog for each user
/// (excluding the user's pre-split items) and averages ndcg@k over users;
/// ranking scores each eval positive against one sampled negative and pools
/// every pair into a single auroc.
pub fn evaluate(scorer: &Scorer<'_>, subset: Subset, config: &EvalConfig, seed: u64) -> Result<SubsetReport> {
    let data = scorer.data;
    let split = &data.split;
    let n_items = split.iv_items.len();

    let catalog: Vec<u32> = if subset == Subset::Transductive || (config.iv_items_only && subset != Subset::OovItems) {
        split.iv_item_ids()
    } else {
        (0..n_items as u32).collect()
    };
    let item_vectors: Vec<Vec<f64>> = catalog
        .par_iter()
        .map(|&i| scorer.vector(EntityKind::Item, i))
        .collect::<Result<_>>()?;

    // pre-split items per user, and every item each user touched
    let mut train_items: Vec<HashSet<u32>> = vec![HashSet::new(); split.iv_users.len()];
    for e in &split.train.events {
        train_items[e.user as usize].insert(e.item);
    }
    let mut touched = train_items.clone();
    for (_, e) in split.eval_events() {
        touched[e.user as usize].insert(e.item);
    }

    let position: std::collections::HashMap<u32, usize> = catalog.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let mut tasks: Vec<UserTask> = Vec::new();
    let mut index: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    let positives: Vec<&Event> = split
        .eval_events()
        .filter(|(p, e)| subset.contains(*p) && e.is_positive())
        .map(|(_, e)| e)
        .collect();
    let mut subset_users: HashSet<u32> = HashSet::new();
    for e in &positives {
        subset_users.insert(e.user);
        // items outside the ranked catalog cannot be retrieved and are not counted
        if train_items[e.user as usize].contains(&e.item) || !position.contains_key(&e.item) {
            continue;
        }
        let slot = *index.entry(e.user).or_insert_with(|| {
            tasks.push(UserTask {
                user: e.user,
                relevant: HashSet::new(),
                positives: Vec::new(),
            });
            tasks.len() - 1
        });
        if tasks[slot].relevant.insert(e.item) {
            tasks[slot].positives.push(e.item);
        }
    }
    tasks.sort_by_key(|t| t.user);
    if tasks.is_empty() {
        return Err(Error::EmptySubset(subset.name().to_string()));
    }

    struct UserResult {
        ndcg: f64,
        pos_scores: Vec<f64>,
        neg_scores: Vec<f64>,
    }
    let results: Vec<UserResult> = tasks
        .par_iter()
        .map(|task| -> Result<UserResult> {
            let u = scorer.vector(EntityKind::User, task.user)?;
            let scores: Vec<f64> = item_vectors.iter().map(|v| dot(&u, v)).collect();
            let exclude = &train_items[task.user as usize];
            assert!(exclude.is_disjoint(&task.relevant), "train interaction leaked into relevance set");
            let mut rng = stream_rng(seed, Stream::Ranking, (subset.tag() << 40) | task.user as u64);
            let ranked: Vec<u32> = recommend_topk(&scores, config.k, |p| exclude.contains(&catalog[p as usize]), &mut rng)?
                .into_iter()
                .map(|p| catalog[p as usize])
                .collect();
            let ndcg = ndcg_at_k(&ranked, &task.relevant, config.k)?;

            let mut rng = stream_rng(seed, Stream::Evaluation, (subset.tag() << 40) | task.user as u64);
            let seen = &touched[task.user as usize];
            let candidates: Vec<usize> = (0..catalog.len()).filter(|&p| !seen.contains(&catalog[p])).collect();
            let mut pos_scores = Vec::with_capacity(task.positives.len());
            let mut neg_scores = Vec::with_capacity(task.positives.len());
            for item in &task.positives {
                pos_scores.push(scores[position[item]]);
                if !candidates.is_empty() {
                    neg_scores.push(scores[candidates[rng.random_range(0..candidates.len())]]);
                }
            }
            Ok(UserResult {
                ndcg,
                pos_scores,
                neg_scores,
            })
        })
        .collect::<Result<_>>()?;

    let ndcg = results.iter().map(|r| r.ndcg).sum::<f64>() / results.len() as f64;
    let pos: Vec<f64> = results.iter().flat_map(|r| r.pos_scores.iter().copied()).collect();
    let neg: Vec<f64> = results.iter().flat_map(|r| r.neg_scores.iter().copied()).collect();
    let labels: Vec<bool> = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
    let scores: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let auroc = auroc(&scores, &labels)?;
    Ok(SubsetReport {
        subset,
        ndcg,
        auroc,
        users: tasks.len(),
        users_skipped: subset_users.len() - tasks.len(),
        interactions: pos.len(),
        negatives: neg.len(),
        catalog: catalog.len(),
    })
}

/// Evaluates every configured subset.
pub fn evaluate_all(
    scorer: &Scorer<'_>,
    config: &EvalConfig,
    seed: u64,
    config_hash: &str,
    split_checksum: &str,
) -> Result<MetricsReport> {
    let subsets = config
        .subsets
        .iter()
        .map(|&s| evaluate(scorer, s, config, seed))
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        k: config.k,
        seed,
        config_hash: config_hash.to_string(),
        split_checksum: split_checksum.to_string(),
        subsets,
    })
}
