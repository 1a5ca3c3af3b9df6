//! Synthetic clustered dataset.
//!
//! Users and items belong to latent clusters. Entity features are a noisy
//! copy of the cluster centroid plus cluster-biased categorical fields, and
//! users mostly interact with items of their own cluster. Entities arrive
//! over time, so a time split produces OOV users and items whose features
//! carry the signal an OOV embedder can exploit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureField, FeatureKind, FeatureSchema, FeatureTable, ImputePolicy, InteractionLog, RawValue};
use crate::corpus::{normalize_per_feature, FeatureMatrix};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng, Stream};
use crate::splitter::{apply_split, choose_split_time};
use crate::trainer::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Width of the dense `profile` field.
    pub profile_dim: usize,
    /// Std of the per-entity noise added to the cluster centroid.
    pub noise: f64,
    /// Probability that an interaction stays inside the user's cluster.
    pub in_cluster: f64,
    pub min_events: usize,
    pub max_events: usize,
    /// Timestamps fall in `0..horizon`.
    pub horizon: i64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 200,
            clusters: 8,
            profile_dim: 8,
            noise: 0.5,
            in_cluster: 0.85,
            min_events: 8,
            max_events: 24,
            horizon: 10_000,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.users == 0 || self.items == 0 || self.clusters == 0 || self.profile_dim == 0 {
            bad.push("users, items, clusters and profile_dim must be positive".to_string());
        }
        if self.clusters > self.items {
            bad.push(format!("{} clusters need at least as many items", self.clusters));
        }
        if !(0.0..=1.0).contains(&self.in_cluster) {
            bad.push(format!("in_cluster = {} is outside [0, 1]", self.in_cluster));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            bad.push(format!("noise = {} must be non-negative", self.noise));
        }
        if self.min_events == 0 || self.min_events > self.max_events || self.max_events > self.items {
            bad.push(format!(
                "events per user {}..={} must be non-empty and at most the item count",
                self.min_events, self.max_events
            ));
        }
        if self.horizon < 10 {
            bad.push("horizon must be at least 10".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub log: InteractionLog,
    pub user_features: FeatureTable,
    pub item_features: FeatureTable,
    pub user_clusters: Vec<usize>,
    pub item_clusters: Vec<usize>,
}

fn user_name(u: usize) -> String {
    format!("u{u:04}")
}

fn item_name(i: usize) -> String {
    format!("i{i:04}")
}

fn user_schema(clusters: usize, profile_dim: usize) -> Result<FeatureSchema> {
    FeatureSchema::new(vec![
        FeatureField::numeric("profile", FeatureKind::Dense, profile_dim)?,
        FeatureField::categorical("segment", FeatureKind::Categorical, (0..clusters).map(|c| format!("s{c}")))?,
    ])
}

fn item_schema(clusters: usize, profile_dim: usize) -> Result<FeatureSchema> {
    FeatureSchema::new(vec![
        FeatureField::numeric("profile", FeatureKind::Dense, profile_dim)?,
        FeatureField::categorical("tags", FeatureKind::MultiCategorical, (0..2 * clusters).map(|t| format!("t{t}")))?,
    ])
}

pub fn generate(config: &ToyConfig) -> Result<ToyData> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::Toy, 0);
    let k = config.clusters;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("valid std");

    let centroids: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..config.profile_dim).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();
    let profile = |c: usize, rng: &mut Rng| -> Vec<f64> {
        centroids[c].iter().map(|m| m + noise.sample(rng)).collect()
    };

    // items are dealt round-robin so every cluster is populated
    let item_clusters: Vec<usize> = (0..config.items).map(|i| i % k).collect();
    let user_clusters: Vec<usize> = (0..config.users).map(|_| rng.random_range(0..k)).collect();
    let arrival_span = config.horizon * 4 / 5;
    let user_arrival: Vec<i64> = (0..config.users).map(|_| rng.random_range(0..arrival_span)).collect();
    let item_arrival: Vec<i64> = (0..config.items).map(|_| rng.random_range(0..arrival_span)).collect();

    let mut by_cluster: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in item_clusters.iter().enumerate() {
        by_cluster[c].push(i);
    }

    let mut user_rows = Vec::with_capacity(config.users);
    for (u, &c) in user_clusters.iter().enumerate() {
        let segment = if rng.random_bool(0.8) { c } else { rng.random_range(0..k) };
        user_rows.push((
            user_name(u),
            vec![RawValue::Numbers(profile(c, &mut rng)), RawValue::Category(format!("s{segment}"))],
        ));
    }
    let mut item_rows = Vec::with_capacity(config.items);
    for (i, &c) in item_clusters.iter().enumerate() {
        let mut tags = vec![format!("t{}", 2 * c + rng.random_range(0..2))];
        if rng.random_bool(0.5) {
            tags.push(format!("t{}", rng.random_range(0..2 * k)));
        }
        tags.dedup();
        item_rows.push((item_name(i), vec![RawValue::Numbers(profile(c, &mut rng)), RawValue::Categories(tags)]));
    }

    let mut triples: Vec<(usize, usize, i64)> = Vec::new();
    let delay_span = config.horizon - arrival_span;
    for (u, &c) in user_clusters.iter().enumerate() {
        let n = rng.random_range(config.min_events..=config.max_events);
        let mut chosen: Vec<usize> = Vec::with_capacity(n);
        let mut attempts = 0;
        while chosen.len() < n && attempts < 100 * n {
            attempts += 1;
            let pool = if rng.random_bool(config.in_cluster) {
                &by_cluster[c]
            } else {
                &by_cluster[rng.random_range(0..k)]
            };
            let i = pool[rng.random_range(0..pool.len())];
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        // fill up from the whole catalog if the cluster ran out
        if chosen.len() < n {
            for i in sample(&mut rng, config.items, config.items).into_iter() {
                if chosen.len() == n {
                    break;
                }
                if !chosen.contains(&i) {
                    chosen.push(i);
                }
            }
        }
        for i in chosen {
            let t = user_arrival[u].max(item_arrival[i]) + rng.random_range(0..delay_span);
            triples.push((u, i, t));
        }
    }
    triples.sort_by_key(|&(u, i, t)| (t, u, i));

    let names: Vec<(String, String, i64)> = triples.iter().map(|&(u, i, t)| (user_name(u), item_name(i), t)).collect();
    let log = InteractionLog::from_triples(names.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)));
    Ok(ToyData {
        log,
        user_features: FeatureTable::new(user_schema(k, config.profile_dim)?, user_rows, ImputePolicy::Mean)?,
        item_features: FeatureTable::new(item_schema(k, config.profile_dim)?, item_rows, ImputePolicy::Mean)?,
        user_clusters,
        item_clusters,
    })
}

fn raw_cell(v: &RawValue) -> String {
    match v {
        RawValue::Missing => String::new(),
        RawValue::Numbers(x) => x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("|"),
        RawValue::Category(c) => c.clone(),
        RawValue::Categories(c) => c.join("|"),
    }
}

fn feature_csv(table: &FeatureTable) -> String {
    let mut out = String::from("id");
    for f in &table.schema.fields {
        out.push(',');
        out.push_str(&f.name);
    }
    out.push('\n');
    for (id, row) in table.ids.iter().zip(&table.rows) {
        out.push_str(id);
        for v in row {
            out.push(',');
            out.push_str(&raw_cell(v));
        }
        out.push('\n');
    }
    out
}

/// File names written by [`ToyData::write`].
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const USER_FEATURES_FILE: &str = "user_features.csv";
pub const ITEM_FEATURES_FILE: &str = "item_features.csv";
pub const USER_SCHEMA_FILE: &str = "user_schema.json";
pub const ITEM_SCHEMA_FILE: &str = "item_schema.json";

impl ToyData {
    /// Writes the interaction log, both feature files and their schemas into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, contents) in self.files() {
            fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }

    /// `(file name, contents)` for everything [`ToyData::write`] produces.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        vec![
            (INTERACTIONS_FILE, interactions_csv(&self.log)),
            (USER_FEATURES_FILE, feature_csv(&self.user_features)),
            (ITEM_FEATURES_FILE, feature_csv(&self.item_features)),
            (USER_SCHEMA_FILE, self.user_features.schema.to_json()),
            (ITEM_SCHEMA_FILE, self.item_features.schema.to_json()),
        ]
    }

    /// Time-split dataset with encoded features aligned to the log's ids.
    pub fn dataset(&self, oov_ratio: f64) -> Result<Dataset> {
        let t = choose_split_time(&self.log, oov_ratio)?;
        let split = apply_split(&self.log, t);
        let users = encoded(&self.user_features, &self.log.ids.users)?;
        let items = encoded(&self.item_features, &self.log.ids.items)?;
        Ok(Dataset::new(split, Some(users), Some(items)))
    }
}

fn encoded(table: &FeatureTable, ids: &indexmap::IndexSet<String>) -> Result<FeatureMatrix> {
    Ok(normalize_per_feature(table.encode()?)?.align(ids))
}

/// `user,item,timestamp` CSV of a log, plus a `label` column if any event has one.
pub fn interactions_csv(log: &InteractionLog) -> String {
    let labelled = log.events.iter().any(|e| e.label.is_some());
    let mut out = String::from(if labelled { "user,item,timestamp,label\n" } else { "user,item,timestamp\n" });
    for e in &log.events {
        let _ = write!(out, "{},{},{}", log.ids.user_name(e.user), log.ids.item_name(e.item), e.timestamp);
        if labelled {
            let _ = write!(out, ",{}", e.label.map_or(String::new(), |l| l.to_string()));
        }
        out.push('\n');
    }
    out
}

/// Five users and five items; `u0` and `i0` share time 1 and every other
/// entity first appears alone at times 2..=9.
pub fn tiny_log() -> InteractionLog {
    InteractionLog::from_triples([
        ("u0", "i0", 1),
        ("u1", "i0", 2),
        ("u0", "i1", 3),
        ("u2", "i1", 4),
        ("u0", "i2", 5),
        ("u3", "i0", 6),
        ("u0", "i3", 7),
        ("u4", "i0", 8),
        ("u0", "i4", 9),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let a = generate(&ToyConfig::default()).unwrap();
        let b = generate(&ToyConfig::default()).unwrap();
        assert_eq!(a.log.checksum(), b.log.checksum());
        assert_eq!(a.user_features, b.user_features);
        let c = generate(&ToyConfig { seed: 1, ..ToyConfig::default() }).unwrap();
        assert_ne!(a.log.checksum(), c.log.checksum());
    }

    #[test]
    fn interactions_are_mostly_in_cluster() {
        let d = generate(&ToyConfig::default()).unwrap();
        let mut inside = 0;
        for e in &d.log.events {
            let u: usize = d.log.ids.user_name(e.user)[1..].parse().unwrap();
            let i: usize = d.log.ids.item_name(e.item)[1..].parse().unwrap();
            inside += usize::from(d.user_clusters[u] == d.item_clusters[i]);
        }
        let frac = inside as f64 / d.log.len() as f64;
        // 0.85 in-cluster plus 1/8 of the remainder by chance, less what
        // spills over once a heavy user has exhausted its cluster
        assert!((0.80..0.90).contains(&frac), "{frac}");
    }

    #[test]
    fn no_duplicate_pairs() {
        let d = generate(&ToyConfig::default()).unwrap();
        let mut pairs: Vec<(u32, u32)> = d.log.events.iter().map(|e| (e.user, e.item)).collect();
        pairs.sort_unstable();
        let n = pairs.len();
        pairs.dedup();
        assert_eq!(n, pairs.len());
    }

    #[test]
    fn split_has_oov_entities() {
        let d = generate(&ToyConfig::default()).unwrap();
        let data = d.dataset(0.2).unwrap();
        let n = data.split.iv_users.len() + data.split.iv_items.len();
        let iv = data.split.n_iv_users() + data.split.n_iv_items();
        let oov = 1.0 - iv as f64 / n as f64;
        assert!((0.15..0.25).contains(&oov), "{oov}");
        assert!(data.feature_dim(crate::embedders::EntityKind::User).is_some());
    }

    #[test]
    fn written_files_reload() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&ToyConfig { users: 20, items: 30, ..ToyConfig::default() }).unwrap();
        d.write(dir.path()).unwrap();
        let fmt = crate::corpus::DelimiterConfig::default();
        let log = crate::corpus::load_interactions(&dir.path().join(INTERACTIONS_FILE), &fmt).unwrap();
        assert_eq!(log.checksum(), d.log.checksum());
        let users = FeatureTable::load(
            &dir.path().join(USER_SCHEMA_FILE),
            &dir.path().join(USER_FEATURES_FILE),
            &fmt,
            ImputePolicy::Mean,
        )
        .unwrap();
        assert_eq!(users, d.user_features);
        let items = FeatureTable::load(
            &dir.path().join(ITEM_SCHEMA_FILE),
            &dir.path().join(ITEM_FEATURES_FILE),
            &fmt,
            ImputePolicy::Mean,
        )
        .unwrap();
        assert_eq!(items, d.item_features);
    }
}
