//! Out-of-vocabulary embedders.
//!
//! Every embedder maps an OOV id (plus the entity's features, when it has
//! them) to a `d`-vector. Trainable kinds accumulate gradients only into
//! their own parameters; the in-vocabulary [`EmbeddingTable`] is read, never
//! written, from here.

mod mlp;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use mlp::MicroMlp;

use crate::corpus::FeatureMatrix;
use crate::error::{Error, Result};
use crate::hashing::{bucket_of, lsh_code, KeyedHashFamily, LshCode, RandomProjection};
use crate::rng::{stream_rng, Rng, Stream};
use crate::tensor::{axpy, dot, Param};

/// Standard deviation used to initialize embedding tables.
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    User,
    Item,
}

impl EntityKind {
    pub fn name(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
        }
    }

    pub fn tag(self) -> u64 {
        match self {
            EntityKind::User => 1,
            EntityKind::Item => 2,
        }
    }
}

/// Trainable in-vocabulary embeddings, one row per IV entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub entity: EntityKind,
    pub param: Param,
}

impl EmbeddingTable {
    pub fn random(entity: EntityKind, rows: usize, dim: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let values = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        Self {
            entity,
            param: Param::from_vec(format!("{}_table", entity.name()), rows, dim, values),
        }
    }

    pub fn from_rows(entity: EntityKind, rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        Self {
            entity,
            param: Param::from_vec(format!("{}_table", entity.name()), rows.len(), dim, rows.concat()),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.param.rows
    }

    pub fn dim(&self) -> usize {
        self.param.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.param.row(r)
    }
}

/// The ten embedder kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Zero,
    Mean,
    Rand,
    Knn,
    RBucket,
    Dhe,
    Fdhe,
    Dnn,
    MLsh,
    SLsh,
}

impl EmbedderKind {
    pub const ALL: [EmbedderKind; 10] = [
        EmbedderKind::Zero,
        EmbedderKind::Mean,
        EmbedderKind::Rand,
        EmbedderKind::Knn,
        EmbedderKind::RBucket,
        EmbedderKind::Dhe,
        EmbedderKind::Fdhe,
        EmbedderKind::Dnn,
        EmbedderKind::MLsh,
        EmbedderKind::SLsh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmbedderKind::Zero => "zero",
            EmbedderKind::Mean => "mean",
            EmbedderKind::Rand => "rand",
            EmbedderKind::Knn => "knn",
            EmbedderKind::RBucket => "r_bucket",
            EmbedderKind::Dhe => "dhe",
            EmbedderKind::Fdhe => "fdhe",
            EmbedderKind::Dnn => "dnn",
            EmbedderKind::MLsh => "m_lsh",
            EmbedderKind::SLsh => "s_lsh",
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(
            self,
            EmbedderKind::Zero | EmbedderKind::Mean | EmbedderKind::Rand | EmbedderKind::Knn
        )
    }

    pub fn needs_features(self) -> bool {
        matches!(
            self,
            EmbedderKind::Knn | EmbedderKind::Fdhe | EmbedderKind::Dnn | EmbedderKind::MLsh | EmbedderKind::SLsh
        )
    }
}

impl fmt::Display for EmbedderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbedderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().replace('_', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown embedder `{s}`")))
    }
}

fn default_buckets() -> usize {
    64
}

fn default_neighbors() -> usize {
    5
}

fn default_hash_count() -> usize {
    64
}

/// Embedder selection and hyperparameters for one entity type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    /// Bucket count `b`. For `m_lsh` this is also the code length; for
    /// `s_lsh` it must be a power of two and the code length is `log2 b`.
    #[serde(default = "default_buckets")]
    pub buckets: usize,
    /// Neighbors averaged by `knn`.
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    /// Number of keyed hashes fed to `dhe` / `fdhe`.
    #[serde(default = "default_hash_count")]
    pub hash_count: usize,
    /// Hidden widths for `dhe`, `fdhe` and `dnn`; defaults to two layers of `2d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
}

impl EmbedderConfig {
    pub fn new(kind: EmbedderKind) -> Self {
        Self {
            kind,
            buckets: default_buckets(),
            neighbors: default_neighbors(),
            hash_count: default_hash_count(),
            hidden: None,
        }
    }

    pub fn with_buckets(mut self, buckets: usize) -> Self {
        self.buckets = buckets;
        self
    }

    /// Every violation, so callers can report them together.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let kind = self.kind;
        if self.buckets == 0 {
            out.push(format!("{kind}: buckets must be positive"));
        }
        if kind == EmbedderKind::SLsh && !self.buckets.is_power_of_two() {
            out.push(format!("s_lsh: buckets ({}) must be a power of two", self.buckets));
        }
        if kind == EmbedderKind::SLsh && self.buckets > 1 << 24 {
            out.push(format!("s_lsh: buckets ({}) too large", self.buckets));
        }
        if self.neighbors == 0 {
            out.push(format!("{kind}: neighbors must be positive"));
        }
        if self.hash_count == 0 {
            out.push(format!("{kind}: hash_count must be positive"));
        }
        if let Some(h) = &self.hidden {
            if h.contains(&0) {
                out.push(format!("{kind}: hidden widths must be positive"));
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        match self.violations().first() {
            Some(v) => Err(Error::Config(v.clone())),
            None => Ok(()),
        }
    }

    fn widths(&self, input: usize, dim: usize) -> Vec<usize> {
        let hidden = self.hidden.clone().unwrap_or_else(|| vec![2 * dim, 2 * dim]);
        std::iter::once(input).chain(hidden).chain(std::iter::once(dim)).collect()
    }
}

/// What the embedder may read about the in-vocabulary side.
#[derive(Debug, Clone, Copy)]
pub struct IvContext<'a> {
    pub table: &'a EmbeddingTable,
    /// Features of IV entities in table-row order (needed by `knn`).
    pub features: Option<&'a FeatureMatrix>,
}

/// One OOV lookup.
#[derive(Debug, Clone, Copy)]
pub struct OovQuery<'a> {
    pub id: u64,
    pub features: Option<&'a [f64]>,
}

impl<'a> OovQuery<'a> {
    pub fn new(id: u64, features: Option<&'a [f64]>) -> Self {
        Self { id, features }
    }

    fn features(&self) -> Result<&'a [f64]> {
        self.features.ok_or(Error::MissingFeatures(self.id))
    }
}

pub fn embed_zero(dim: usize) -> Vec<f64> {
    vec![0.0; dim]
}

/// Column-wise mean of the IV table.
pub fn embed_mean(table: &EmbeddingTable) -> Result<Vec<f64>> {
    if table.n_rows() == 0 {
        return Err(Error::EmptyTable);
    }
    let mut acc = vec![0.0; table.dim()];
    for r in 0..table.n_rows() {
        axpy(1.0, table.row(r), &mut acc);
    }
    let n = table.n_rows() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// `vectors[int_hash(id) mod b]` over a fixed `b x d` matrix.
pub fn embed_rand(id: u64, vectors: &Param) -> Vec<f64> {
    vectors.row(bucket_of(id, vectors.rows)).to_vec()
}

/// Table rows of the `k` IV entities with the largest feature inner product,
/// ties to the lower row. `k` is clamped to the table size.
pub fn knn_neighbors(features: &[f64], iv_features: &FeatureMatrix, k: usize) -> Result<Vec<usize>> {
    if features.len() != iv_features.dim {
        return Err(Error::Dimension {
            expected: iv_features.dim,
            found: features.len(),
        });
    }
    let n = iv_features.len();
    if k > n {
        log::warn!("knn: k = {k} exceeds {n} in-vocabulary rows, clamping");
    }
    let mut scored = Vec::with_capacity(n);
    for r in 0..n {
        let row = iv_features.get(r).ok_or(Error::MissingFeatures(r as u64))?;
        scored.push((dot(features, row), r));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k.min(n)).map(|(_, r)| r).collect())
}

fn mean_of_rows(table: &Param, rows: impl IntoIterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0.0; table.cols];
    let mut count = 0usize;
    for r in rows {
        axpy(1.0, table.row(r), &mut acc);
        count += 1;
    }
    if count > 0 {
        acc.iter_mut().for_each(|v| *v /= count as f64);
    }
    acc
}

pub fn embed_knn(features: &[f64], ctx: &IvContext<'_>, k: usize) -> Result<Vec<f64>> {
    let iv_features = ctx.features.ok_or(Error::MissingFeatures(u64::MAX))?;
    if ctx.table.n_rows() == 0 {
        return Err(Error::EmptyTable);
    }
    let rows = knn_neighbors(features, iv_features, k)?;
    Ok(mean_of_rows(&ctx.table.param, rows))
}

pub fn embed_r_bucket(id: u64, table: &Param) -> Vec<f64> {
    table.row(bucket_of(id, table.rows)).to_vec()
}

pub fn embed_dhe(id: u64, family: &KeyedHashFamily, net: &MicroMlp) -> Result<Vec<f64>> {
    net.forward(&family.encode(id))
}

fn fdhe_input(id: u64, features: &[f64], family: &KeyedHashFamily) -> Vec<f64> {
    let mut input = features.to_vec();
    input.extend(family.encode(id));
    input
}

pub fn embed_fdhe(id: u64, features: &[f64], family: &KeyedHashFamily, net: &MicroMlp) -> Result<Vec<f64>> {
    net.forward(&fdhe_input(id, features, family))
}

pub fn embed_dnn(features: &[f64], net: &MicroMlp) -> Result<Vec<f64>> {
    net.forward(features)
}

/// Mean of the table rows whose code bit is set. An all-zero code (features
/// on the negative side of every hyperplane) selects nothing and maps to the
/// zero vector, as an empty mean bag would.
pub fn embed_m_lsh_code(code: &LshCode, table: &Param) -> Vec<f64> {
    if code.count_ones() == 0 {
        vec![0.0; table.cols]
    } else {
        mean_of_rows(table, code.ones())
    }
}

pub fn embed_m_lsh(features: &[f64], proj: &RandomProjection, table: &Param) -> Result<Vec<f64>> {
    Ok(embed_m_lsh_code(&lsh_code(proj, features)?, table))
}

pub fn embed_s_lsh(features: &[f64], proj: &RandomProjection, table: &Param) -> Result<Vec<f64>> {
    Ok(table.row(lsh_code(proj, features)?.to_index()).to_vec())
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Zero,
    Mean,
    Rand { vectors: Param },
    Knn { k: usize },
    RBucket { table: Param },
    Dhe { family: KeyedHashFamily, net: MicroMlp },
    Fdhe { family: KeyedHashFamily, net: MicroMlp },
    Dnn { net: MicroMlp },
    MLsh { proj: RandomProjection, table: Param },
    SLsh { proj: RandomProjection, table: Param },
}

/// An OOV embedder of any kind, with optional id -> code and id -> neighbor caches.
#[derive(Debug, Clone)]
pub struct OovEmbedder {
    kind: EmbedderKind,
    entity: EntityKind,
    dim: usize,
    state: State,
    mean_cache: Option<Vec<f64>>,
    code_cache: HashMap<u64, LshCode>,
    neighbor_cache: HashMap<u64, Vec<usize>>,
}

impl OovEmbedder {
    /// `feature_dim` is the encoded feature width of this entity type, if it has features.
    pub fn new(config: &EmbedderConfig, entity: EntityKind, dim: usize, feature_dim: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        let kind = config.kind;
        let feature_dim = match (kind.needs_features(), feature_dim) {
            (true, None) => {
                return Err(Error::Config(format!("{kind} needs {} features", entity.name())))
            }
            (_, d) => d,
        };
        let prefix = format!("{}_oov", entity.name());
        let mut rng = stream_rng(seed, Stream::Init, 16 + entity.tag());
        let table = |rows: usize, rng: &mut Rng| {
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            let values = (0..rows * dim).map(|_| normal.sample(rng)).collect();
            Param::from_vec(format!("{prefix}.table"), rows, dim, values)
        };
        let family = || KeyedHashFamily::new(seed ^ entity.tag().rotate_left(32), config.hash_count);
        let b = config.buckets;
        let state = match kind {
            EmbedderKind::Zero => State::Zero,
            EmbedderKind::Mean => State::Mean,
            EmbedderKind::Rand => {
                let mut rng = stream_rng(seed, Stream::RandVectors, entity.tag());
                let normal = Normal::new(0.0, INIT_STD).expect("valid std");
                let values = (0..b * dim).map(|_| normal.sample(&mut rng)).collect();
                State::Rand {
                    vectors: Param::from_vec(format!("{prefix}.fixed"), b, dim, values),
                }
            }
            EmbedderKind::Knn => State::Knn { k: config.neighbors },
            EmbedderKind::RBucket => State::RBucket { table: table(b, &mut rng) },
            EmbedderKind::Dhe => State::Dhe {
                family: family(),
                net: MicroMlp::new(&format!("{prefix}.mlp"), &config.widths(config.hash_count, dim), &mut rng)?,
            },
            EmbedderKind::Fdhe => {
                let input = feature_dim.expect("checked above") + config.hash_count;
                State::Fdhe {
                    family: family(),
                    net: MicroMlp::new(&format!("{prefix}.mlp"), &config.widths(input, dim), &mut rng)?,
                }
            }
            EmbedderKind::Dnn => State::Dnn {
                net: MicroMlp::new(
                    &format!("{prefix}.mlp"),
                    &config.widths(feature_dim.expect("checked above"), dim),
                    &mut rng,
                )?,
            },
            EmbedderKind::MLsh => State::MLsh {
                proj: RandomProjection::new(seed, entity.tag(), b, feature_dim.expect("checked above")),
                table: table(b, &mut rng),
            },
            EmbedderKind::SLsh => State::SLsh {
                proj: RandomProjection::new(
                    seed,
                    entity.tag(),
                    b.trailing_zeros() as usize,
                    feature_dim.expect("checked above"),
                ),
                table: table(b, &mut rng),
            },
        };
        Ok(Self {
            kind,
            entity,
            dim,
            state,
            mean_cache: None,
            code_cache: HashMap::new(),
            neighbor_cache: HashMap::new(),
        })
    }

    pub fn kind(&self) -> EmbedderKind {
        self.kind
    }

    pub fn entity(&self) -> EntityKind {
        self.entity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Projection used by the LSH kinds.
    pub fn projection(&self) -> Option<&RandomProjection> {
        match &self.state {
            State::MLsh { proj, .. } | State::SLsh { proj, .. } => Some(proj),
            _ => None,
        }
    }

    fn code(&self, q: &OovQuery<'_>, proj: &RandomProjection) -> Result<LshCode> {
        match self.code_cache.get(&q.id) {
            Some(code) => Ok(code.clone()),
            None => lsh_code(proj, q.features()?),
        }
    }

    fn neighbors(&self, q: &OovQuery<'_>, ctx: &IvContext<'_>, k: usize) -> Result<Vec<usize>> {
        match self.neighbor_cache.get(&q.id) {
            Some(n) => Ok(n.clone()),
            None => {
                let iv = ctx.features.ok_or(Error::MissingFeatures(q.id))?;
                knn_neighbors(q.features()?, iv, k)
            }
        }
    }

    pub fn embed(&self, q: &OovQuery<'_>, ctx: &IvContext<'_>) -> Result<Vec<f64>> {
        match &self.state {
            State::Zero => Ok(embed_zero(self.dim)),
            State::Mean => match &self.mean_cache {
                Some(m) => Ok(m.clone()),
                None => embed_mean(ctx.table),
            },
            State::Rand { vectors } => Ok(embed_rand(q.id, vectors)),
            State::Knn { k } => {
                if ctx.table.n_rows() == 0 {
                    return Err(Error::EmptyTable);
                }
                let rows = self.neighbors(q, ctx, *k)?;
                Ok(mean_of_rows(&ctx.table.param, rows))
            }
            State::RBucket { table } => Ok(embed_r_bucket(q.id, table)),
            State::Dhe { family, net } => embed_dhe(q.id, family, net),
            State::Fdhe { family, net } => embed_fdhe(q.id, q.features()?, family, net),
            State::Dnn { net } => embed_dnn(q.features()?, net),
            State::MLsh { proj, table } => Ok(embed_m_lsh_code(&self.code(q, proj)?, table)),
            State::SLsh { proj, table } => Ok(table.row(self.code(q, proj)?.to_index()).to_vec()),
        }
    }

    /// Accumulates `d loss / d params` for one lookup given the gradient of
    /// the loss with respect to the returned embedding. No-op for untrained kinds.
    pub fn backward(&mut self, q: &OovQuery<'_>, grad_out: &[f64]) -> Result<()> {
        if grad_out.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: grad_out.len(),
            });
        }
        let code = match &self.state {
            State::MLsh { proj, .. } | State::SLsh { proj, .. } => Some(self.code(q, proj)?),
            _ => None,
        };
        match &mut self.state {
            State::Zero | State::Mean | State::Rand { .. } | State::Knn { .. } => {}
            State::RBucket { table } => {
                let r = bucket_of(q.id, table.rows);
                axpy(1.0, grad_out, table.grad_row_mut(r));
            }
            State::Dhe { family, net } => {
                net.backward(&family.encode(q.id), grad_out)?;
            }
            State::Fdhe { family, net } => {
                let features = q.features.ok_or(Error::MissingFeatures(q.id))?;
                net.backward(&fdhe_input(q.id, features, family), grad_out)?;
            }
            State::Dnn { net } => {
                let features = q.features.ok_or(Error::MissingFeatures(q.id))?;
                net.backward(features, grad_out)?;
            }
            State::MLsh { table, .. } => {
                let code = code.expect("lsh code");
                let share = 1.0 / code.count_ones().max(1) as f64;
                for r in code.ones() {
                    axpy(share, grad_out, table.grad_row_mut(r));
                }
            }
            State::SLsh { table, .. } => {
                let r = code.expect("lsh code").to_index();
                axpy(1.0, grad_out, table.grad_row_mut(r));
            }
        }
        Ok(())
    }

    /// Trainable parameters; empty for untrained kinds.
    pub fn params(&self) -> Vec<&Param> {
        match &self.state {
            State::RBucket { table } | State::MLsh { table, .. } | State::SLsh { table, .. } => vec![table],
            State::Dhe { net, .. } | State::Fdhe { net, .. } | State::Dnn { net } => net.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match &mut self.state {
            State::RBucket { table } | State::MLsh { table, .. } | State::SLsh { table, .. } => vec![table],
            State::Dhe { net, .. } | State::Fdhe { net, .. } | State::Dnn { net } => net.params_mut(),
            _ => Vec::new(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Overwrites trainable parameters from a checkpoint.
    pub fn load_params(&mut self, saved: &[Param]) -> Result<()> {
        let kind = self.kind;
        let mut params = self.params_mut();
        if params.len() != saved.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters for a {} embedder with {}",
                saved.len(),
                kind,
                params.len()
            )));
        }
        for (p, s) in params.iter_mut().zip(saved) {
            if p.name != s.name || p.rows != s.rows || p.cols != s.cols {
                return Err(Error::Config(format!("checkpoint parameter `{}` does not match `{}`", s.name, p.name)));
            }
            p.value.clone_from(&s.value);
            p.ensure_grad();
        }
        Ok(())
    }

    /// Caches the column mean of the (now frozen) IV table for the `mean` kind.
    pub fn prepare(&mut self, ctx: &IvContext<'_>) -> Result<()> {
        self.mean_cache = match self.kind {
            EmbedderKind::Mean => Some(embed_mean(ctx.table)?),
            _ => None,
        };
        Ok(())
    }

    /// Single-writer pass filling the id -> code (LSH kinds) and
    /// id -> neighbors (`knn`) caches. Assumes an id's features never change.
    pub fn precompute(&mut self, queries: &[OovQuery<'_>], ctx: &IvContext<'_>) -> Result<()> {
        match &self.state {
            State::MLsh { proj, .. } | State::SLsh { proj, .. } => {
                for q in queries {
                    let code = lsh_code(proj, q.features()?)?;
                    self.code_cache.insert(q.id, code);
                }
            }
            State::Knn { k } => {
                let iv = ctx.features.ok_or(Error::MissingFeatures(u64::MAX))?;
                for q in queries {
                    let n = knn_neighbors(q.features()?, iv, *k)?;
                    self.neighbor_cache.insert(q.id, n);
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn clear_caches(&mut self) {
        self.mean_cache = None;
        self.code_cache.clear();
        self.neighbor_cache.clear();
    }

    pub fn cached_entries(&self) -> usize {
        self.code_cache.len() + self.neighbor_cache.len()
    }
}

/// A random feature vector, for tests and benchmarks.
pub fn random_features(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}
