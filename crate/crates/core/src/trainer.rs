//! Two-phase training.
//!
//! Each epoch first fits the base model on real training interactions, then
//! fits only the OOV embedders on synthetic OOV copies of training entities.
//! Base parameters never receive a phase-2 gradient and the optimizer state
//! is rolled back after phase 2, so IV-to-IV scores do not depend on whether
//! phase 2 ran.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_features, Event, FeatureMatrix};
use crate::embedders::{EmbedderConfig, EmbedderKind, EntityKind, IvContext, OovEmbedder, OovQuery};
use crate::error::{Error, Result};
use crate::models::{bpr_loss_and_grad, ctx_lite_loss_and_grad, directau_loss_and_grad, Model, ModelKind};
use crate::rng::{stream_rng, Rng, Stream};
use crate::splitter::{holdout, InductiveSplit};
use crate::tensor::{all_finite, axpy, norm, Param};

/// Split plus encoded features, in dense-id order and in IV table-row order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: InductiveSplit,
    user_features: Option<FeatureMatrix>,
    item_features: Option<FeatureMatrix>,
    iv_user_features: Option<FeatureMatrix>,
    iv_item_features: Option<FeatureMatrix>,
}

impl Dataset {
    /// Feature matrices are indexed by dense id. Entities without a feature
    /// row fall back to an all-zero vector.
    pub fn new(split: InductiveSplit, user_features: Option<FeatureMatrix>, item_features: Option<FeatureMatrix>) -> Self {
        let fill = |m: Option<FeatureMatrix>, n: usize, entity: EntityKind| {
            m.map(|m| {
                let missing = (0..n).filter(|&e| m.get(e).is_none()).count();
                if missing > 0 {
                    log::warn!("{missing} {}s have no feature row; using zero features", entity.name());
                }
                let rows = (0..n)
                    .map(|e| Some(m.get(e).map_or_else(|| vec![0.0; m.dim], <[f64]>::to_vec)))
                    .collect();
                FeatureMatrix::from_rows(m.dim, m.bounds.clone(), rows)
            })
        };
        let user_features = fill(user_features, split.iv_users.len(), EntityKind::User);
        let item_features = fill(item_features, split.iv_items.len(), EntityKind::Item);
        let iv_user_features = user_features.as_ref().map(|m| m.select(&split.iv_user_ids()));
        let iv_item_features = item_features.as_ref().map(|m| m.select(&split.iv_item_ids()));
        Self {
            split,
            user_features,
            item_features,
            iv_user_features,
            iv_item_features,
        }
    }

    pub fn feature_matrix(&self, entity: EntityKind) -> Option<&FeatureMatrix> {
        match entity {
            EntityKind::User => self.user_features.as_ref(),
            EntityKind::Item => self.item_features.as_ref(),
        }
    }

    pub fn feature_dim(&self, entity: EntityKind) -> Option<usize> {
        self.feature_matrix(entity).map(|m| m.dim)
    }

    /// Features of a real entity by dense id.
    pub fn features(&self, entity: EntityKind, dense: u32) -> Option<&[f64]> {
        self.feature_matrix(entity).and_then(|m| m.get(dense as usize))
    }

    /// Lookup context for an embedder of `entity`.
    pub fn iv_context<'a>(&'a self, model: &'a Model, entity: EntityKind) -> IvContext<'a> {
        let features = match entity {
            EntityKind::User => self.iv_user_features.as_ref(),
            EntityKind::Item => self.iv_item_features.as_ref(),
        };
        IvContext {
            table: model.table(entity),
            features,
        }
    }

    pub fn is_iv(&self, entity: EntityKind, dense: u32) -> bool {
        match entity {
            EntityKind::User => self.split.iv_users[dense as usize],
            EntityKind::Item => self.split.iv_items[dense as usize],
        }
    }

    pub fn row(&self, entity: EntityKind, dense: u32) -> Option<usize> {
        match entity {
            EntityKind::User => self.split.user_row(dense),
            EntityKind::Item => self.split.item_row(dense),
        }
        .map(|r| r as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Fraction of training interactions copied into synthetic OOV samples per epoch.
    pub alpha: f64,
    /// Per-field feature mask probability for synthetic entities.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Uniformity weight for DirectAU.
    pub gamma: f64,
    /// Random share of training interactions held out for validation loss.
    pub validation_fraction: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.2,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerKind::default(),
            seed: 0,
            gamma: 1.0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let unit = |name: &str, v: f64, out: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name} = {v} is outside [0, 1]"));
            }
        };
        unit("alpha", self.alpha, &mut out);
        unit("beta", self.beta, &mut out);
        if !(0.0..1.0).contains(&self.validation_fraction) {
            out.push(format!("validation_fraction = {} is outside [0, 1)", self.validation_fraction));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if self.epochs == 0 {
            out.push("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            out.push(format!("gamma = {} must be non-negative", self.gamma));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                out.push(format!("adam betas ({beta1}, {beta2}) must lie in [0, 1)"));
            }
            if eps.is_nan() || eps <= 0.0 {
                out.push(format!("adam eps = {eps} must be positive"));
            }
        }
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
}

/// Adam moments of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Optimizer accumulators keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub moments: BTreeMap<String, Moments>,
    pub steps: u64,
}

/// Frozen copy of an [`OptimizerState`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot(OptimizerState);

pub fn sgd_step(param: &mut Param, lr: f64) -> Result<()> {
    if param.grad.len() != param.value.len() {
        return Err(Error::Dimension {
            expected: param.value.len(),
            found: param.grad.len(),
        });
    }
    axpy(-lr, &param.grad, &mut param.value);
    Ok(())
}

pub fn adam_step(param: &mut Param, moments: &mut Moments, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    let n = param.value.len();
    if param.grad.len() != n || moments.m.len() != n || moments.v.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: if param.grad.len() != n { param.grad.len() } else { moments.m.len() },
        });
    }
    moments.t += 1;
    let c1 = 1.0 - beta1.powi(moments.t as i32);
    let c2 = 1.0 - beta2.powi(moments.t as i32);
    for k in 0..n {
        let g = param.grad[k];
        moments.m[k] = beta1 * moments.m[k] + (1.0 - beta1) * g;
        moments.v[k] = beta2 * moments.v[k] + (1.0 - beta2) * g * g;
        let m_hat = moments.m[k] / c1;
        let v_hat = moments.v[k] / c2;
        param.value[k] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Applies one update to every parameter from its accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) -> Result<()> {
        for p in params.iter_mut() {
            match self.kind {
                OptimizerKind::Sgd => sgd_step(p, lr)?,
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let n = p.value.len();
                    let moments = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        t: 0,
                    });
                    adam_step(p, moments, lr, beta1, beta2, eps)?;
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn checkpoint(&self) -> OptimizerSnapshot {
        OptimizerSnapshot(self.clone())
    }

    /// Rolls back to `snapshot`, checking its accumulators against `params`.
    pub fn restore(&mut self, snapshot: &OptimizerSnapshot, params: &[&Param]) -> Result<()> {
        let shapes: HashMap<&str, usize> = params.iter().map(|p| (p.name.as_str(), p.len())).collect();
        for (name, m) in &snapshot.0.moments {
            if let Some(&len) = shapes.get(name.as_str()) {
                if m.m.len() != len || m.v.len() != len {
                    return Err(Error::Dimension {
                        expected: len,
                        found: m.m.len(),
                    });
                }
            }
        }
        self.clone_from(&snapshot.0);
        Ok(())
    }
}

/// Which endpoints of a synthetic interaction are rendered as OOV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovType {
    IvUserOovItem,
    OovUserIvItem,
    OovUserOovItem,
}

impl OovType {
    pub const ALL: [OovType; 3] = [OovType::IvUserOovItem, OovType::OovUserIvItem, OovType::OovUserOovItem];

    pub fn oov_user(self) -> bool {
        self != OovType::IvUserOovItem
    }

    pub fn oov_item(self) -> bool {
        self != OovType::OovUserIvItem
    }
}

/// OOV copy of a real training entity.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEntity {
    pub source: u32,
    pub id: u64,
    /// Masked source features; `None` when the entity type has no features.
    pub features: Option<Vec<f64>>,
}

/// Fresh id for the OOV copy of `source` in `epoch`. Real dense ids stay below 2^32.
pub fn synthetic_id(epoch: usize, source: u32) -> u64 {
    (1 << 62) | ((epoch as u64 & 0x3fff_ffff) << 32) | source as u64
}

/// Synthetic entities of one type for one epoch. Each source gets one copy
/// with one mask, drawn the first time it is requested.
#[derive(Debug)]
pub struct SyntheticPool<'a> {
    entity: EntityKind,
    epoch: usize,
    beta: f64,
    features: Option<&'a FeatureMatrix>,
    rng: Rng,
    order: Vec<u32>,
    made: HashMap<u32, SyntheticEntity>,
}

impl<'a> SyntheticPool<'a> {
    pub fn new(data: &'a Dataset, entity: EntityKind, epoch: usize, beta: f64, seed: u64) -> Self {
        Self {
            entity,
            epoch,
            beta,
            features: data.feature_matrix(entity),
            rng: stream_rng(seed, Stream::FeatureMask, ((epoch as u64) << 2) | entity.tag()),
            order: Vec::new(),
            made: HashMap::new(),
        }
    }

    pub fn get(&mut self, source: u32) -> Result<&SyntheticEntity> {
        if !self.made.contains_key(&source) {
            let features = match self.features {
                Some(m) => {
                    let row = m.get(source as usize).ok_or(Error::MissingFeatures(source as u64))?;
                    Some(mask_features(row, &m.bounds, self.beta, &mut self.rng)?)
                }
                None => None,
            };
            let entity = SyntheticEntity {
                source,
                id: synthetic_id(self.epoch, source),
                features,
            };
            self.order.push(source);
            self.made.insert(source, entity);
        }
        Ok(&self.made[&source])
    }

    /// Entities in creation order.
    pub fn entities(&self) -> impl Iterator<Item = &SyntheticEntity> {
        self.order.iter().map(|s| &self.made[s])
    }

    pub fn entity(&self) -> EntityKind {
        self.entity
    }
}

/// One synthetic interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSample {
    pub event: Event,
    pub kind: OovType,
}

#[derive(Debug)]
pub struct SyntheticBatch<'a> {
    pub samples: Vec<SyntheticSample>,
    pub users: SyntheticPool<'a>,
    pub items: SyntheticPool<'a>,
}

impl SyntheticBatch<'_> {
    pub fn type_counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for s in &self.samples {
            out[OovType::ALL.iter().position(|&t| t == s.kind).expect("known type")] += 1;
        }
        out
    }
}

/// Samples `ceil(alpha * |events|)` interactions without replacement and
/// assigns each one of the three OOV types uniformly. Synthetic entities are
/// created for every OOV endpoint, with features masked at rate `beta`.
pub fn make_synthetic_oov<'a>(
    data: &'a Dataset,
    events: &[Event],
    alpha: f64,
    beta: f64,
    epoch: usize,
    seed: u64,
    rng: &mut Rng,
) -> Result<SyntheticBatch<'a>> {
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("alpha = {alpha} and beta = {beta} must lie in [0, 1]")));
    }
    let n = ((alpha * events.len() as f64).ceil() as usize).min(events.len());
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.shuffle(rng);
    let mut batch = SyntheticBatch {
        samples: Vec::with_capacity(n),
        users: SyntheticPool::new(data, EntityKind::User, epoch, beta, seed),
        items: SyntheticPool::new(data, EntityKind::Item, epoch, beta, seed),
    };
    for &i in &order[..n] {
        let kind = OovType::ALL[rng.random_range(0..3)];
        let event = events[i];
        if kind.oov_user() {
            batch.users.get(event.user)?;
        }
        if kind.oov_item() {
            batch.items.get(event.item)?;
        }
        batch.samples.push(SyntheticSample { event, kind });
    }
    Ok(batch)
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    pub samples: usize,
}

/// Positive training items of each user, for negative sampling.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    iv_items: Vec<u32>,
    seen: HashMap<u32, HashSet<u32>>,
}

impl NegativeSampler {
    pub fn new(data: &Dataset, events: &[Event]) -> Self {
        let mut seen: HashMap<u32, HashSet<u32>> = HashMap::new();
        for e in events {
            seen.entry(e.user).or_default().insert(e.item);
        }
        Self {
            iv_items: data.split.iv_item_ids(),
            seen,
        }
    }

    /// A uniformly drawn IV item the user has not interacted with. Falls back
    /// to any IV item after a bounded number of rejections.
    pub fn sample(&self, user: u32, rng: &mut Rng) -> Result<u32> {
        if self.iv_items.is_empty() {
            return Err(Error::EmptyTable);
        }
        let seen = self.seen.get(&user);
        let mut pick = self.iv_items[rng.random_range(0..self.iv_items.len())];
        for _ in 0..64 {
            if !seen.is_some_and(|s| s.contains(&pick)) {
                break;
            }
            pick = self.iv_items[rng.random_range(0..self.iv_items.len())];
        }
        Ok(pick)
    }
}

/// Chunks of at most `size`; a trailing chunk smaller than `min` is merged into the previous one.
fn batches(n: usize, size: usize, min: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < min) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

fn non_finite(what: &str, epoch: usize, batch: usize, params: &[&Param]) -> Error {
    let norms: Vec<String> = params.iter().map(|p| format!("{}={:.4e}", p.name, norm(&p.value))).collect();
    Error::NonFinite {
        what: what.to_string(),
        diagnostics: format!("epoch {epoch}, batch {batch}, parameter norms: {}", norms.join(", ")),
    }
}

/// A rendered endpoint: the vector fed to the loss plus where its gradient goes.
enum Endpoint<'q> {
    /// Row of a trainable IV table.
    Table(usize),
    /// IV table row seen from phase 2; gradients are dropped.
    Frozen(usize),
    /// Output of an OOV embedder.
    Oov(OovQuery<'q>),
}

/// Mutable parts of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainerConfig,
    pub model: Model,
    pub user_embedder: OovEmbedder,
    pub item_embedder: OovEmbedder,
    pub optimizer: OptimizerState,
    /// Epochs completed.
    pub epoch: usize,
}

/// Outcome of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub transductive_loss: f64,
    pub transductive_samples: usize,
    /// `None` when phase 2 had nothing to train.
    pub oov_loss: Option<f64>,
    pub oov_samples: usize,
    pub oov_type_counts: [usize; 3],
}

impl Trainer {
    pub fn new(
        config: TrainerConfig,
        model_kind: ModelKind,
        dim: usize,
        user_config: &EmbedderConfig,
        item_config: &EmbedderConfig,
        data: &Dataset,
    ) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let feature_dims = (
            data.feature_dim(EntityKind::User).unwrap_or(0),
            data.feature_dim(EntityKind::Item).unwrap_or(0),
        );
        let mut rng = stream_rng(config.seed, Stream::Init, 0);
        let model = Model::new(
            model_kind,
            data.split.n_iv_users(),
            data.split.n_iv_items(),
            dim,
            feature_dims,
            &mut rng,
        );
        let user_embedder = OovEmbedder::new(user_config, EntityKind::User, dim, data.feature_dim(EntityKind::User), config.seed)?;
        let item_embedder = OovEmbedder::new(item_config, EntityKind::Item, dim, data.feature_dim(EntityKind::Item), config.seed)?;
        Ok(Self {
            optimizer: OptimizerState::new(config.optimizer),
            config,
            model,
            user_embedder,
            item_embedder,
            epoch: 0,
        })
    }

    /// Splits off the validation slice of the training positives.
    pub fn training_events(&self, data: &Dataset) -> Result<(Vec<Event>, Vec<Event>)> {
        let positives: Vec<Event> = data.split.train.events.iter().filter(|e| e.is_positive()).copied().collect();
        let mut rng = stream_rng(self.config.seed, Stream::Holdout, 0);
        holdout(&positives, self.config.validation_fraction, &mut rng)
    }

    /// Runs every configured epoch and returns the training log.
    pub fn fit(&mut self, data: &Dataset) -> Result<Vec<LogRow>> {
        let (train, validation) = self.training_events(data)?;
        if train.is_empty() {
            return Err(Error::DegenerateSplit("no training interactions".into()));
        }
        let sampler = NegativeSampler::new(data, &data.split.train.events);
        let mut log = Vec::new();
        for _ in 0..self.config.epochs {
            let stats = self.train_epoch_two_phase(data, &train, &sampler)?;
            let epoch = self.epoch;
            log.push(LogRow {
                epoch,
                phase: "transductive".into(),
                loss: stats.transductive_loss,
                samples: stats.transductive_samples,
            });
            if let Some(loss) = stats.oov_loss {
                log.push(LogRow {
                    epoch,
                    phase: "oov".into(),
                    loss,
                    samples: stats.oov_samples,
                });
            }
            if !validation.is_empty() {
                log.push(LogRow {
                    epoch,
                    phase: "validation".into(),
                    loss: self.validation_loss(data, &validation, &sampler)?,
                    samples: validation.len(),
                });
            }
            log::info!(
                "epoch {epoch}: transductive loss {:.5}, oov loss {}",
                stats.transductive_loss,
                stats.oov_loss.map_or("-".into(), |l| format!("{l:.5}"))
            );
        }
        Ok(log)
    }

    pub fn train_epoch_two_phase(&mut self, data: &Dataset, train: &[Event], sampler: &NegativeSampler) -> Result<EpochStats> {
        let epoch = self.epoch + 1;
        let (transductive_loss, transductive_samples) = self.phase_transductive(data, train, sampler, epoch)?;

        let trainable = !self.user_embedder.params().is_empty() || !self.item_embedder.params().is_empty();
        let mut stats = EpochStats {
            transductive_loss,
            transductive_samples,
            oov_loss: None,
            oov_samples: 0,
            oov_type_counts: [0; 3],
        };
        if trainable && self.config.alpha > 0.0 {
            let snapshot = self.optimizer.checkpoint();
            let mut rng = stream_rng(self.config.seed, Stream::OovPhase, epoch as u64);
            let batch = make_synthetic_oov(data, train, self.config.alpha, self.config.beta, epoch, self.config.seed, &mut rng)?;
            stats.oov_samples = batch.samples.len();
            stats.oov_type_counts = batch.type_counts();
            stats.oov_loss = Some(self.phase_oov(data, batch, sampler, epoch, &mut rng)?);
            let Trainer {
                model,
                user_embedder,
                item_embedder,
                optimizer,
                ..
            } = self;
            let mut params = model.params();
            params.extend(user_embedder.params());
            params.extend(item_embedder.params());
            optimizer.restore(&snapshot, &params)?;
        }
        self.epoch = epoch;
        Ok(stats)
    }

    /// Phase 1: base-model updates on real interactions.
    fn phase_transductive(&mut self, data: &Dataset, train: &[Event], sampler: &NegativeSampler, epoch: usize) -> Result<(f64, usize)> {
        let mut rng = stream_rng(self.config.seed, Stream::TransductivePhase, epoch as u64);
        let mut order: Vec<Event> = train.to_vec();
        order.shuffle(&mut rng);
        let min = if self.model.kind == ModelKind::DirectAu { 2 } else { 1 };
        if order.len() < min {
            return Err(Error::DegenerateSplit(format!("{} training interactions", order.len())));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, range) in batches(order.len(), self.config.batch_size, min).into_iter().enumerate() {
            let chunk = &order[range];
            let mut pairs = Vec::with_capacity(chunk.len());
            for e in chunk {
                let user = Endpoint::Table(data.row(EntityKind::User, e.user).ok_or(Error::Index {
                    index: e.user as usize,
                    len: data.split.n_iv_users(),
                })?);
                let item = Endpoint::Table(data.row(EntityKind::Item, e.item).ok_or(Error::Index {
                    index: e.item as usize,
                    len: data.split.n_iv_items(),
                })?);
                let negative = match self.model.kind {
                    ModelKind::DirectAu => None,
                    _ => Some(sampler.sample(e.user, &mut rng)?),
                };
                pairs.push(RenderedPair {
                    user,
                    user_features: data.features(EntityKind::User, e.user),
                    item,
                    item_features: data.features(EntityKind::Item, e.item),
                    negative: negative.map(|n| Endpoint::Table(data.row(EntityKind::Item, n).expect("sampler returns IV items"))),
                    negative_features: negative.and_then(|n| data.features(EntityKind::Item, n)),
                });
            }
            let loss = self.batch_loss_and_grad(data, &pairs, false)?;
            if !loss.is_finite() {
                return Err(non_finite("transductive loss", epoch, b, &self.model.params()));
            }
            let lr = self.config.learning_rate;
            self.optimizer.step(&mut self.model.params_mut(), lr)?;
            self.model.params_mut().into_iter().for_each(Param::zero_grad);
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        Ok((total / count as f64, count))
    }

    /// Phase 2: OOV-embedder updates on synthetic interactions.
    fn phase_oov(&mut self, data: &Dataset, batch: SyntheticBatch<'_>, sampler: &NegativeSampler, epoch: usize, rng: &mut Rng) -> Result<f64> {
        let SyntheticBatch { samples, mut users, mut items } = batch;
        if samples.is_empty() {
            return Ok(0.0);
        }
        self.user_embedder.clear_caches();
        self.item_embedder.clear_caches();
        let min = if self.model.kind == ModelKind::DirectAu { 2 } else { 1 };
        // negatives are drawn up front so every synthetic item exists before borrowing the pools
        let negatives: Vec<Option<u32>> = samples
            .iter()
            .map(|s| match self.model.kind {
                ModelKind::DirectAu => Ok(None),
                _ => {
                    let n = sampler.sample(s.event.user, rng)?;
                    if s.kind.oov_item() {
                        items.get(n)?;
                    }
                    Ok(Some(n))
                }
            })
            .collect::<Result<_>>()?;
        for s in &samples {
            if s.kind.oov_user() {
                users.get(s.event.user)?;
            }
            if s.kind.oov_item() {
                items.get(s.event.item)?;
            }
        }
        let mut total = 0.0;
        for (b, range) in batches(samples.len(), self.config.batch_size, min).into_iter().enumerate() {
            let mut pairs = Vec::with_capacity(range.len());
            for k in range.clone() {
                let s = &samples[k];
                let (user, user_features) = render(data, &users, s.event.user, s.kind.oov_user())?;
                let (item, item_features) = render(data, &items, s.event.item, s.kind.oov_item())?;
                let (negative, negative_features) = match negatives[k] {
                    Some(n) => {
                        let (e, f) = render(data, &items, n, s.kind.oov_item())?;
                        (Some(e), f)
                    }
                    None => (None, None),
                };
                pairs.push(RenderedPair {
                    user,
                    user_features,
                    item,
                    item_features,
                    negative,
                    negative_features,
                });
            }
            let loss = self.batch_loss_and_grad(data, &pairs, true)?;
            if !loss.is_finite() {
                let mut params = self.user_embedder.params();
                params.extend(self.item_embedder.params());
                return Err(non_finite("oov loss", epoch, b, &params));
            }
            assert!(
                self.model.params().iter().all(|p| p.grad_is_zero()),
                "phase-2 gradient reached a base-model parameter"
            );
            let lr = self.config.learning_rate;
            let Trainer {
                optimizer,
                user_embedder,
                item_embedder,
                ..
            } = self;
            let mut params = user_embedder.params_mut();
            params.extend(item_embedder.params_mut());
            optimizer.step(&mut params, lr)?;
            params.into_iter().for_each(Param::zero_grad);
            total += loss * range.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    fn embed(&self, data: &Dataset, entity: EntityKind, endpoint: &Endpoint<'_>) -> Result<Vec<f64>> {
        match endpoint {
            Endpoint::Table(r) | Endpoint::Frozen(r) => Ok(self.model.table(entity).row(*r).to_vec()),
            Endpoint::Oov(q) => {
                let ctx = data.iv_context(&self.model, entity);
                match entity {
                    EntityKind::User => self.user_embedder.embed(q, &ctx),
                    EntityKind::Item => self.item_embedder.embed(q, &ctx),
                }
            }
        }
    }

    fn route(&mut self, entity: EntityKind, endpoint: &Endpoint<'_>, grad: &[f64], scale: f64) -> Result<()> {
        let scaled: Vec<f64> = grad.iter().map(|g| g * scale).collect();
        match endpoint {
            Endpoint::Table(r) => {
                let table = match entity {
                    EntityKind::User => &mut self.model.users,
                    EntityKind::Item => &mut self.model.items,
                };
                axpy(1.0, &scaled, table.param.grad_row_mut(*r));
                Ok(())
            }
            Endpoint::Frozen(_) => Ok(()),
            Endpoint::Oov(q) => match entity {
                EntityKind::User => self.user_embedder.backward(q, &scaled),
                EntityKind::Item => self.item_embedder.backward(q, &scaled),
            },
        }
    }

    /// Mean loss of a batch; gradients of the mean are accumulated into
    /// whichever parameters own each endpoint. In phase 2 the feature maps
    /// of `ctx_lite` are frozen along with the tables.
    fn batch_loss_and_grad(&mut self, data: &Dataset, pairs: &[RenderedPair<'_>], frozen_maps: bool) -> Result<f64> {
        let n = pairs.len() as f64;
        match self.model.kind {
            ModelKind::Bpr => {
                let mut total = 0.0;
                for p in pairs {
                    let u = self.embed(data, EntityKind::User, &p.user)?;
                    let i = self.embed(data, EntityKind::Item, &p.item)?;
                    let neg = p.negative.as_ref().expect("bpr samples a negative");
                    let j = self.embed(data, EntityKind::Item, neg)?;
                    let g = bpr_loss_and_grad(&u, &i, &j)?;
                    total += g.loss;
                    self.route(EntityKind::User, &p.user, &g.user, 1.0 / n)?;
                    self.route(EntityKind::Item, &p.item, &g.positive, 1.0 / n)?;
                    self.route(EntityKind::Item, neg, &g.negative, 1.0 / n)?;
                }
                Ok(total / n)
            }
            ModelKind::DirectAu => {
                let users = pairs.iter().map(|p| self.embed(data, EntityKind::User, &p.user)).collect::<Result<Vec<_>>>()?;
                let items = pairs.iter().map(|p| self.embed(data, EntityKind::Item, &p.item)).collect::<Result<Vec<_>>>()?;
                let g = directau_loss_and_grad(&users, &items, self.config.gamma)?;
                for (k, p) in pairs.iter().enumerate() {
                    self.route(EntityKind::User, &p.user, &g.users[k], 1.0)?;
                    self.route(EntityKind::Item, &p.item, &g.items[k], 1.0)?;
                }
                Ok(g.loss)
            }
            ModelKind::CtxLite => {
                let mut total = 0.0;
                // positives and negatives are averaged together
                let scale = 1.0 / (2.0 * n);
                for p in pairs {
                    let u = self.embed(data, EntityKind::User, &p.user)?;
                    let neg = p.negative.as_ref().expect("ctx_lite samples a negative");
                    for (item, features, label) in [(&p.item, p.item_features, true), (neg, p.negative_features, false)] {
                        let i = self.embed(data, EntityKind::Item, item)?;
                        let ranker = self.model.ctx.as_ref().expect("ctx_lite model has feature maps");
                        let g = ctx_lite_loss_and_grad(ranker, (&u, p.user_features), (&i, features), label)?;
                        total += g.loss;
                        self.route(EntityKind::User, &p.user, &g.user_embedding, scale)?;
                        self.route(EntityKind::Item, item, &g.item_embedding, scale)?;
                        if !frozen_maps {
                            let ctx = self.model.ctx.as_mut().expect("ctx_lite model has feature maps");
                            axpy(scale, &g.user_map, &mut ctx.user_map.grad);
                            axpy(scale, &g.item_map, &mut ctx.item_map.grad);
                        }
                    }
                }
                Ok(total * scale)
            }
        }
    }

    /// Objective on held-out IV interactions with fixed negatives; parameters are not touched.
    pub fn validation_loss(&self, data: &Dataset, events: &[Event], sampler: &NegativeSampler) -> Result<f64> {
        let mut probe = self.clone();
        let mut rng = stream_rng(self.config.seed, Stream::Evaluation, u64::MAX);
        let mut pairs = Vec::with_capacity(events.len());
        for e in events {
            let (Some(u), Some(i)) = (data.row(EntityKind::User, e.user), data.row(EntityKind::Item, e.item)) else {
                continue;
            };
            let negative = match self.model.kind {
                ModelKind::DirectAu => None,
                _ => Some(sampler.sample(e.user, &mut rng)?),
            };
            pairs.push(RenderedPair {
                user: Endpoint::Frozen(u),
                user_features: data.features(EntityKind::User, e.user),
                item: Endpoint::Frozen(i),
                item_features: data.features(EntityKind::Item, e.item),
                negative: negative.map(|n| Endpoint::Frozen(data.row(EntityKind::Item, n).expect("IV item"))),
                negative_features: negative.and_then(|n| data.features(EntityKind::Item, n)),
            });
        }
        if pairs.len() < 2 {
            return Ok(f64::NAN);
        }
        probe.batch_loss_and_grad(data, &pairs, true)
    }
}

/// An endpoint as seen from phase 2: a synthetic entity if `oov`, else its frozen IV row.
fn render<'q>(data: &'q Dataset, pool: &'q SyntheticPool<'_>, dense: u32, oov: bool) -> Result<(Endpoint<'q>, Option<&'q [f64]>)> {
    let entity = pool.entity;
    if oov {
        let s = pool.made.get(&dense).expect("synthetic entity created before rendering");
        let f = s.features.as_deref();
        Ok((Endpoint::Oov(OovQuery::new(s.id, f)), f))
    } else {
        let row = data.row(entity, dense).ok_or(Error::Index {
            index: dense as usize,
            len: data.split.iv_users.len().max(data.split.iv_items.len()),
        })?;
        Ok((Endpoint::Frozen(row), data.features(entity, dense)))
    }
}

struct RenderedPair<'q> {
    user: Endpoint<'q>,
    user_features: Option<&'q [f64]>,
    item: Endpoint<'q>,
    item_features: Option<&'q [f64]>,
    negative: Option<Endpoint<'q>>,
    negative_features: Option<&'q [f64]>,
}

impl fmt::Display for OovType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OovType::IvUserOovItem => "iv_user_oov_item",
            OovType::OovUserIvItem => "oov_user_iv_item",
            OovType::OovUserOovItem => "oov_user_oov_item",
        })
    }
}

/// Everything needed to resume or evaluate a trained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config_hash: String,
    pub split_checksum: String,
    pub epoch: usize,
    pub model_kind: ModelKind,
    pub user_embedder_kind: EmbedderKind,
    pub item_embedder_kind: EmbedderKind,
    pub model: Vec<Param>,
    pub user_embedder: Vec<Param>,
    pub item_embedder: Vec<Param>,
    pub optimizer: OptimizerState,
}

impl Trainer {
    pub fn to_checkpoint(&self, config_hash: &str, split_checksum: &str) -> Checkpoint {
        // gradients are not persisted
        let owned = |ps: Vec<&Param>| {
            ps.into_iter()
                .map(|p| Param {
                    grad: Vec::new(),
                    ..p.clone()
                })
                .collect()
        };
        Checkpoint {
            config_hash: config_hash.to_owned(),
            split_checksum: split_checksum.to_owned(),
            epoch: self.epoch,
            model_kind: self.model.kind,
            user_embedder_kind: self.user_embedder.kind(),
            item_embedder_kind: self.item_embedder.kind(),
            model: owned(self.model.params()),
            user_embedder: owned(self.user_embedder.params()),
            item_embedder: owned(self.item_embedder.params()),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Loads parameters and optimizer state into a trainer built from the same configuration.
    pub fn restore_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let expected = (self.model.kind, self.user_embedder.kind(), self.item_embedder.kind());
        let found = (ckpt.model_kind, ckpt.user_embedder_kind, ckpt.item_embedder_kind);
        if expected != found {
            return Err(Error::Config(format!(
                "checkpoint was trained as {}/{}/{}, configuration asks for {}/{}/{}",
                found.0, found.1, found.2, expected.0, expected.1, expected.2
            )));
        }
        let mut model = self.model.params_mut();
        if model.len() != ckpt.model.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} model parameters, expected {}",
                ckpt.model.len(),
                model.len()
            )));
        }
        for (p, s) in model.iter_mut().zip(&ckpt.model) {
            if p.name != s.name || p.rows != s.rows || p.cols != s.cols {
                return Err(Error::Config(format!("checkpoint parameter `{}` does not match `{}`", s.name, p.name)));
            }
            p.value.clone_from(&s.value);
            p.ensure_grad();
        }
        self.user_embedder.load_params(&ckpt.user_embedder)?;
        self.item_embedder.load_params(&ckpt.item_embedder)?;
        self.user_embedder.clear_caches();
        self.item_embedder.clear_caches();
        self.optimizer = ckpt.optimizer.clone();
        self.epoch = ckpt.epoch;
        Ok(())
    }
}

/// Features for an embedder query, zero-filled when the entity has none.
pub fn query_features<'a>(data: &'a Dataset, entity: EntityKind, dense: u32) -> Option<Cow<'a, [f64]>> {
    let dim = data.feature_dim(entity)?;
    Some(match data.features(entity, dense) {
        Some(f) => Cow::Borrowed(f),
        None => Cow::Owned(vec![0.0; dim]),
    })
}

/// True if every value of every parameter is finite.
pub fn params_finite(params: &[&Param]) -> bool {
    params.iter().all(|p| all_finite(&p.value))
}
