//! Time-based inductive splitting and k-core filtering.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Event, InteractionLog};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Earliest timestamp per user and per item; `None` for ids with no events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirstAppearance {
    pub users: Vec<Option<i64>>,
    pub items: Vec<Option<i64>>,
}

impl FirstAppearance {
    fn all_times(&self) -> impl Iterator<Item = i64> + '_ {
        self.users.iter().chain(&self.items).filter_map(|t| *t)
    }
}

pub fn first_appearance(log: &InteractionLog) -> FirstAppearance {
    let mut users = vec![None; log.n_users()];
    let mut items = vec![None; log.n_items()];
    fn lower(slot: &mut Option<i64>, t: i64) {
        *slot = Some(slot.map_or(t, |s: i64| s.min(t)));
    }
    for e in &log.events {
        lower(&mut users[e.user as usize], e.timestamp);
        lower(&mut items[e.item as usize], e.timestamp);
    }
    FirstAppearance { users, items }
}

/// Picks the observed first-appearance timestamp `t` whose count of entities
/// first seen strictly before `t` is closest to `(1 - oov_ratio)` of all entities.
/// Ties go to the smaller `t`.
pub fn choose_split_time(log: &InteractionLog, oov_ratio: f64) -> Result<i64> {
    if !(oov_ratio > 0.0 && oov_ratio < 1.0) {
        return Err(Error::Config(format!("oov ratio {oov_ratio} outside (0, 1)")));
    }
    if log.is_empty() {
        return Err(Error::DegenerateSplit("interaction log is empty".into()));
    }
    let times: Vec<i64> = first_appearance(log).all_times().collect();
    split_time_from_first_times(&times, oov_ratio)
}

/// The search behind [`choose_split_time`], over raw first-appearance times.
pub fn split_time_from_first_times(times: &[i64], oov_ratio: f64) -> Result<i64> {
    let mut times = times.to_vec();
    times.sort_unstable();
    let target = (1.0 - oov_ratio) * times.len() as f64;

    let mut candidates = times.clone();
    candidates.dedup();
    if candidates.len() < 2 {
        return Err(Error::DegenerateSplit(
            "every user and item first appears at the same timestamp".into(),
        ));
    }
    let mut best = (candidates[0], f64::INFINITY);
    for &t in &candidates {
        let before = times.partition_point(|&x| x < t) as f64;
        let gap = (before - target).abs();
        if gap < best.1 {
            best = (t, gap);
        }
    }
    Ok(best.0)
}

/// Which side of the split each endpoint of an evaluation event falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    IvUserIvItem,
    IvUserOovItem,
    OovUserIvItem,
    OovUserOovItem,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::IvUserIvItem,
        Partition::IvUserOovItem,
        Partition::OovUserIvItem,
        Partition::OovUserOovItem,
    ];

    pub fn classify(user_iv: bool, item_iv: bool) -> Self {
        match (user_iv, item_iv) {
            (true, true) => Partition::IvUserIvItem,
            (true, false) => Partition::IvUserOovItem,
            (false, true) => Partition::OovUserIvItem,
            (false, false) => Partition::OovUserOovItem,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Partition::IvUserIvItem => "iv_user_iv_item",
            Partition::IvUserOovItem => "iv_user_oov_item",
            Partition::OovUserIvItem => "oov_user_iv_item",
            Partition::OovUserOovItem => "oov_user_oov_item",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Output of [`apply_split`].
#[derive(Debug, Clone, PartialEq)]
pub struct InductiveSplit {
    pub split_time: i64,
    /// Indexed by dense user id.
    pub iv_users: Vec<bool>,
    pub iv_items: Vec<bool>,
    /// Row of each IV user/item in its embedding table.
    user_rows: Vec<Option<u32>>,
    item_rows: Vec<Option<u32>>,
    pub train: InteractionLog,
    eval: [InteractionLog; 4],
}

impl InductiveSplit {
    pub fn eval(&self, partition: Partition) -> &InteractionLog {
        &self.eval[partition.index()]
    }

    /// Every event at or after the split time, in partition order.
    pub fn eval_events(&self) -> impl Iterator<Item = (Partition, &Event)> {
        Partition::ALL
            .into_iter()
            .flat_map(move |p| self.eval(p).events.iter().map(move |e| (p, e)))
    }

    pub fn n_iv_users(&self) -> usize {
        self.iv_users.iter().filter(|&&b| b).count()
    }

    pub fn n_iv_items(&self) -> usize {
        self.iv_items.iter().filter(|&&b| b).count()
    }

    pub fn user_row(&self, user: u32) -> Option<u32> {
        self.user_rows[user as usize]
    }

    pub fn item_row(&self, item: u32) -> Option<u32> {
        self.item_rows[item as usize]
    }

    /// Dense ids of IV users in table-row order.
    pub fn iv_user_ids(&self) -> Vec<u32> {
        iv_ids(&self.iv_users)
    }

    pub fn iv_item_ids(&self) -> Vec<u32> {
        iv_ids(&self.iv_items)
    }

    pub fn partition_counts(&self) -> PartitionCounts {
        PartitionCounts {
            train: self.train.len(),
            iv_user_iv_item: self.eval(Partition::IvUserIvItem).len(),
            iv_user_oov_item: self.eval(Partition::IvUserOovItem).len(),
            oov_user_iv_item: self.eval(Partition::OovUserIvItem).len(),
            oov_user_oov_item: self.eval(Partition::OovUserOovItem).len(),
        }
    }

    /// Replaces the training events, e.g. after carving out a validation slice.
    pub fn with_train(&self, train: Vec<Event>) -> Self {
        Self {
            train: self.train.with_events(train),
            ..self.clone()
        }
    }
}

fn iv_ids(mask: &[bool]) -> Vec<u32> {
    mask.iter()
        .enumerate()
        .filter(|(_, &iv)| iv)
        .map(|(i, _)| i as u32)
        .collect()
}

fn rows_for(mask: &[bool]) -> Vec<Option<u32>> {
    let mut next = 0u32;
    mask.iter()
        .map(|&iv| {
            iv.then(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// Entities first seen before `t` are in-vocabulary; events before `t` train,
/// the rest are partitioned by the vocabulary status of their endpoints.
pub fn apply_split(log: &InteractionLog, t: i64) -> InductiveSplit {
    let first = first_appearance(log);
    let before = |slot: &Option<i64>| slot.is_some_and(|s| s < t);
    let iv_users: Vec<bool> = first.users.iter().map(before).collect();
    let iv_items: Vec<bool> = first.items.iter().map(before).collect();

    let mut train = Vec::new();
    let mut eval: [Vec<Event>; 4] = Default::default();
    for e in &log.events {
        let (u_iv, i_iv) = (iv_users[e.user as usize], iv_items[e.item as usize]);
        if e.timestamp < t {
            if u_iv && i_iv {
                train.push(*e);
            }
        } else {
            eval[Partition::classify(u_iv, i_iv).index()].push(*e);
        }
    }
    InductiveSplit {
        split_time: t,
        user_rows: rows_for(&iv_users),
        item_rows: rows_for(&iv_items),
        iv_users,
        iv_items,
        train: log.with_events(train),
        eval: eval.map(|events| log.with_events(events)),
    }
}

/// Repeatedly drops users and items with fewer than `k` events until none remain.
pub fn k_core_filter(log: &InteractionLog, k: usize) -> InteractionLog {
    let mut events = log.events.clone();
    loop {
        let mut user_deg: HashMap<u32, usize> = HashMap::new();
        let mut item_deg: HashMap<u32, usize> = HashMap::new();
        for e in &events {
            *user_deg.entry(e.user).or_default() += 1;
            *item_deg.entry(e.item).or_default() += 1;
        }
        let before = events.len();
        events.retain(|e| user_deg[&e.user] >= k && item_deg[&e.item] >= k);
        if events.len() == before {
            return log.with_events(events);
        }
    }
}

/// Randomly moves `fraction` of the training events into a validation set.
/// Both outputs keep the original event order.
pub fn holdout(events: &[Event], fraction: f64, rng: &mut Rng) -> Result<(Vec<Event>, Vec<Event>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
    }
    let n_held = (fraction * events.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.shuffle(rng);
    let mut held = vec![false; events.len()];
    for &i in &order[..n_held] {
        held[i] = true;
    }
    let (mut keep, mut val) = (Vec::new(), Vec::new());
    for (e, h) in events.iter().zip(held) {
        if h {
            val.push(*e)
        } else {
            keep.push(*e)
        }
    }
    Ok((keep, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub train: usize,
    pub iv_user_iv_item: usize,
    pub iv_user_oov_item: usize,
    pub oov_user_iv_item: usize,
    pub oov_user_oov_item: usize,
}

/// JSON record of a split, so later runs can verify they see the same one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub split_time: i64,
    pub oov_ratio_target: f64,
    pub k_core: usize,
    pub source_checksum: String,
    pub filtered_checksum: String,
    pub n_users: usize,
    pub n_items: usize,
    pub iv_users: Vec<String>,
    pub iv_items: Vec<String>,
    pub oov_user_fraction: f64,
    pub oov_item_fraction: f64,
    pub oov_fraction: f64,
    pub counts: PartitionCounts,
}

impl SplitManifest {
    pub fn new(source: &InteractionLog, filtered: &InteractionLog, split: &InductiveSplit, oov_ratio: f64, k_core: usize) -> Self {
        let first = first_appearance(filtered);
        let active_users = first.users.iter().filter(|t| t.is_some()).count();
        let active_items = first.items.iter().filter(|t| t.is_some()).count();
        let iv_users = split.iv_user_ids();
        let iv_items = split.iv_item_ids();
        let frac = |iv: usize, active: usize| {
            if active == 0 {
                0.0
            } else {
                1.0 - iv as f64 / active as f64
            }
        };
        Self {
            split_time: split.split_time,
            oov_ratio_target: oov_ratio,
            k_core,
            source_checksum: source.checksum(),
            filtered_checksum: filtered.checksum(),
            n_users: active_users,
            n_items: active_items,
            oov_user_fraction: frac(iv_users.len(), active_users),
            oov_item_fraction: frac(iv_items.len(), active_items),
            oov_fraction: frac(iv_users.len() + iv_items.len(), active_users + active_items),
            iv_users: iv_users.iter().map(|&u| filtered.ids.user_name(u).to_owned()).collect(),
            iv_items: iv_items.iter().map(|&i| filtered.ids.item_name(i).to_owned()).collect(),
            counts: split.partition_counts(),
        }
    }

    pub fn n_iv(&self) -> usize {
        self.iv_users.len() + self.iv_items.len()
    }
}
