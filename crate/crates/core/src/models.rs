//! Base recommendation models with hand-written gradients.
//!
//! Matrix factorization is scored by a dot product and trained with BPR or
//! DirectAU; `ctx_lite` is a minimal two-tower ranker whose towers add a
//! linear map of the entity's features to its id embedding.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embedders::{EmbeddingTable, EntityKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{all_finite, axpy, dot, norm, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bpr,
    #[serde(rename = "directau")]
    DirectAu,
    CtxLite,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Bpr, ModelKind::DirectAu, ModelKind::CtxLite];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bpr => "bpr",
            ModelKind::DirectAu => "directau",
            ModelKind::CtxLite => "ctx_lite",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_finite(what: &str, vectors: &[&[f64]]) -> Result<()> {
    if vectors.iter().all(|v| all_finite(v)) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: format!("{what} input"),
            diagnostics: "embedding contains NaN or infinity".into(),
        })
    }
}

fn check_dims(expected: usize, vectors: &[&[f64]]) -> Result<()> {
    match vectors.iter().find(|v| v.len() != expected) {
        Some(v) => Err(Error::Dimension {
            expected,
            found: v.len(),
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprGrad {
    pub loss: f64,
    pub user: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// `-log sigmoid(u.i - u.i')` and its gradients.
pub fn bpr_loss_and_grad(user: &[f64], positive: &[f64], negative: &[f64]) -> Result<BprGrad> {
    check_dims(user.len(), &[positive, negative])?;
    check_finite("bpr", &[user, positive, negative])?;
    let margin = dot(user, positive) - dot(user, negative);
    let loss = softplus(-margin);
    let coeff = -sigmoid(-margin); // d loss / d margin
    let user_grad = positive.iter().zip(negative).map(|(p, n)| coeff * (p - n)).collect();
    Ok(BprGrad {
        loss,
        user: user_grad,
        positive: user.iter().map(|u| coeff * u).collect(),
        negative: user.iter().map(|u| -coeff * u).collect(),
    })
}

const NORMALIZE_EPS: f64 = 1e-12;

fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(x).max(NORMALIZE_EPS);
    (x.iter().map(|v| v / n).collect(), n)
}

/// Pulls a gradient taken at `x / ||x||` back to `x`.
fn normalize_backward(unit: &[f64], scale: f64, grad_unit: &[f64]) -> Vec<f64> {
    if scale <= NORMALIZE_EPS {
        return grad_unit.iter().map(|g| g / NORMALIZE_EPS).collect();
    }
    let proj = dot(unit, grad_unit);
    grad_unit
        .iter()
        .zip(unit)
        .map(|(g, u)| (g - u * proj) / scale)
        .collect()
}

/// `log mean_{a<b} exp(-2 ||x_a - x_b||^2)` and its gradient per point.
fn uniformity(points: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = points.len();
    let d = points[0].len();
    let mut weights = vec![0.0; n * n];
    let mut total = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            let dist2: f64 = points[a].iter().zip(&points[b]).map(|(x, y)| (x - y).powi(2)).sum();
            let w = (-2.0 * dist2).exp();
            weights[a * n + b] = w;
            weights[b * n + a] = w;
            total += w;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let value = (total / pairs).ln();
    let mut grads = vec![vec![0.0; d]; n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let coeff = -4.0 * weights[a * n + b] / total;
            for k in 0..d {
                grads[a][k] += coeff * (points[a][k] - points[b][k]);
            }
        }
    }
    (value, grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectAuGrad {
    pub loss: f64,
    pub alignment: f64,
    pub user_uniformity: f64,
    pub item_uniformity: f64,
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
}

/// Alignment plus `gamma`-weighted uniformity over a batch of positive pairs,
/// computed on L2-normalized embeddings.
pub fn directau_loss_and_grad(users: &[Vec<f64>], items: &[Vec<f64>], gamma: f64) -> Result<DirectAuGrad> {
    let batch = users.len();
    if batch < 2 || items.len() != batch {
        return Err(Error::UndefinedMetric(format!(
            "directau needs at least two aligned pairs, got {} users and {} items",
            batch,
            items.len()
        )));
    }
    let dim = users[0].len();
    for v in users.iter().chain(items) {
        check_dims(dim, &[v])?;
        check_finite("directau", &[v])?;
    }
    let (nu, su): (Vec<_>, Vec<_>) = users.iter().map(|u| l2_normalize(u)).unzip();
    let (ni, si): (Vec<_>, Vec<_>) = items.iter().map(|i| l2_normalize(i)).unzip();

    let mut alignment = 0.0;
    let mut g_nu = vec![vec![0.0; dim]; batch];
    let mut g_ni = vec![vec![0.0; dim]; batch];
    for b in 0..batch {
        for k in 0..dim {
            let diff = nu[b][k] - ni[b][k];
            alignment += diff * diff;
            g_nu[b][k] += 2.0 * diff / batch as f64;
            g_ni[b][k] -= 2.0 * diff / batch as f64;
        }
    }
    alignment /= batch as f64;

    let (user_uniformity, gu) = uniformity(&nu);
    let (item_uniformity, gi) = uniformity(&ni);
    for b in 0..batch {
        axpy(gamma / 2.0, &gu[b], &mut g_nu[b]);
        axpy(gamma / 2.0, &gi[b], &mut g_ni[b]);
    }
    let loss = alignment + gamma * (user_uniformity + item_uniformity) / 2.0;
    Ok(DirectAuGrad {
        loss,
        alignment,
        user_uniformity,
        item_uniformity,
        users: (0..batch).map(|b| normalize_backward(&nu[b], su[b], &g_nu[b])).collect(),
        items: (0..batch).map(|b| normalize_backward(&ni[b], si[b], &g_ni[b])).collect(),
    })
}

/// Feature maps of the two-tower ranker; tower output = id embedding + W . features.
#[derive(Debug, Clone, PartialEq)]
pub struct CtxLiteRanker {
    /// `d x d_feat(user)`
    pub user_map: Param,
    /// `d x d_feat(item)`
    pub item_map: Param,
}

impl CtxLiteRanker {
    pub fn zeros(dim: usize, user_features: usize, item_features: usize) -> Self {
        Self {
            user_map: Param::zeros("user_feature_map", dim, user_features),
            item_map: Param::zeros("item_feature_map", dim, item_features),
        }
    }

    pub fn map(&self, entity: EntityKind) -> &Param {
        match entity {
            EntityKind::User => &self.user_map,
            EntityKind::Item => &self.item_map,
        }
    }

    /// Tower output. Missing features count as a zero vector.
    pub fn tower(&self, entity: EntityKind, embedding: &[f64], features: Option<&[f64]>) -> Vec<f64> {
        let map = self.map(entity);
        let mut out = embedding.to_vec();
        if let Some(f) = features.filter(|f| f.len() == map.cols && map.cols > 0) {
            for (r, o) in out.iter_mut().enumerate() {
                *o += dot(map.row(r), f);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtxLiteGrad {
    pub loss: f64,
    pub user_embedding: Vec<f64>,
    pub item_embedding: Vec<f64>,
    /// Flattened like `CtxLiteRanker::user_map`.
    pub user_map: Vec<f64>,
    pub item_map: Vec<f64>,
}

/// Binary cross-entropy on the tower dot product.
pub fn ctx_lite_loss_and_grad(
    ranker: &CtxLiteRanker,
    user: (&[f64], Option<&[f64]>),
    item: (&[f64], Option<&[f64]>),
    label: bool,
) -> Result<CtxLiteGrad> {
    check_dims(user.0.len(), &[item.0])?;
    check_finite("ctx_lite", &[user.0, item.0])?;
    let tu = ranker.tower(EntityKind::User, user.0, user.1);
    let ti = ranker.tower(EntityKind::Item, item.0, item.1);
    let score = dot(&tu, &ti);
    let y = if label { 1.0 } else { 0.0 };
    let loss = softplus(score) - y * score;
    let coeff = sigmoid(score) - y;
    let g_tu: Vec<f64> = ti.iter().map(|v| coeff * v).collect();
    let g_ti: Vec<f64> = tu.iter().map(|v| coeff * v).collect();
    let outer = |g: &[f64], features: Option<&[f64]>, map: &Param| {
        let mut out = vec![0.0; map.len()];
        if let Some(f) = features.filter(|f| f.len() == map.cols && map.cols > 0) {
            for (r, gr) in g.iter().enumerate() {
                axpy(*gr, f, &mut out[r * map.cols..(r + 1) * map.cols]);
            }
        }
        out
    };
    Ok(CtxLiteGrad {
        loss,
        user_map: outer(&g_tu, user.1, &ranker.user_map),
        item_map: outer(&g_ti, item.1, &ranker.item_map),
        user_embedding: g_tu,
        item_embedding: g_ti,
    })
}

/// In-vocabulary parameters of a base model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub users: EmbeddingTable,
    pub items: EmbeddingTable,
    /// Present only for `ctx_lite`.
    pub ctx: Option<CtxLiteRanker>,
}

impl Model {
    pub fn new(kind: ModelKind, n_users: usize, n_items: usize, dim: usize, feature_dims: (usize, usize), rng: &mut Rng) -> Self {
        let users = EmbeddingTable::random(EntityKind::User, n_users, dim, rng);
        let items = EmbeddingTable::random(EntityKind::Item, n_items, dim, rng);
        let ctx = (kind == ModelKind::CtxLite).then(|| CtxLiteRanker::zeros(dim, feature_dims.0, feature_dims.1));
        Self { kind, users, items, ctx }
    }

    pub fn dim(&self) -> usize {
        self.users.dim()
    }

    pub fn table(&self, entity: EntityKind) -> &EmbeddingTable {
        match entity {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.users.param, &self.items.param];
        if let Some(ctx) = &self.ctx {
            out.push(&ctx.user_map);
            out.push(&ctx.item_map);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.users.param, &mut self.items.param];
        if let Some(ctx) = &mut self.ctx {
            out.push(&mut ctx.user_map);
            out.push(&mut ctx.item_map);
        }
        out
    }

    /// The vector scored by dot product: the embedding itself for MF, the tower output for `ctx_lite`.
    pub fn represent(&self, entity: EntityKind, embedding: &[f64], features: Option<&[f64]>) -> Vec<f64> {
        match &self.ctx {
            Some(ctx) => ctx.tower(entity, embedding, features),
            None => embedding.to_vec(),
        }
    }
}

/// Ranks candidate items by descending score, breaking ties uniformly at
/// random, and returns at most `k` of them. Excluded items never appear.
pub fn recommend_topk(scores: &[f64], k: usize, exclude: impl Fn(u32) -> bool, rng: &mut Rng) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut candidates: Vec<u32> = (0..scores.len() as u32).filter(|&i| !exclude(i)).collect();
    candidates.shuffle(rng);
    // stable sort keeps the shuffled order inside equal-score groups
    candidates.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a as usize], scores[b as usize]);
        // `==` first so that 0.0 and -0.0 tie
        if sa == sb {
            std::cmp::Ordering::Equal
        } else {
            sb.total_cmp(&sa)
        }
    });
    candidates.truncate(k);
    Ok(candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng as _;
    use std::collections::HashSet;

    const H: f64 = 1e-5;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = norm(a) + norm(b);
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    fn rand_vec(rng: &mut Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central differences of `f` around `x`.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut up = x.to_vec();
                up[k] += H;
                let mut down = x.to_vec();
                down[k] -= H;
                (f(&up) - f(&down)) / (2.0 * H)
            })
            .collect()
    }

    #[test]
    fn bpr_at_equal_scores_is_ln2() {
        let g = bpr_loss_and_grad(&[1.0, 0.0], &[0.5, 0.5], &[0.5, -0.5]).unwrap();
        assert!((g.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bpr_saturates() {
        let g = bpr_loss_and_grad(&[1.0], &[10.0], &[-10.0]).unwrap();
        assert!(g.loss <= 1e-8);
    }

    #[test]
    fn bpr_rejects_non_finite() {
        assert!(matches!(
            bpr_loss_and_grad(&[f64::NAN], &[1.0], &[1.0]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn bpr_gradients_match_finite_differences() {
        let mut rng = stream_rng(1, Stream::Init, 0);
        for _ in 0..100 {
            let (u, i, n) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
            let g = bpr_loss_and_grad(&u, &i, &n).unwrap();
            let loss = |u: &[f64], i: &[f64], n: &[f64]| bpr_loss_and_grad(u, i, n).unwrap().loss;
            assert!(rel_err(&g.user, &numeric_grad(&u, |x| loss(x, &i, &n))) < 1e-5);
            assert!(rel_err(&g.positive, &numeric_grad(&i, |x| loss(&u, x, &n))) < 1e-5);
            assert!(rel_err(&g.negative, &numeric_grad(&n, |x| loss(&u, &i, x))) < 1e-5);
        }
    }

    #[test]
    fn directau_alignment_zero_for_coincident_pairs() {
        let users = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let items = vec![vec![3.0, 0.0], vec![0.0, 0.5]];
        let g = directau_loss_and_grad(&users, &items, 1.0).unwrap();
        assert!(g.alignment.abs() < 1e-15);
    }

    #[test]
    fn directau_antipodal_users() {
        let users = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let items = vec![vec![0.0, 1.0], vec![0.0, -1.0]];
        let g = directau_loss_and_grad(&users, &items, 1.0).unwrap();
        assert!((g.user_uniformity - (-8.0)).abs() < 1e-12);
    }

    #[test]
    fn directau_needs_two_pairs() {
        assert!(directau_loss_and_grad(&[vec![1.0]], &[vec![1.0]], 1.0).is_err());
    }

    #[test]
    fn directau_gradients_match_finite_differences() {
        let mut rng = stream_rng(2, Stream::Init, 0);
        for _ in 0..100 {
            let users: Vec<Vec<f64>> = (0..8).map(|_| rand_vec(&mut rng, 4)).collect();
            let items: Vec<Vec<f64>> = (0..8).map(|_| rand_vec(&mut rng, 4)).collect();
            let gamma = rng.random_range(0.1..2.0);
            let g = directau_loss_and_grad(&users, &items, gamma).unwrap();
            let analytic: Vec<f64> = g.users.concat().into_iter().chain(g.items.concat()).collect();
            let flat: Vec<f64> = users.concat().into_iter().chain(items.concat()).collect();
            let numeric = numeric_grad(&flat, |x| {
                let u: Vec<Vec<f64>> = x[..32].chunks(4).map(<[f64]>::to_vec).collect();
                let i: Vec<Vec<f64>> = x[32..].chunks(4).map(<[f64]>::to_vec).collect();
                directau_loss_and_grad(&u, &i, gamma).unwrap().loss
            });
            let err = rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn directau_alignment_is_rotation_invariant() {
        let mut rng = stream_rng(3, Stream::Init, 0);
        let users: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, 3)).collect();
        let items: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, 3)).collect();
        // random orthogonal matrix via Gram-Schmidt
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < 3 {
            let mut v = rand_vec(&mut rng, 3);
            for b in &q {
                let p = dot(&v, b);
                axpy(-p, b, &mut v);
            }
            let n = norm(&v);
            q.push(v.iter().map(|x| x / n).collect());
        }
        let rotate = |v: &Vec<f64>| -> Vec<f64> { q.iter().map(|row| dot(row, v)).collect() };
        let before = directau_loss_and_grad(&users, &items, 1.0).unwrap();
        let after = directau_loss_and_grad(
            &users.iter().map(rotate).collect::<Vec<_>>(),
            &items.iter().map(rotate).collect::<Vec<_>>(),
            1.0,
        )
        .unwrap();
        assert!((before.alignment - after.alignment).abs() < 1e-9);
    }

    #[test]
    fn ctx_lite_basics() {
        let ranker = CtxLiteRanker::zeros(2, 3, 3);
        let g = ctx_lite_loss_and_grad(&ranker, (&[0.0, 0.0], None), (&[1.0, 1.0], None), true).unwrap();
        assert!((g.loss - std::f64::consts::LN_2).abs() < 1e-15);
        // zero maps reduce to the plain id dot product
        let f = [1.0, 2.0, 3.0];
        let u = [0.5, -0.2];
        assert_eq!(ranker.tower(EntityKind::User, &u, Some(&f)), u.to_vec());
    }

    #[test]
    fn ctx_lite_gradients_match_finite_differences() {
        let mut rng = stream_rng(4, Stream::Init, 0);
        for _ in 0..100 {
            let (d, fu, fi) = (4, 3, 5);
            let mut ranker = CtxLiteRanker::zeros(d, fu, fi);
            ranker.user_map.value = rand_vec(&mut rng, d * fu);
            ranker.item_map.value = rand_vec(&mut rng, d * fi);
            let (eu, ei) = (rand_vec(&mut rng, d), rand_vec(&mut rng, d));
            let (xu, xi) = (rand_vec(&mut rng, fu), rand_vec(&mut rng, fi));
            let label = rng.random_bool(0.5);
            let g = ctx_lite_loss_and_grad(&ranker, (&eu, Some(&xu)), (&ei, Some(&xi)), label).unwrap();
            let loss = |r: &CtxLiteRanker, eu: &[f64], ei: &[f64]| {
                ctx_lite_loss_and_grad(r, (eu, Some(&xu)), (ei, Some(&xi)), label).unwrap().loss
            };
            let n_eu = numeric_grad(&eu, |x| loss(&ranker, x, &ei));
            let n_ei = numeric_grad(&ei, |x| loss(&ranker, &eu, x));
            let n_wu = numeric_grad(&ranker.user_map.value, |x| {
                let mut r = ranker.clone();
                r.user_map.value = x.to_vec();
                loss(&r, &eu, &ei)
            });
            let n_wi = numeric_grad(&ranker.item_map.value, |x| {
                let mut r = ranker.clone();
                r.item_map.value = x.to_vec();
                loss(&r, &eu, &ei)
            });
            let analytic = [g.user_embedding, g.item_embedding, g.user_map, g.item_map].concat();
            let numeric = [n_eu, n_ei, n_wu, n_wi].concat();
            assert!(rel_err(&analytic, &numeric) < 1e-4);
        }
    }

    #[test]
    fn ctx_lite_with_zero_maps_ranks_like_mf() {
        let mut rng = stream_rng(5, Stream::Init, 0);
        let mf = Model::new(ModelKind::Bpr, 3, 10, 4, (0, 0), &mut rng);
        let mut ctx = mf.clone();
        ctx.kind = ModelKind::CtxLite;
        ctx.ctx = Some(CtxLiteRanker::zeros(4, 2, 2));
        let feats = [0.3, 0.4];
        for u in 0..3 {
            let score = |m: &Model| -> Vec<f64> {
                let tu = m.represent(EntityKind::User, m.users.row(u), Some(&feats));
                (0..10).map(|i| dot(&tu, &m.represent(EntityKind::Item, m.items.row(i), Some(&feats)))).collect()
            };
            let a = recommend_topk(&score(&mf), 10, |_| false, &mut stream_rng(0, Stream::Ranking, u as u64)).unwrap();
            let b = recommend_topk(&score(&ctx), 10, |_| false, &mut stream_rng(0, Stream::Ranking, u as u64)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn topk_sorts_by_score() {
        let mut rng = stream_rng(0, Stream::Ranking, 0);
        assert_eq!(recommend_topk(&[5.0, 1.0, 9.0], 3, |_| false, &mut rng).unwrap(), vec![2, 0, 1]);
        assert_eq!(recommend_topk(&[5.0, 1.0, 9.0], 10, |_| false, &mut rng).unwrap().len(), 3);
        assert!(recommend_topk(&[1.0], 0, |_| false, &mut rng).is_err());
    }

    #[test]
    fn ties_are_broken_uniformly() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = stream_rng(7, Stream::Ranking, 0);
        let mut first = [0usize; 4];
        for _ in 0..10_000 {
            first[recommend_topk(&[0.0; 4], 1, |_| false, &mut rng).unwrap()[0] as usize] += 1;
        }
        for c in first {
            assert!((c as i64 - 2500).abs() <= 150, "{first:?}");
        }
        let stat: f64 = first.iter().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
        assert!(stat < ChiSquared::new(3.0).unwrap().inverse_cdf(0.99));
    }

    #[test]
    fn zero_user_embedding_gives_uniform_first_item() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = stream_rng(8, Stream::Ranking, 0);
        let items: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 4)).collect();
        let zero = crate::embedders::embed_zero(4);
        let scores: Vec<f64> = items.iter().map(|i| dot(&zero, i)).collect();
        let mut first = [0usize; 5];
        for _ in 0..5000 {
            first[recommend_topk(&scores, 1, |_| false, &mut rng).unwrap()[0] as usize] += 1;
        }
        let stat: f64 = first.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        assert!(stat < ChiSquared::new(4.0).unwrap().inverse_cdf(0.99));
    }

    #[test]
    fn excluded_items_never_returned() {
        let mut rng = stream_rng(9, Stream::Ranking, 0);
        let scores: Vec<f64> = (0..20).map(|i| (i % 3) as f64).collect();
        for _ in 0..1000 {
            let out = recommend_topk(&scores, 20, |i| i == 5, &mut rng).unwrap();
            assert!(!out.contains(&5));
            assert_eq!(out.len(), 19);
            assert_eq!(out.iter().collect::<HashSet<_>>().len(), 19);
        }
    }
}
