//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use oov_core::embedders::{random_features, EmbedderConfig, EmbedderKind, EmbeddingTable, EntityKind, IvContext, MicroMlp, OovEmbedder, OovQuery};
use oov_core::eval::{auroc, ndcg_at_k, run_experiment, EvalConfig, ExperimentConfig, ModelConfig, Subset};
use oov_core::hashing::{bucket_of, lsh_code, RandomProjection};
use oov_core::models::{bpr_loss_and_grad, ctx_lite_loss_and_grad, directau_loss_and_grad, CtxLiteRanker, ModelKind};
use oov_core::rng::{stream_rng, Rng, Stream};
use oov_core::toy::{generate, ToyConfig};
use oov_core::trainer::{make_synthetic_oov, Dataset, TrainerConfig};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(tag: u64) -> Rng {
    stream_rng(0xACCE, Stream::Toy, tag)
}

fn toy(seed: u64) -> (Dataset, String) {
    let data = generate(&ToyConfig { seed, ..ToyConfig::default() }).unwrap();
    (data.dataset(0.2).unwrap(), data.log.checksum())
}

fn experiment(model: ModelKind, embedder: EmbedderKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig { kind: model, dim: 16 },
        user_embedder: EmbedderConfig::new(embedder),
        item_embedder: EmbedderConfig::new(embedder),
        trainer: TrainerConfig { seed, ..TrainerConfig::default() },
        eval: EvalConfig::default(),
    }
}

fn oov_user_ndcg(data: &Dataset, cfg: &ExperimentConfig, sum: &str) -> f64 {
    let (_, _, report) = run_experiment(data, cfg, sum).unwrap();
    report.get(Subset::OovUsers).unwrap().ndcg
}

// 1 ------------------------------------------------------------------------

fn transductive_preservation() -> Outcome {
    let start = Instant::now();
    let (data, sum) = toy(0);
    let combos: Vec<(ModelKind, EmbedderKind)> = ModelKind::ALL
        .iter()
        .flat_map(|&m| EmbedderKind::ALL.iter().map(move |&e| (m, e)))
        .collect();
    let mismatches: Vec<String> = combos
        .par_iter()
        .filter_map(|&(m, e)| {
            let mut on = experiment(m, e, 0);
            on.eval.subsets = vec![Subset::Transductive];
            let mut off = on.clone();
            off.trainer.alpha = 0.0;
            let a = run_experiment(&data, &on, &sum).unwrap().2;
            let b = run_experiment(&data, &off, &sum).unwrap().2;
            let (a, b) = (a.get(Subset::Transductive).unwrap(), b.get(Subset::Transductive).unwrap());
            let same = a.ndcg.to_bits() == b.ndcg.to_bits() && a.auroc.to_bits() == b.auroc.to_bits() && a == b;
            (!same).then(|| format!("{m}/{e}"))
        })
        .collect();
    let elapsed = start.elapsed();
    check(
        mismatches.is_empty() && elapsed < Duration::from_secs(120),
        format!("{} model x embedder pairs, mismatches {:?}, {:.1}s", combos.len(), mismatches, elapsed.as_secs_f64()),
    )
}

// 2 ------------------------------------------------------------------------

const H: f64 = 1e-5;

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Central differences of `f` over every coordinate of `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(&x);
            x[i] = orig - H;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn vec_of(n: usize, r: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn gradient_suite() -> Outcome {
    const N: usize = 100;
    let mut r = rng(2);
    let mut worst = [0.0f64; 4];

    for _ in 0..N {
        let d = r.random_range(1..=8);
        let x = vec_of(3 * d, &mut r);
        let g = bpr_loss_and_grad(&x[..d], &x[d..2 * d], &x[2 * d..]).unwrap();
        let analytic = [g.user, g.positive, g.negative].concat();
        let numeric = numeric_grad(&x, |x| bpr_loss_and_grad(&x[..d], &x[d..2 * d], &x[2 * d..]).unwrap().loss);
        worst[0] = worst[0].max(rel_err(&analytic, &numeric));
    }

    for _ in 0..N {
        let d = r.random_range(2..=8);
        let b = r.random_range(2..=5);
        let gamma = r.random_range(0.1..2.0);
        let x = vec_of(2 * b * d, &mut r);
        let split = |x: &[f64]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
            let rows: Vec<Vec<f64>> = x.chunks(d).map(<[f64]>::to_vec).collect();
            (rows[..b].to_vec(), rows[b..].to_vec())
        };
        let (u, i) = split(&x);
        let g = directau_loss_and_grad(&u, &i, gamma).unwrap();
        let analytic = [g.users.concat(), g.items.concat()].concat();
        let numeric = numeric_grad(&x, |x| {
            let (u, i) = split(x);
            directau_loss_and_grad(&u, &i, gamma).unwrap().loss
        });
        worst[1] = worst[1].max(rel_err(&analytic, &numeric));
    }

    for _ in 0..N {
        let d = r.random_range(1..=8);
        let (fu, fi) = (r.random_range(1..=4), r.random_range(1..=4));
        let label = r.random_bool(0.5);
        let (uf, itf) = (vec_of(fu, &mut r), vec_of(fi, &mut r));
        let x = vec_of(2 * d + d * fu + d * fi, &mut r);
        let eval = |x: &[f64]| {
            let mut ranker = CtxLiteRanker::zeros(d, fu, fi);
            ranker.user_map.value.copy_from_slice(&x[2 * d..2 * d + d * fu]);
            ranker.item_map.value.copy_from_slice(&x[2 * d + d * fu..]);
            ctx_lite_loss_and_grad(&ranker, (&x[..d], Some(&uf)), (&x[d..2 * d], Some(&itf)), label).unwrap()
        };
        let g = eval(&x);
        let analytic = [g.user_embedding, g.item_embedding, g.user_map, g.item_map].concat();
        let numeric = numeric_grad(&x, |x| eval(x).loss);
        worst[2] = worst[2].max(rel_err(&analytic, &numeric));
    }

    for t in 0..N as u64 {
        let input = r.random_range(1..=8);
        let hidden = r.random_range(1..=8);
        let out = r.random_range(1..=8);
        let mut init = stream_rng(t, Stream::Init, 7);
        let mut net = MicroMlp::new("net", &[input, hidden, out], &mut init).unwrap();
        let x = vec_of(input, &mut r);
        let c = vec_of(out, &mut r);
        let loss = |net: &MicroMlp, x: &[f64]| net.forward(x).unwrap().iter().zip(&c).map(|(y, c)| y * c).sum::<f64>();
        net.zero_grad();
        let grad_x = net.backward(&x, &c).unwrap();
        let mut analytic = grad_x;
        let mut numeric = numeric_grad(&x, |x| loss(&net, x));
        let n_params = net.params().len();
        for p in 0..n_params {
            analytic.extend_from_slice(&net.params()[p].grad);
            let values = net.params()[p].value.clone();
            numeric.extend(numeric_grad(&values, |v| {
                let mut probe = net.clone();
                probe.params_mut()[p].value.copy_from_slice(v);
                loss(&probe, &x)
            }));
        }
        worst[3] = worst[3].max(rel_err(&analytic, &numeric));
    }

    check(
        worst.iter().all(|&w| w < 1e-4),
        format!(
            "worst relative error over {N} instances each: bpr {:.1e}, directau {:.1e}, ctx_lite {:.1e}, mlp {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn dcg_oracle(ranked: &[u32], relevant: &HashSet<u32>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).ln() * std::f64::consts::LN_2;
    let gains: f64 = ranked.iter().take(k).enumerate().filter(|(_, i)| relevant.contains(i)).map(|(p, _)| discount(p)).sum();
    let ideal: f64 = (0..relevant.len().min(k)).map(discount).sum();
    gains / ideal
}

fn auroc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (a, _) in labels.iter().enumerate().filter(|(_, l)| **l) {
        for (b, _) in labels.iter().enumerate().filter(|(_, l)| !**l) {
            pairs += 1.0;
            if scores[a] > scores[b] {
                wins += 1.0;
            } else if scores[a] == scores[b] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn metric_oracles() -> Outcome {
    let mut r = rng(3);
    let mut worst_ndcg = 0.0f64;
    for _ in 0..500 {
        let n = r.random_range(1..50u32);
        let mut ranked: Vec<u32> = (0..n).collect();
        ranked.shuffle(&mut r);
        let relevant: HashSet<u32> = (0..n + 5).filter(|_| r.random_bool(0.25)).collect();
        let k = r.random_range(1..40);
        worst_ndcg = worst_ndcg.max((ndcg_at_k(&ranked, &relevant, k).unwrap() - dcg_oracle(&ranked, &relevant, k)).abs());
    }
    let mut worst_auc = 0.0f64;
    let mut done = 0;
    while done < 500 {
        let n = r.random_range(2..80);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..12u8)) * 0.3).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.35)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        worst_auc = worst_auc.max((auroc(&scores, &labels).unwrap() - auroc_oracle(&scores, &labels)).abs());
        done += 1;
    }
    check(
        worst_ndcg <= 1e-12 && worst_auc <= 1e-12,
        format!("max |diff| ndcg {worst_ndcg:.1e}, auroc {worst_auc:.1e} over 500 instances each"),
    )
}

// 4 ------------------------------------------------------------------------

fn lsh_angle_law() -> Outcome {
    const P: usize = 4096;
    const DIM: usize = 16;
    let mut r = rng(4);
    let mut report = Vec::new();
    let mut ok = true;
    for degrees in [30.0f64, 60.0, 90.0] {
        let theta = degrees.to_radians();
        let mut total = 0.0;
        for pair in 0..200u64 {
            let a = unit(&vec_of(DIM, &mut r));
            let raw = vec_of(DIM, &mut r);
            let along = dot(&raw, &a);
            let b = unit(&raw.iter().zip(&a).map(|(x, a)| x - along * a).collect::<Vec<_>>());
            let v: Vec<f64> = a.iter().zip(&b).map(|(a, b)| theta.cos() * a + theta.sin() * b).collect();
            let proj = RandomProjection::new(pair + (degrees as u64) * 1000, 0, P, DIM);
            let (ca, cv) = (lsh_code(&proj, &a).unwrap(), lsh_code(&proj, &v).unwrap());
            total += ca.hamming(&cv) as f64 / P as f64;
        }
        let mean = total / 200.0;
        let expected = theta / std::f64::consts::PI;
        ok &= (mean - expected).abs() <= 0.02;
        report.push(format!("{degrees}°: {mean:.4} vs {expected:.4}"));
    }
    check(ok, report.join(", "))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

// 5 ------------------------------------------------------------------------

fn collision_ordering() -> Outcome {
    const FEAT: usize = 12;
    let table = EmbeddingTable::from_rows(EntityKind::User, &[vec![0.5; 4]]);
    let ctx = IvContext { table: &table, features: None };
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let mut counts = Vec::new();
    for seed in 0..10u64 {
        let m = OovEmbedder::new(&EmbedderConfig::new(EmbedderKind::MLsh).with_buckets(8), EntityKind::User, 4, Some(FEAT), seed).unwrap();
        let s = OovEmbedder::new(&EmbedderConfig::new(EmbedderKind::SLsh).with_buckets(256), EntityKind::User, 4, Some(FEAT), seed).unwrap();
        let mut r = stream_rng(seed, Stream::Toy, 5);
        let (mut ms, mut ss) = (HashSet::new(), HashSet::new());
        for id in 0..1000u64 {
            let f = random_features(FEAT, &mut r);
            let q = OovQuery::new(id, Some(&f));
            ms.insert(bits(m.embed(&q, &ctx).unwrap()));
            ss.insert(bits(s.embed(&q, &ctx).unwrap()));
        }
        counts.push((ss.len(), ms.len()));
    }
    let wins = counts.iter().filter(|(s, m)| s <= m).count();
    check(wins == 10, format!("s_lsh <= m_lsh in {wins}/10 seeds, (s, m) = {counts:?}"))
}

// 6 ------------------------------------------------------------------------

fn bucket_load() -> Outcome {
    const B: usize = 64;
    let mut load = [0usize; B];
    for id in 0..6400u64 {
        load[bucket_of(id, B)] += 1;
    }
    let mean = load.iter().sum::<usize>() as f64 / B as f64;
    let stat: f64 = load.iter().map(|&l| (l as f64 - mean).powi(2) / mean).sum();
    let p = 1.0 - ChiSquared::new((B - 1) as f64).unwrap().cdf(stat);
    check(mean == 100.0 && p > 0.01, format!("mean load {mean}, chi-square {stat:.2} on {} df, p = {p:.3}", B - 1))
}

// 7 ------------------------------------------------------------------------

fn synthetic_balance() -> Outcome {
    let (data, _) = toy(0);
    let events: Vec<_> = data.split.train.events.clone();
    let mut counts = [0usize; 3];
    let mut epoch = 1;
    while counts.iter().sum::<usize>() < 30_000 {
        let mut r = stream_rng(7, Stream::OovPhase, epoch as u64);
        let batch = make_synthetic_oov(&data, &events, 1.0, 0.2, epoch, 7, &mut r).unwrap();
        for (c, n) in counts.iter_mut().zip(batch.type_counts()) {
            *c += n;
        }
        epoch += 1;
    }
    let total = counts.iter().sum::<usize>() as f64;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    check(
        freq.iter().all(|f| (f - 1.0 / 3.0).abs() <= 0.02),
        format!("{total} samples, frequencies {:.4} / {:.4} / {:.4}", freq[0], freq[1], freq[2]),
    )
}

// 8 ------------------------------------------------------------------------

fn embedder_ordering() -> Outcome {
    let start = Instant::now();
    let scores: Vec<[f64; 3]> = (0..5u64)
        .into_par_iter()
        .map(|seed| {
            let (data, sum) = toy(seed);
            let run = |e| oov_user_ndcg(&data, &experiment(ModelKind::Bpr, e, seed), &sum);
            [run(EmbedderKind::MLsh), run(EmbedderKind::RBucket), run(EmbedderKind::Zero)]
        })
        .collect();
    let mean = |j: usize| scores.iter().map(|s| s[j]).sum::<f64>() / 5.0;
    let beats_zero = scores.iter().filter(|s| s[0] > s[2]).count();
    let elapsed = start.elapsed();
    check(
        mean(0) > mean(1) && beats_zero >= 4 && elapsed < Duration::from_secs(600),
        format!(
            "oov_users ndcg@20 mean m_lsh {:.4} vs r_bucket {:.4} (zero {:.4}); m_lsh > zero in {beats_zero}/5 seeds; {:.1}s",
            mean(0),
            mean(1),
            mean(2),
            elapsed.as_secs_f64()
        ),
    )
}

// 9 and 10 use the command-line binary ----------------------------------------

fn oovrec(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_oovrec"))
        .args(args)
        .env_remove("OOV_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("oovrec {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn sha(path: &Path) -> Result<String, String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(|e| e.to_string())?)))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("toy");
    let data_s = data.to_str().unwrap();
    oovrec(&["gen-toy", "--out", data_s])?;
    let cfg = data.join("run.json");
    let c = cfg.to_str().unwrap();
    let out = data.join("run");
    oovrec(&["prepare-split", "--config", c])?;
    oovrec(&["train", "--config", c, "--seed", "11"])?;
    let first = sha(&out.join("checkpoint.json"))?;
    oovrec(&["evaluate", "--config", c, "--seed", "11"])?;
    let report = (fs::read(out.join("report.json")).unwrap(), fs::read(out.join("report.txt")).unwrap());
    oovrec(&["train", "--config", c, "--seed", "11"])?;
    let second = sha(&out.join("checkpoint.json"))?;
    oovrec(&["evaluate", "--config", c, "--seed", "11", "--threads", "3"])?;
    let again = (fs::read(out.join("report.json")).unwrap(), fs::read(out.join("report.txt")).unwrap());
    check(
        first == second && report == again,
        format!("checkpoint sha256 {}.. twice; reports identical: {}", &first[..12], report == again),
    )
}

fn sweep_smoke() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut passing = 0;
    for seed in 0..5u64 {
        let data = dir.path().join(format!("toy{seed}"));
        let s = seed.to_string();
        oovrec(&["gen-toy", "--out", data.to_str().unwrap(), "--seed", &s])?;
        let cfg_path = data.join("run.json");
        let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
        cfg["model"]["dim"] = 16.into();
        cfg["sweep"] = serde_json::json!({"alpha": [0.1, 0.5, 1.0], "beta": [0.0, 0.2, 0.5], "b_u": [8, 64, 512]});
        fs::write(&cfg_path, cfg.to_string()).unwrap();
        let c = cfg_path.to_str().unwrap();
        oovrec(&["sweep", "--config", c, "--seed", &s])?;
        let grid = read_oov_ndcg(&data.join("run/sweep.csv"), 9 * 4 * 2)?;

        // zero-embedder reference at the base point
        cfg["user_embedder"]["kind"] = "zero".into();
        cfg["item_embedder"]["kind"] = "zero".into();
        cfg["sweep"] = serde_json::json!({"alpha": [0.5]});
        cfg["out"] = "zero".into();
        fs::write(&cfg_path, cfg.to_string()).unwrap();
        oovrec(&["sweep", "--config", c, "--seed", &s])?;
        let zero = read_oov_ndcg(&data.join("zero/sweep.csv"), 4 * 2)?;

        let base = grid.iter().find(|(p, v, _)| p == "alpha" && v == "0.5").map(|g| g.2).unwrap();
        let lo = grid.iter().map(|g| g.2).fold(f64::INFINITY, f64::min);
        let hi = grid.iter().map(|g| g.2).fold(f64::NEG_INFINITY, f64::max);
        let gap = base - zero[0].2;
        if hi - lo < gap {
            passing += 1;
        }
        lines.push(format!("seed {seed}: range {:.4} gap {gap:.4}", hi - lo));
    }
    check(passing >= 4, format!("band narrower than gap in {passing}/5 seeds ({})", lines.join("; ")))
}

/// `(param, value, oov_users ndcg)` rows, after checking the CSV is complete.
fn read_oov_ndcg(path: &Path, expected_rows: usize) -> Result<Vec<(String, String, f64)>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let mut total = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        total += 1;
        if rec.iter().any(str::is_empty) || &rec[6] != "ok" {
            return Err(format!("incomplete sweep row {rec:?}"));
        }
        if &rec[3] == "oov_users" && rec[4].starts_with("ndcg") {
            rows.push((rec[0].to_string(), rec[1].to_string(), rec[5].parse::<f64>().map_err(|e| e.to_string())?));
        }
    }
    if total != expected_rows {
        return Err(format!("{} has {total} rows, expected {expected_rows}", path.display()));
    }
    Ok(rows)
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("transductive preservation", transductive_preservation),
        ("gradient suite", gradient_suite),
        ("metric oracles", metric_oracles),
        ("lsh angle law", lsh_angle_law),
        ("collision ordering", collision_ordering),
        ("bucket load", bucket_load),
        ("synthetic type balance", synthetic_balance),
        ("embedder ordering", embedder_ordering),
        ("determinism", determinism),
        ("sweep smoke", sweep_smoke),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
