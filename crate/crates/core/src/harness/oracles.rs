//! Brute-force oracles for retrieval, thresholds, Spearman, fusion, splits
//! and the CoSENT ordering property.

use crate::error::{Error, Result};
use crate::eval::{best_threshold, spearman};
use crate::knn::{fuse, knn_vote, FusionConfig, NeighborStore};
use crate::losses::cosent_on_cosines;
use crate::numeric::{cosine_similarity, dot, normalized, stable_softmax, Mat64};
use crate::retrieval::Index;
use crate::rng::Rng;
use crate::text::split_pairs;

use super::report::{OracleCase, SuiteReport};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub retrieval_indices: usize,
    pub index_size: usize,
    pub dim: usize,
    pub ks: Vec<usize>,
    /// Random instances per remaining oracle.
    pub cases: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            retrieval_indices: 100,
            index_size: 1000,
            dim: 16,
            ks: vec![1, 10, 100],
            cases: 100,
        }
    }
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Full sort of all scores, best first, ties to the lower row.
pub fn brute_force_top_k(rows: &[Vec<f64>], query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = rows.iter().map(|r| dot(r, query)).enumerate().collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn check_retrieval(seed: u64, n: usize, dim: usize, ks: &[usize]) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let raw: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, dim)).collect();
    let texts = (0..n).map(|i| format!("doc {i}")).collect();
    let index = Index::from_vectors(&raw, texts).map_err(|e| e.to_string())?;
    let unit: Vec<Vec<f64>> = index.embeddings().iter_rows().map(<[f64]>::to_vec).collect();
    let query = normalized(&normals(&mut rng, dim)).map_err(|e| e.to_string())?;
    for &k in ks {
        let got = index.search(&query, k).map_err(|e| e.to_string())?;
        let want = brute_force_top_k(&unit, &query, k);
        let got_ids: Vec<usize> = got.iter().map(|h| h.doc_id).collect();
        let want_ids: Vec<usize> = want.iter().map(|w| w.0).collect();
        if got_ids != want_ids {
            return Err(format!("k={k}: ids {got_ids:?} != oracle {want_ids:?}"));
        }
        if got.windows(2).any(|w| w[0].score < w[1].score) {
            return Err(format!("k={k}: scores increase down the list"));
        }
    }
    Ok(())
}

/// Ranks by counting: `1 + #{smaller} + (#{equal} - 1) / 2`.
pub fn rank_by_counting(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let below = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn pearson_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

/// Integer-valued sequence with at least 30% of entries sharing their value.
pub fn tied_sequence(rng: &mut Rng, n: usize) -> Vec<f64> {
    loop {
        let xs: Vec<f64> = (0..n).map(|_| rng.index(n.div_ceil(3).max(2)) as f64).collect();
        let tied = xs
            .iter()
            .filter(|&&x| xs.iter().filter(|&&y| y == x).count() > 1)
            .count();
        let constant = xs.iter().all(|&x| x == xs[0]);
        if !constant && tied * 10 >= n * 3 {
            return xs;
        }
    }
}

pub fn spearman_error(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let n = 5 + rng.index(46);
    let xs = tied_sequence(&mut rng, n);
    let ys = tied_sequence(&mut rng, n);
    let got = spearman(&xs, &ys)?;
    let want = pearson_oracle(&rank_by_counting(&xs), &rank_by_counting(&ys));
    Ok((got - want).abs())
}

/// Every midpoint between adjacent distinct scores, F1 counted directly.
pub fn exhaustive_threshold(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut distinct = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    distinct.dedup();
    let candidates: Vec<f64> = if distinct.len() == 1 {
        distinct.clone()
    } else {
        distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
    };
    let mut best = (candidates[0], -1.0);
    for t in candidates {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= t, l == 1) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                (false, false) => {}
            }
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f1 > best.1 + 1e-12 {
            best = (t, f1);
        }
    }
    best
}

pub fn check_threshold(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 2 + rng.index(19);
    let scores: Vec<f64> = (0..n).map(|_| rng.index(8) as f64 / 8.0).collect();
    let mut labels: Vec<u8> = (0..n).map(|i| if i < 2 { i as u8 } else { rng.index(2) as u8 }).collect();
    rng.shuffle(&mut labels);
    let (t, f1) = best_threshold(&scores, &labels).map_err(|e| e.to_string())?;
    let (ot, of1) = exhaustive_threshold(&scores, &labels);
    if (f1 - of1).abs() > 1e-12 || (t - ot).abs() > 1e-12 {
        return Err(format!("({t}, {f1}) != oracle ({ot}, {of1})"));
    }
    Ok(())
}

fn random_store(rng: &mut Rng, rows: usize, dim: usize) -> Result<NeighborStore> {
    let emb: Vec<Vec<f64>> = (0..rows).map(|_| normals(rng, dim)).collect();
    let labels = (0..rows).map(|_| rng.index(2) as u8).collect();
    NeighborStore::new(Mat64::from_rows(&emb)?, labels, "random")
}

pub fn check_fusion(seed: u64) -> std::result::Result<(), String> {
    let run = || -> Result<std::result::Result<(), String>> {
        let mut rng = Rng::new(seed);
        let dim = 2 + rng.index(7);
        let rows = 1 + rng.index(30);
        let store = random_store(&mut rng, rows, dim)?;
        let k = 1 + rng.index(8);
        let logits = [rng.normal() * 3.0, rng.normal() * 3.0];
        let query = normals(&mut rng, dim);
        let soft = stable_softmax(&logits)?;
        let vote = knn_vote(&query, &store, k)?;
        for step in 0..=10 {
            let w = step as f64 / 10.0;
            let s = fuse(&logits, &query, &store, &FusionConfig { w, k })?;
            if step == 0 && (s[0].to_bits(), s[1].to_bits()) != (soft[0].to_bits(), soft[1].to_bits()) {
                return Ok(Err(format!("w=0: {s:?} != softmax {soft:?}")));
            }
            if step == 10 && (s[0].to_bits(), s[1].to_bits()) != (vote[0].to_bits(), vote[1].to_bits()) {
                return Ok(Err(format!("w=1: {s:?} != vote {vote:?}")));
            }
            if (s[0] + s[1] - 1.0).abs() > 1e-12 || s.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Ok(Err(format!("w={w}: {s:?} is not a probability vector")));
            }
        }
        Ok(Ok(()))
    };
    run().map_err(|e| e.to_string())?
}

pub fn check_split(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 2 + rng.index(200);
    let ratio = rng.uniform(0.05, 0.95);
    let items: Vec<usize> = (0..n).collect();
    let split_seed = rng.next_u64();
    let (train, test) = split_pairs(&items, ratio, split_seed).map_err(|e| e.to_string())?;
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort_unstable();
    if all != items {
        return Err(format!("n={n}: train ∪ test is not the input"));
    }
    let want = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    if train.len() != want {
        return Err(format!("n={n} ratio={ratio}: train size {} != {want}", train.len()));
    }
    if split_pairs(&items, ratio, split_seed).map_err(|e| e.to_string())? != (train, test) {
        return Err("split is not deterministic".into());
    }
    Ok(())
}

/// Raising one positive cosine by `delta` must strictly lower the loss;
/// raising one negative cosine must strictly raise it.
pub fn check_cosent_ordering(seed: u64, lambda: f64, delta: f64) -> std::result::Result<(), String> {
    let run = || -> Result<std::result::Result<(), String>> {
        let mut rng = Rng::new(seed);
        let n = 2 + rng.index(15);
        let d = 8;
        let mut labels: Vec<u8> = (0..n).map(|i| if i < 2 { i as u8 } else { rng.index(2) as u8 }).collect();
        rng.shuffle(&mut labels);
        let cos = (0..n)
            .map(|_| cosine_similarity(&normals(&mut rng, d), &normals(&mut rng, d)))
            .collect::<Result<Vec<_>>>()?;
        let base = cosent_on_cosines(&cos, &labels, lambda)?.0;
        for want_label in [1u8, 0] {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == want_label).collect();
            let i = idx[rng.index(idx.len())];
            let mut bumped = cos.clone();
            bumped[i] += delta;
            let loss = cosent_on_cosines(&bumped, &labels, lambda)?.0;
            let ok = if want_label == 1 { loss < base } else { loss > base };
            if !ok {
                return Ok(Err(format!(
                    "label {want_label} pair {i}: loss {base} -> {loss} after +{delta}"
                )));
            }
        }
        Ok(Ok(()))
    };
    run().map_err(|e| e.to_string())?
}

fn derive(seed: u64, family: u64, i: usize) -> u64 {
    Rng::new(seed ^ (family << 48)).fork().next_u64().wrapping_add(i as u64)
}

pub fn run_oracle_suite(config: &OracleConfig, seed: u64) -> Result<SuiteReport> {
    if config.index_size == 0 || config.dim == 0 || config.ks.is_empty() {
        return Err(Error::InvalidArgument("oracle config needs a non-empty index and k list".into()));
    }
    let mut report = SuiteReport::new("oracles");
    for i in 0..config.retrieval_indices {
        let s = derive(seed, 1, i);
        report.check(
            OracleCase::new(s, "retrieval.top_k", 0.0, "full-sort"),
            check_retrieval(s, config.index_size, config.dim, &config.ks),
        );
    }
    for i in 0..config.cases {
        let s = derive(seed, 2, i);
        report.check(
            OracleCase::new(s, "eval.best_threshold", 1e-12, "exhaustive-scan"),
            check_threshold(s),
        );
        let s = derive(seed, 3, i);
        let case = OracleCase::new(s, "eval.spearman_ties", 1e-9, "rank-then-pearson");
        match spearman_error(s) {
            Ok(e) => report.measure(case, e),
            Err(e) => report.check(case, Err(e.to_string())),
        }
        let s = derive(seed, 4, i);
        report.check(
            OracleCase::new(s, "knn.fuse_endpoints", 1e-12, "softmax/vote-bitwise"),
            check_fusion(s),
        );
        let s = derive(seed, 5, i);
        report.check(
            OracleCase::new(s, "text.split_partition", 0.0, "multiset-equality"),
            check_split(s),
        );
        let s = derive(seed, 6, i);
        report.check(
            OracleCase::new(s, "losses.cosent_ordering", 0.0, "perturbation"),
            check_cosent_ordering(s, 20.0, 0.01),
        );
    }
    Ok(report)
}
