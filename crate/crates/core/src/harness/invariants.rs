//! One executable check per library invariant, plus the coverage map.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::encoder::{Encoder, EncoderConfig, Pooling};
use crate::error::Result;
use crate::eval::{confusion_metrics, evaluate_scores, spearman, ConfusionCounts, ThresholdPolicy};
use crate::knn::{fuse, knn_vote, FusionConfig, NeighborStore};
use crate::losses::{
    cosent_on_cosines, cosine_pair_loss, infonce_loss, sbert_head_loss, CosentBatch, cosent_loss,
};
use crate::numeric::{cosine_similarity, log_sum_exp, normalized, relative_error, stable_softmax, Mat64};
use crate::pipeline::{run_pipeline, Dataset};
use crate::retrieval::{build_index, Index};
use crate::rng::Rng;
use crate::synthetic::{generate, SyntheticSpec};
use crate::text::{build_vocab, tokenize, Corpus};
use crate::trainer::{Adam, LrSchedule, TrainConfig};

use super::gradients::{gradient_instance, GRADIENT_TOLERANCE};
use super::oracles::{check_cosent_ordering, check_retrieval, check_split, check_threshold};
use super::report::{OracleCase, SuiteReport};

type Check = fn(u64) -> std::result::Result<(), String>;

/// A stated property and the single check that executes it.
pub struct Invariant {
    pub id: &'static str,
    pub module: &'static str,
    pub statement: &'static str,
    pub check: Check,
}

/// A property verified outside this crate, named by its test.
#[derive(Debug, Clone, Serialize)]
pub struct ExternalCheck {
    pub id: &'static str,
    pub module: &'static str,
    pub statement: &'static str,
    pub test: &'static str,
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cosine_symmetric_scale(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let d = 2 + rng.index(15);
    let (a, b) = (normals(&mut rng, d), normals(&mut rng, d));
    let alpha = rng.uniform(0.1, 10.0);
    let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
    let ab = cosine_similarity(&a, &b).map_err(e)?;
    let ba = cosine_similarity(&b, &a).map_err(e)?;
    let sb = cosine_similarity(&scaled, &b).map_err(e)?;
    ensure((ab - ba).abs() <= 1e-12 && (ab - sb).abs() <= 1e-12, || {
        format!("sim(a,b)={ab} sim(b,a)={ba} sim(αa,b)={sb}")
    })
}

fn lse_bounds(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.index(20);
    let xs: Vec<f64> = (0..n).map(|_| rng.uniform(-700.0, 700.0)).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let l = log_sum_exp(&xs).map_err(e)?;
    ensure(l >= max && l <= max + (n as f64).ln() + 1e-12, || {
        format!("lse {l} outside [{max}, {max} + ln {n}]")
    })
}

fn softmax_simplex(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.index(20);
    let xs: Vec<f64> = (0..n).map(|_| rng.uniform(-300.0, 300.0)).collect();
    let p = stable_softmax(&xs).map_err(e)?;
    let sum: f64 = p.iter().sum();
    ensure((sum - 1.0).abs() <= 1e-12 && p.iter().all(|&x| x > 0.0), || {
        format!("sum {sum}, min {:?}", p.iter().copied().fold(f64::INFINITY, f64::min))
    })
}

fn rng_reproducible(seed: u64) -> std::result::Result<(), String> {
    let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
    for i in 0..10_000 {
        let (x, y) = (a.next_u64(), b.next_u64());
        if x != y {
            return Err(format!("draw {i}: {x} != {y}"));
        }
    }
    Ok(())
}

const CHAR_POOL: &[&str] = &[
    "土", "壤", "水", "分", "数", "据", "ア", "한", "Ｇｌａｃｉｅｒ", "Mass", "élan", "ΔT", "2019", " ", "  ", ",",
    "-", "（", "）", "ﬁ", "Ⅻ", "\t",
];

fn random_text(rng: &mut Rng) -> String {
    (0..1 + rng.index(12)).map(|_| CHAR_POOL[rng.index(CHAR_POOL.len())]).collect()
}

fn tokenize_idempotent(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let text = random_text(&mut rng);
    let once = tokenize(&text);
    let twice = tokenize(&once.join(" "));
    ensure(once == twice, || format!("{text:?}: {once:?} != {twice:?}"))
}

fn encode_decode_roundtrip(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let texts: Vec<String> = (0..5).map(|_| random_text(&mut rng)).collect();
    let vocab = build_vocab(texts.iter().map(String::as_str), 1).map_err(e)?;
    for t in &texts {
        let ids = vocab.encode_ids(t, 256);
        let again = vocab.encode_ids(&vocab.decode(&ids), 256);
        if ids != again {
            return Err(format!("{t:?}: {ids:?} != {again:?}"));
        }
    }
    Ok(())
}

fn encoder_backward_fd(seed: u64) -> std::result::Result<(), String> {
    let g = gradient_instance("encoder_backward", seed).map_err(e)?;
    let err = relative_error(&g.analytic, &g.numeric);
    ensure(err < GRADIENT_TOLERANCE, || format!("relative error {err:e}"))
}

fn small_encoder(rng: &mut Rng, use_position: bool, dropout_p: f64) -> std::result::Result<(Encoder, Vec<u32>), String> {
    let vocab = build_vocab(["甲 乙 丙 丁 戊 己 庚 辛"], 1).map_err(e)?;
    let cfg = EncoderConfig {
        embed_dim: 8,
        max_len: 8,
        dropout_p,
        pooling: Pooling::Mean,
        use_position,
    };
    let enc = Encoder::init(&vocab, cfg, rng).map_err(e)?;
    let len = 3 + rng.index(5);
    let mut ids: Vec<u32> = (3..vocab.len() as u32).collect();
    rng.shuffle(&mut ids);
    ids.truncate(len);
    Ok((enc, ids))
}

fn dropout_expectation(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let (enc, ids) = small_encoder(&mut rng, true, 0.3)?;
    let clean = enc.forward(&ids, None).map_err(e)?.0 .0;
    let draws = 10_000;
    let d = clean.len();
    let (mut sum, mut sq) = (vec![0.0; d], vec![0.0; d]);
    for _ in 0..draws {
        let mask = enc.sample_mask(ids.len(), &mut rng);
        let out = enc.forward(&ids, mask.as_ref()).map_err(e)?.0 .0;
        for j in 0..d {
            sum[j] += out[j];
            sq[j] += out[j] * out[j];
        }
    }
    let n = draws as f64;
    for j in 0..d {
        let mean = sum[j] / n;
        let var = (sq[j] / n - mean * mean).max(0.0) * n / (n - 1.0);
        let se = (var / n).sqrt();
        if (mean - clean[j]).abs() > 3.0 * se {
            return Err(format!("coordinate {j}: mean {mean} vs clean {} (se {se})", clean[j]));
        }
    }
    Ok(())
}

fn siamese_order(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let (enc, ids) = small_encoder(&mut rng, true, 0.0)?;
    let other: Vec<u32> = ids.iter().rev().copied().collect();
    let a_first = enc.forward(&ids, None).map_err(e)?.0;
    let _ = enc.forward(&other, None).map_err(e)?;
    let _ = enc.forward(&other, None).map_err(e)?;
    let a_second = enc.forward(&ids, None).map_err(e)?.0;
    ensure(a_first == a_second, || "encoding depends on call order".into())
}

/// Mean pooling adds `Σ_pos position_table[pos]`, a term that does not depend
/// on token order, so order only shows through the pooled slot under CLS
/// pooling. Checked: CLS pooling sees a reversal, mean pooling does not,
/// with or without positions.
fn permutation_sensitivity(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let (enc, ids) = small_encoder(&mut rng, true, 0.0)?;
    let rev: Vec<u32> = ids.iter().rev().copied().collect();
    let embed = |enc: &Encoder, ids: &[u32]| enc.forward(ids, None).map(|r| r.0 .0).map_err(e);
    let mut cls = enc.clone();
    cls.config.pooling = Pooling::Cls;
    if relative_error(&embed(&cls, &ids)?, &embed(&cls, &rev)?) < 1e-9 {
        return Err("reversal left the CLS-pooled embedding unchanged".into());
    }
    for use_position in [true, false] {
        let mut mean = enc.clone();
        mean.config.use_position = use_position;
        if relative_error(&embed(&mean, &ids)?, &embed(&mean, &rev)?) > 1e-12 {
            return Err(format!("reversal changed a mean-pooled embedding (positions {use_position})"));
        }
    }
    Ok(())
}

fn cosent_ordering(seed: u64) -> std::result::Result<(), String> {
    check_cosent_ordering(seed, 20.0, 0.01)
}

fn mixed_labels(rng: &mut Rng, n: usize) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|i| if i < 2 { i as u8 } else { rng.index(2) as u8 }).collect();
    rng.shuffle(&mut labels);
    labels
}

fn cosent_permutation(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 2 + rng.index(10);
    let d = 6;
    let rows_u: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, d)).collect();
    let rows_v: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, d)).collect();
    let labels = mixed_labels(&mut rng, n);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let loss = |order: &[usize]| -> Result<f64> {
        let u: Vec<&Vec<f64>> = order.iter().map(|&i| &rows_u[i]).collect();
        let v: Vec<&Vec<f64>> = order.iter().map(|&i| &rows_v[i]).collect();
        let l = order.iter().map(|&i| labels[i]).collect();
        Ok(cosent_loss(&CosentBatch::new(Mat64::from_rows(&u)?, Mat64::from_rows(&v)?, l)?, 20.0)?.loss)
    };
    let base: Vec<usize> = (0..n).collect();
    let (a, b) = (loss(&base).map_err(e)?, loss(&perm).map_err(e)?);
    ensure((a - b).abs() <= 1e-12 * a.max(1.0), || format!("{a} != {b}"))
}

fn infonce_permutation(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 2 + rng.index(6);
    let d = 6;
    let a: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, d)).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, d)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let pa: Vec<&Vec<f64>> = perm.iter().map(|&i| &a[i]).collect();
    let pb: Vec<&Vec<f64>> = perm.iter().map(|&i| &b[i]).collect();
    let run = || -> Result<(f64, f64)> {
        Ok((
            infonce_loss(&Mat64::from_rows(&a)?, &Mat64::from_rows(&b)?, 0.05)?.loss,
            infonce_loss(&Mat64::from_rows(&pa)?, &Mat64::from_rows(&pb)?, 0.05)?.loss,
        ))
    };
    let (x, y) = run().map_err(e)?;
    ensure((x - y).abs() <= 1e-12 * x.max(1.0), || format!("{x} != {y}"))
}

fn losses_non_negative(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.index(5);
    let d = 2 + rng.index(7);
    let run = |rng: &mut Rng| -> Result<Vec<f64>> {
        let a = Mat64::from_vec(n, d, normals(rng, n * d))?;
        let b = Mat64::from_vec(n, d, normals(rng, n * d))?;
        let head = Mat64::from_vec(2, 3 * d, normals(rng, 6 * d))?;
        let labels = mixed_labels(rng, n.max(2));
        let cos: Vec<f64> = (0..labels.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Ok(vec![
            infonce_loss(&a, &b, 0.05)?.loss,
            cosent_on_cosines(&cos, &labels, 20.0)?.0,
            cosine_pair_loss(a.row(0), b.row(0), labels[0])?.loss,
            sbert_head_loss(a.row(0), b.row(0), &head, labels[0])?.loss,
        ])
    };
    let losses = run(&mut rng).map_err(e)?;
    if let Some(l) = losses.iter().find(|&&l| !(l >= 0.0)) {
        return Err(format!("negative loss {l} in {losses:?}"));
    }
    let one = Mat64::from_vec(1, d, normals(&mut rng, d)).map_err(e)?;
    let other = Mat64::from_vec(1, d, normals(&mut rng, d)).map_err(e)?;
    let l1 = infonce_loss(&one, &other, 0.05).map_err(e)?.loss;
    ensure(l1 == 0.0, || format!("single-example InfoNCE {l1} != 0"))
}

fn losses_gradients(seed: u64) -> std::result::Result<(), String> {
    for target in ["infonce", "cosine_pair", "cosent", "sbert_head"] {
        let g = gradient_instance(target, seed).map_err(e)?;
        let err = relative_error(&g.analytic, &g.numeric);
        if !(err < GRADIENT_TOLERANCE) {
            return Err(format!("{target}: relative error {err:e}"));
        }
    }
    Ok(())
}

fn random_store(rng: &mut Rng, rows: usize, d: usize) -> Result<NeighborStore> {
    let emb: Vec<Vec<f64>> = (0..rows).map(|_| normals(rng, d)).collect();
    let labels = (0..rows).map(|_| rng.index(2) as u8).collect();
    NeighborStore::new(Mat64::from_rows(&emb)?, labels, "random")
}

fn fuse_probability(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let rows = 1 + rng.index(20);
    let store = random_store(&mut rng, rows, 4).map_err(e)?;
    let q = normals(&mut rng, 4);
    let logits = [rng.normal() * 5.0, rng.normal() * 5.0];
    let w = rng.next_f64();
    let s = fuse(&logits, &q, &store, &FusionConfig { w, k: 1 + rng.index(6) }).map_err(e)?;
    ensure(
        (s[0] + s[1] - 1.0).abs() <= 1e-12 && s.iter().all(|p| (0.0..=1.0).contains(p)),
        || format!("w={w}: {s:?}"),
    )
}

fn argmax(p: &[f64]) -> usize {
    usize::from(p[1] > p[0])
}

fn fuse_argmax_endpoints(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let rows = 1 + rng.index(20);
    let store = random_store(&mut rng, rows, 4).map_err(e)?;
    let q = normals(&mut rng, 4);
    let logits = [rng.normal(), rng.normal()];
    let k = 1 + rng.index(6);
    let run = || -> Result<(usize, usize, usize, usize)> {
        Ok((
            argmax(&fuse(&logits, &q, &store, &FusionConfig { w: 0.0, k })?),
            argmax(&stable_softmax(&logits)?),
            argmax(&fuse(&logits, &q, &store, &FusionConfig { w: 1.0, k })?),
            argmax(&knn_vote(&q, &store, k)?),
        ))
    };
    let (f0, s, f1, v) = run().map_err(e)?;
    ensure(f0 == s && f1 == v, || format!("argmax w=0 {f0} vs {s}, w=1 {f1} vs {v}"))
}

fn duplicate_store(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let d = 4;
    let rows = 1 + rng.index(15);
    let store = random_store(&mut rng, rows, d).map_err(e)?;
    let k = 1 + rng.index(rows);
    let q = normals(&mut rng, d);
    let run = || -> Result<([f64; 2], [f64; 2])> {
        let mut emb: Vec<Vec<f64>> = store.embeddings().iter_rows().map(<[f64]>::to_vec).collect();
        emb.extend(emb.clone());
        let mut labels = store.labels().to_vec();
        labels.extend(store.labels().to_vec());
        let doubled = NeighborStore::new(Mat64::from_rows(&emb)?, labels, "doubled")?;
        Ok((knn_vote(&q, &store, k)?, knn_vote(&q, &doubled, 2 * k)?))
    };
    let (a, b) = run().map_err(e)?;
    ensure((a[0] - b[0]).abs() <= 1e-12 && (a[1] - b[1]).abs() <= 1e-12, || {
        format!("{a:?} != {b:?}")
    })
}

fn monotone_positive_neighbor(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let d = 4;
    let rows = 1 + rng.index(10);
    let store = random_store(&mut rng, rows, d).map_err(e)?;
    let q = normals(&mut rng, d);
    let w = rng.uniform(0.01, 1.0);
    let logits = [rng.normal(), rng.normal()];
    let near: Vec<f64> = q.iter().map(|x| x + 0.1 * rng.normal()).collect();
    let run = || -> Result<(f64, f64, f64)> {
        let mut emb: Vec<Vec<f64>> = store.embeddings().iter_rows().map(<[f64]>::to_vec).collect();
        emb.push(near.clone());
        let mut labels = store.labels().to_vec();
        labels.push(1);
        let grown = NeighborStore::new(Mat64::from_rows(&emb)?, labels, "grown")?;
        let cfg = FusionConfig { w, k: rows + 1 };
        Ok((
            cosine_similarity(&q, &near)?,
            fuse(&logits, &q, &store, &cfg)?[1],
            fuse(&logits, &q, &grown, &cfg)?[1],
        ))
    };
    let (c, before, after) = run().map_err(e)?;
    if c <= 0.0 {
        return Ok(());
    }
    ensure(after >= before, || format!("S[1] fell from {before} to {after}"))
}

fn tiny_run(seed: u64) -> Result<(Vec<u8>, String, String)> {
    let data = generate(&SyntheticSpec {
        topics: 2,
        vocab_size: 20,
        pairs: 24,
        seed,
    })?;
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.encoder.embed_dim = 6;
    cfg.encoder.max_len = 16;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 8;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 8;
    let ds = Dataset::split(Corpus::new(data.corpus), &data.pairs, 0.75, seed)?;
    let vocab = ds.build_vocab(1)?;
    let out = run_pipeline(&cfg, &ds, &vocab)?;
    let bytes = Checkpoint {
        encoder: out.bundle.encoder.clone(),
        classifier: out.bundle.classifier.clone(),
        store: out.bundle.store.clone(),
    }
    .to_bytes(&vocab)?;
    let history = serde_json::to_string(&(&out.pretrain_history, &out.finetune_history))?;
    Ok((bytes, history, serde_json::to_string(&out.report)?))
}

fn training_determinism(seed: u64) -> std::result::Result<(), String> {
    let a = tiny_run(seed).map_err(e)?;
    let b = tiny_run(seed).map_err(e)?;
    ensure(a == b, || "two identical runs differ".into())
}

fn schedule_shape(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let examples = 1 + rng.index(2000);
    let total = 2 + rng.index(300);
    let cfg = TrainConfig {
        warmup_fraction: rng.uniform(0.0, 0.2),
        lr_peak: rng.uniform(1e-3, 1e-1),
        lr_min: rng.uniform(0.0, 1e-3),
        ..TrainConfig::default()
    };
    let sched = LrSchedule::new(examples, total, &cfg).map_err(e)?;
    let lrs = (0..total).map(|t| sched.lr_at(t)).collect::<Result<Vec<_>>>().map_err(e)?;
    let max = lrs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let peaks = lrs.iter().filter(|&&x| x == max).count();
    if peaks != 1 {
        return Err(format!("{peaks} steps at the maximum"));
    }
    let w = sched.warmup_steps;
    let diffs: Vec<f64> = lrs.windows(2).map(|p| p[1] - p[0]).collect();
    let tol = 1e-12 * cfg.lr_peak;
    for seg in [&diffs[..w.min(diffs.len())], &diffs[w.min(diffs.len())..]] {
        if seg.iter().any(|d| (d - seg[0]).abs() > tol) {
            return Err(format!("segment is not linear (warmup {w}, total {total})"));
        }
    }
    Ok(())
}

fn adam_zero_gradient(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.index(8);
    let mut p = normals(&mut rng, n);
    let start = p.clone();
    let zeros = vec![0.0; n];
    let mut fresh = Adam::new(&[n]);
    fresh.update(&mut [&mut p], &[&zeros], 0.01).map_err(e)?;
    if p != start {
        return Err("zero gradient moved parameters from zero moments".into());
    }
    let g = normals(&mut rng, n);
    let mut adam = Adam::new(&[n]);
    adam.update(&mut [&mut p], &[&g], 0.01).map_err(e)?;
    let (m0, v0, p0) = (adam.m[0].clone(), adam.v[0].clone(), p.clone());
    adam.update(&mut [&mut p], &[&zeros], 0.01).map_err(e)?;
    for i in 0..n {
        let m = 0.9 * m0[i];
        let v = 0.999 * v0[i];
        let expect = p0[i] - 0.01 * (m / (1.0 - 0.9f64.powi(2))) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        if adam.m[0][i] != m || adam.v[0][i] != v || (p[i] - expect).abs() > 1e-15 * expect.abs().max(1.0) {
            return Err(format!("coordinate {i}: zero-gradient step is not pure moment decay"));
        }
    }
    Ok(())
}

fn history_finite(seed: u64) -> std::result::Result<(), String> {
    let (_, history, _) = tiny_run(seed.wrapping_add(1)).map_err(e)?;
    ensure(!history.contains("null") && !history.contains("NaN"), || {
        format!("non-finite loss in {history}")
    })
}

fn retrieval_brute_force(seed: u64) -> std::result::Result<(), String> {
    check_retrieval(seed, 300, 8, &[1, 7, 500])
}

fn retrieval_scores_sorted(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 1 + rng.index(100);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, 5)).collect();
    let q = normalized(&normals(&mut rng, 5)).map_err(e)?;
    let index = Index::from_vectors(&rows, vec![String::new(); n]).map_err(e)?;
    let hits = index.search(&q, n).map_err(e)?;
    ensure(
        hits.windows(2).all(|w| w[0].score >= w[1].score)
            && hits.iter().all(|h| (-1.0..=1.0).contains(&h.score)),
        || "scores not non-increasing within [-1, 1]".into(),
    )
}

fn index_build_deterministic(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let texts: Vec<String> = (0..8).map(|_| random_text(&mut rng)).collect();
    let vocab = build_vocab(texts.iter().map(String::as_str), 1).map_err(e)?;
    let enc = Encoder::init(&vocab, EncoderConfig { embed_dim: 8, ..EncoderConfig::default() }, &mut rng)
        .map_err(e)?;
    let a = build_index(&texts, &enc, &vocab).map_err(e)?;
    let b = build_index(&texts, &enc, &vocab).map_err(e)?;
    if a != b {
        return Err("rebuild differs".into());
    }
    for (row, &id) in a.embeddings().iter_rows().zip(a.doc_ids()) {
        let want = normalized(&enc.forward(&vocab.encode_ids(&texts[id], 64), None).map_err(e)?.0 .0)
            .map_err(e)?;
        if row != want.as_slice() {
            return Err(format!("row for doc {id} is not its own embedding"));
        }
    }
    ensure(a.doc_ids().windows(2).all(|w| w[0] < w[1]), || "doc ids out of order".into())
}

fn f1_harmonic(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let tp = rng.index(50) as u64;
    let fp = rng.index(50) as u64;
    let fn_ = if rng.index(4) == 0 { fp } else { rng.index(50) as u64 };
    let c = ConfusionCounts { tp, fp, fn_, tn: 1 + rng.index(50) as u64 };
    let m = confusion_metrics(&c).map_err(e)?;
    let (p, r, f) = (m.precision, m.recall, m.f1);
    ensure(
        f <= (p + r) / 2.0 + 1e-15
            && f >= p.min(r) - 1e-15
            && f <= p.max(r) + 1e-15
            && (p != r || (f - p).abs() <= 1e-15),
        || format!("p={p} r={r} f1={f}"),
    )
}

fn spearman_monotone(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 3 + rng.index(40);
    let xs: Vec<f64> = (0..n).map(|_| rng.index(n) as f64 - n as f64 / 2.0).collect();
    let ys = normals(&mut rng, n);
    let tx: Vec<f64> = xs.iter().map(|x| x * x * x + 2.0 * x).collect();
    let ty: Vec<f64> = ys.iter().map(|y| y.exp()).collect();
    let base = match spearman(&xs, &ys) {
        Ok(s) => s,
        Err(_) => return Ok(()),
    };
    let moved = spearman(&tx, &ty).map_err(e)?;
    ensure((base - moved).abs() <= 1e-12, || format!("{base} != {moved}"))
}

fn spearman_self(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 2 + rng.index(40);
    let xs = normals(&mut rng, n);
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    let (a, b) = (spearman(&xs, &xs).map_err(e)?, spearman(&xs, &neg).map_err(e)?);
    ensure((a - 1.0).abs() <= 1e-12 && (b + 1.0).abs() <= 1e-12, || format!("{a}, {b}"))
}

fn report_reproducible(seed: u64) -> std::result::Result<(), String> {
    let mut rng = Rng::new(seed);
    let n = 2 + rng.index(50);
    let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
    let labels = mixed_labels(&mut rng, n);
    let report = evaluate_scores(scores, labels, ThresholdPolicy::BestF1).map_err(e)?;
    let again = evaluate_scores(
        report.scores.clone(),
        report.labels.clone(),
        ThresholdPolicy::Fixed { threshold: report.threshold },
    )
    .map_err(e)?;
    let m = confusion_metrics(&report.counts).map_err(e)?;
    ensure(
        again == report
            && m.precision == report.precision
            && m.recall == report.recall
            && m.f1 == report.f1
            && m.accuracy == report.accuracy,
        || "report not reproducible from its own scores".into(),
    )
}

macro_rules! inv {
    ($id:literal, $module:literal, $statement:literal, $check:path) => {
        Invariant {
            id: $id,
            module: $module,
            statement: $statement,
            check: $check,
        }
    };
}

pub fn registry() -> Vec<Invariant> {
    vec![
        inv!("numeric.cosine_symmetric_scale", "numeric-core", "cosine is symmetric and positive-scale invariant", cosine_symmetric_scale),
        inv!("numeric.lse_bounds", "numeric-core", "max(xs) <= lse(xs) <= max(xs) + ln n", lse_bounds),
        inv!("numeric.softmax_simplex", "numeric-core", "softmax sums to 1 within 1e-12, entries > 0", softmax_simplex),
        inv!("numeric.rng_reproducible", "numeric-core", "same seed gives the same first 10^4 draws", rng_reproducible),
        inv!("text.tokenize_idempotent", "text-pipeline", "tokenize is idempotent on its joined output", tokenize_idempotent),
        inv!("text.encode_decode_roundtrip", "text-pipeline", "encode_ids(decode(ids)) round-trips in-vocabulary text", encode_decode_roundtrip),
        inv!("text.split_partition", "text-pipeline", "split is a sized, deterministic partition", check_split),
        inv!("encoder.backward_fd", "encoder", "encoder backward matches finite differences", encoder_backward_fd),
        inv!("encoder.dropout_expectation", "encoder", "mean over 10^4 masks is within 3 SE of the clean output", dropout_expectation),
        inv!("encoder.siamese_order", "encoder", "encoding one sentence is independent of encoding another", siamese_order),
        inv!("encoder.permutation_sensitivity", "encoder", "reversal changes CLS-pooled embeddings and leaves mean-pooled ones unchanged", permutation_sensitivity),
        inv!("losses.cosent_ordering", "losses", "raising a positive cosine lowers CoSENT, raising a negative raises it", cosent_ordering),
        inv!("losses.cosent_permutation", "losses", "CoSENT is invariant to batch order", cosent_permutation),
        inv!("losses.infonce_permutation", "losses", "InfoNCE is invariant to a joint row permutation", infonce_permutation),
        inv!("losses.non_negative", "losses", "all losses are >= 0; single-example InfoNCE is exactly 0", losses_non_negative),
        inv!("losses.gradients_fd", "losses", "every loss gradient matches finite differences", losses_gradients),
        inv!("knn.fuse_probability", "knn-fusion", "fuse returns a probability vector for w in [0, 1]", fuse_probability),
        inv!("knn.argmax_endpoints", "knn-fusion", "argmax of fuse equals softmax at w=0 and vote at w=1", fuse_argmax_endpoints),
        inv!("knn.duplicate_store", "knn-fusion", "doubling the store and k leaves the vote unchanged", duplicate_store),
        inv!("knn.monotone_positive_neighbor", "knn-fusion", "adding a positive-cosine label-1 neighbor never lowers S[1]", monotone_positive_neighbor),
        inv!("trainer.determinism", "trainer", "pretrain + finetune is a pure function of data, config and seed", training_determinism),
        inv!("trainer.schedule_shape", "trainer", "lr_at is piecewise linear with a single peak", schedule_shape),
        inv!("trainer.adam_zero_gradient", "trainer", "a zero-gradient Adam step only decays the moments", adam_zero_gradient),
        inv!("trainer.history_finite", "trainer", "loss history is finite", history_finite),
        inv!("retrieval.brute_force", "retrieval-index", "top-k equals a full brute-force sort", retrieval_brute_force),
        inv!("retrieval.scores_sorted", "retrieval-index", "scores are non-increasing and within [-1, 1]", retrieval_scores_sorted),
        inv!("retrieval.build_deterministic", "retrieval-index", "index build is deterministic and order-preserving", index_build_deterministic),
        inv!("eval.f1_harmonic", "evaluation", "f1 is the harmonic mean of precision and recall", f1_harmonic),
        inv!("eval.spearman_monotone", "evaluation", "spearman is invariant to strictly increasing transforms", spearman_monotone),
        inv!("eval.spearman_self", "evaluation", "spearman(x, x) = 1 and spearman(x, -x) = -1", spearman_self),
        inv!("eval.best_threshold_exhaustive", "evaluation", "best_threshold matches the exhaustive scan", check_threshold),
        inv!("eval.report_reproducible", "evaluation", "a report is reproducible from its stored scores", report_reproducible),
    ]
}

/// Command-line properties, checked by the CLI crate's integration tests.
pub fn external_checks() -> Vec<ExternalCheck> {
    vec![
        ExternalCheck {
            id: "cli.resolved_config_replay",
            module: "cli",
            statement: "every subcommand is reproducible from its resolved-config echo",
            test: "csdr-cli/tests/cli.rs::resolved_config_replays_identically",
        },
        ExternalCheck {
            id: "cli.inputs_untouched",
            module: "cli",
            statement: "no subcommand mutates its inputs; outputs stay in the run directory",
            test: "csdr-cli/tests/cli.rs::inputs_are_not_modified",
        },
        ExternalCheck {
            id: "cli.exit_codes",
            module: "cli",
            statement: "exit codes: 0 success, 1 runtime, 2 usage",
            test: "csdr-cli/tests/cli.rs::exit_codes_per_subcommand",
        },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageEntry {
    pub id: String,
    pub module: String,
    pub statement: String,
    pub check: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub entries: Vec<CoverageEntry>,
    pub duplicates: Vec<String>,
}

impl CoverageReport {
    pub fn is_complete(&self) -> bool {
        self.duplicates.is_empty() && self.entries.iter().all(|e| !e.check.is_empty())
    }

    pub fn summary_text(&self) -> String {
        let mut out = format!("invariant coverage: {} invariants mapped\n", self.entries.len());
        for e in &self.entries {
            out.push_str(&format!("  {:<34} {}\n", e.id, e.check));
        }
        for d in &self.duplicates {
            out.push_str(&format!("  DUPLICATE {d}\n"));
        }
        out
    }
}

pub fn coverage() -> CoverageReport {
    let mut entries: Vec<CoverageEntry> = registry()
        .into_iter()
        .map(|i| CoverageEntry {
            id: i.id.into(),
            module: i.module.into(),
            statement: i.statement.into(),
            check: format!("harness::{}", i.id),
        })
        .collect();
    entries.extend(external_checks().into_iter().map(|x| CoverageEntry {
        id: x.id.into(),
        module: x.module.into(),
        statement: x.statement.into(),
        check: x.test.into(),
    }));
    let mut ids: Vec<&str> = entries.iter().map(|e| e.id.as_str()).collect();
    ids.sort_unstable();
    let duplicates = ids
        .windows(2)
        .filter(|w| w[0] == w[1])
        .map(|w| w[0].to_owned())
        .collect();
    CoverageReport { entries, duplicates }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Runs every registered invariant `repeats` times with derived seeds.
pub fn run_invariant_suite(repeats: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("invariants");
    for inv in registry() {
        for r in 0..repeats {
            let s = Rng::new(seed ^ fnv1a(inv.id)).next_u64().wrapping_add(r as u64);
            report.check(OracleCase::new(s, inv.id, 0.0, "property"), (inv.check)(s));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_invariant_holds() {
        let report = run_invariant_suite(2, 3);
        assert!(report.is_success(), "{}", report.summary_text());
        assert_eq!(report.summaries().len(), registry().len());
    }

    #[test]
    fn coverage_is_one_to_one() {
        let c = coverage();
        assert!(c.is_complete(), "{}", c.summary_text());
        assert_eq!(c.entries.len(), 35);
        for module in ["numeric-core", "text-pipeline", "encoder", "losses", "knn-fusion", "trainer", "retrieval-index", "evaluation"] {
            assert!(c.entries.iter().any(|e| e.module == module), "{module}");
        }
    }

}
