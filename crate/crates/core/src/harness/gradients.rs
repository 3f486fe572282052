//! Finite-difference checks of every analytic gradient.

use crate::encoder::{DropoutMask, Encoder, EncoderConfig, EncoderGrads, EncoderParams, Pooling};
use crate::error::{Error, Result};
use crate::losses::{cosent_loss, cosine_pair_loss, infonce_loss, sbert_head_loss, CosentBatch};
use crate::numeric::{finite_diff_grad, relative_error, Mat64, FD_STEP};
use crate::rng::Rng;

use super::report::{CaseOutcome, OracleCase, SuiteReport};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_TARGETS: [&str; 5] = [
    "infonce",
    "cosine_pair",
    "cosent",
    "sbert_head",
    "encoder_backward",
];
const ORACLE: &str = "central-difference";
const MAX_DIM: usize = 8;
const MAX_BATCH: usize = 4;

/// Analytic and numeric gradients of one random instance, flattened.
#[derive(Debug, Clone)]
pub struct GradientInstance {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn split_mats(x: &[f64], rows: usize, cols: usize) -> Result<(Mat64, Mat64)> {
    let (a, b) = x.split_at(rows * cols);
    Ok((
        Mat64::from_vec(rows, cols, a.to_vec())?,
        Mat64::from_vec(rows, cols, b.to_vec())?,
    ))
}

fn infonce(rng: &mut Rng) -> Result<GradientInstance> {
    let n = 1 + rng.index(MAX_BATCH);
    let d = 2 + rng.index(MAX_DIM - 1);
    let tau = rng.uniform(0.05, 1.0);
    let x = normals(rng, 2 * n * d);
    let (a, b) = split_mats(&x, n, d)?;
    let out = infonce_loss(&a, &b, tau)?;
    let numeric = finite_diff_grad(
        |p| {
            let (a, b) = split_mats(p, n, d)?;
            Ok(infonce_loss(&a, &b, tau)?.loss)
        },
        &x,
        FD_STEP,
    )?;
    let mut analytic = out.grad_a.as_slice().to_vec();
    analytic.extend_from_slice(out.grad_b.as_slice());
    Ok(GradientInstance { analytic, numeric })
}

fn cosine_pair(rng: &mut Rng) -> Result<GradientInstance> {
    let d = 2 + rng.index(MAX_DIM - 1);
    let label = rng.index(2) as u8;
    let x = normals(rng, 2 * d);
    let out = cosine_pair_loss(&x[..d], &x[d..], label)?;
    let numeric = finite_diff_grad(
        |p| Ok(cosine_pair_loss(&p[..d], &p[d..], label)?.loss),
        &x,
        FD_STEP,
    )?;
    let mut analytic = out.grad_u;
    analytic.extend(out.grad_v);
    Ok(GradientInstance { analytic, numeric })
}

fn cosent(rng: &mut Rng) -> Result<GradientInstance> {
    let n = 2 + rng.index(MAX_BATCH - 1);
    let d = 2 + rng.index(MAX_DIM - 1);
    let lambda = rng.uniform(1.0, 20.0);
    let mut labels: Vec<u8> = (0..n).map(|i| if i < 2 { i as u8 } else { rng.index(2) as u8 }).collect();
    rng.shuffle(&mut labels);
    let x = normals(rng, 2 * n * d);
    let loss_at = |p: &[f64]| -> Result<_> {
        let (u, v) = split_mats(p, n, d)?;
        cosent_loss(&CosentBatch::new(u, v, labels.clone())?, lambda)
    };
    let out = loss_at(&x)?;
    let numeric = finite_diff_grad(|p| Ok(loss_at(p)?.loss), &x, FD_STEP)?;
    let mut analytic = out.grad_a.as_slice().to_vec();
    analytic.extend_from_slice(out.grad_b.as_slice());
    Ok(GradientInstance { analytic, numeric })
}

fn sbert_head(rng: &mut Rng) -> Result<GradientInstance> {
    let d = 2 + rng.index(MAX_DIM - 1);
    let label = rng.index(2) as u8;
    let u = normals(rng, d);
    // Keep |u_i - v_i| away from the kink of the absolute value.
    let v: Vec<f64> = u
        .iter()
        .map(|&ui| loop {
            let vi = rng.normal();
            if (ui - vi).abs() > 1e-3 {
                break vi;
            }
        })
        .collect();
    let head: Vec<f64> = normals(rng, 6 * d).into_iter().map(|h| 0.5 * h).collect();
    let mut x = u;
    x.extend(v);
    x.extend(head);
    let loss_at = |p: &[f64]| -> Result<_> {
        let head = Mat64::from_vec(2, 3 * d, p[2 * d..].to_vec())?;
        sbert_head_loss(&p[..d], &p[d..2 * d], &head, label)
    };
    let out = loss_at(&x)?;
    let numeric = finite_diff_grad(|p| Ok(loss_at(p)?.loss), &x, FD_STEP)?;
    let mut analytic = out.grad_u;
    analytic.extend(out.grad_v);
    analytic.extend_from_slice(out.grad_head.as_slice());
    Ok(GradientInstance { analytic, numeric })
}

/// Encoder parameters through a smooth scalar `0.5 Σ c_j e_j² + t · e` of
/// the sentence embedding `e`.
fn encoder_backward(rng: &mut Rng) -> Result<GradientInstance> {
    let d = 2 + rng.index(MAX_DIM - 1);
    let vocab = 4 + rng.index(7);
    let max_len = 6;
    let config = EncoderConfig {
        embed_dim: d,
        max_len,
        dropout_p: [0.0, 0.1, 0.3][rng.index(3)],
        pooling: if rng.index(2) == 0 { Pooling::Mean } else { Pooling::Cls },
        use_position: rng.index(2) == 0,
    };
    let len = 1 + rng.index(max_len);
    let ids: Vec<u32> = (0..len).map(|_| rng.index(vocab) as u32).collect();
    let mask = (config.dropout_p > 0.0)
        .then(|| DropoutMask::generate(rng.next_u64(), len, d, config.dropout_p));
    let c: Vec<f64> = (0..d).map(|_| rng.uniform(0.5, 2.0)).collect();
    let t = normals(rng, d);
    let x = normals(rng, (vocab + max_len) * d);

    let build = |p: &[f64]| -> Result<Encoder> {
        let (tok, pos) = p.split_at(vocab * d);
        Encoder::new(
            config.clone(),
            EncoderParams {
                token_table: Mat64::from_vec(vocab, d, tok.to_vec())?,
                position_table: Mat64::from_vec(max_len, d, pos.to_vec())?,
            },
        )
    };
    let objective = |e: &[f64]| -> f64 {
        e.iter()
            .zip(&c)
            .zip(&t)
            .map(|((e, c), t)| 0.5 * c * e * e + t * e)
            .sum()
    };
    let enc = build(&x)?;
    let (emb, trace) = enc.forward(&ids, mask.as_ref())?;
    let grad_e: Vec<f64> = emb.0.iter().zip(&c).zip(&t).map(|((e, c), t)| c * e + t).collect();
    let mut grads = EncoderGrads::zeros_like(&enc.params);
    enc.backward(&trace, &grad_e, &mut grads)?;
    let numeric = finite_diff_grad(
        |p| Ok(objective(&build(p)?.forward(&ids, mask.as_ref())?.0 .0)),
        &x,
        FD_STEP,
    )?;
    let mut analytic = grads.token_table.as_slice().to_vec();
    analytic.extend_from_slice(grads.position_table.as_slice());
    Ok(GradientInstance { analytic, numeric })
}

/// Rebuilds the instance `target` draws from `seed`.
pub fn gradient_instance(target: &str, seed: u64) -> Result<GradientInstance> {
    let mut rng = Rng::new(seed);
    match target {
        "infonce" => infonce(&mut rng),
        "cosine_pair" => cosine_pair(&mut rng),
        "cosent" => cosent(&mut rng),
        "sbert_head" => sbert_head(&mut rng),
        "encoder_backward" => encoder_backward(&mut rng),
        other => Err(Error::InvalidArgument(format!("unknown gradient target {other:?}"))),
    }
}

/// Compares an instance's gradients under the suite tolerance.
pub fn check_instance(case: OracleCase, instance: Result<GradientInstance>) -> CaseOutcome {
    let mut report = SuiteReport::new("");
    match instance {
        Ok(g) if g.analytic.len() == g.numeric.len() => {
            report.measure(case, relative_error(&g.analytic, &g.numeric));
        }
        Ok(g) => report.check(
            case,
            Err(format!(
                "gradient length {} vs numeric {}",
                g.analytic.len(),
                g.numeric.len()
            )),
        ),
        Err(e) => report.check(case, Err(e.to_string())),
    }
    report.outcomes.pop().expect("one outcome")
}

fn case_seed(base: u64, trial: usize, target: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((trial * GRADIENT_TARGETS.len() + target) as u64)
}

/// `trials` random instances for each loss and for encoder backward.
pub fn run_gradient_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let mut report = SuiteReport::new("gradients");
    for trial in 0..trials {
        for (ti, target) in GRADIENT_TARGETS.iter().enumerate() {
            let s = case_seed(seed, trial, ti);
            let case = OracleCase::new(s, target, GRADIENT_TOLERANCE, ORACLE);
            report.outcomes.push(check_instance(case, gradient_instance(target, s)));
        }
    }
    Ok(report)
}
