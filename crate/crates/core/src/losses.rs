//! Training objectives over sentence embeddings. Each returns the loss value
//! and its exact gradient with respect to the input embeddings.
//!
//! * [`infonce_loss`]: unsupervised SimCSE objective, in-batch negatives.
//! * [`cosent_loss`]: ranking loss over all (positive, negative) pairs of a batch.
//! * [`cosine_pair_loss`]: per-pair `t(1 - cos) + (1 - t)(1 + cos)`.
//! * [`sbert_head_loss`]: softmax classifier over `[u; v; |u - v|]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine_with_grad, log_sum_exp, stable_softmax, Mat64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimcseConfig {
    pub temperature: f64,
}

impl Default for SimcseConfig {
    fn default() -> Self {
        Self { temperature: 0.05 }
    }
}

impl SimcseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CosentConfig {
    pub lambda: f64,
}

impl Default for CosentConfig {
    fn default() -> Self {
        Self { lambda: 20.0 }
    }
}

impl CosentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Loss over two aligned batches of embeddings.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub grad_a: Mat64,
    pub grad_b: Mat64,
}

fn check_aligned(a: &Mat64, b: &Mat64) -> Result<()> {
    if a.rows() == 0 {
        return Err(Error::Empty("batch"));
    }
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch {
            expected: a.rows() * a.cols(),
            got: b.rows() * b.cols(),
        });
    }
    Ok(())
}

/// Mean over rows of `-log softmax_j(cos(a_i, b_j) / τ)[i]`.
pub fn infonce_loss(views_a: &Mat64, views_b: &Mat64, temperature: f64) -> Result<BatchLoss> {
    check_aligned(views_a, views_b)?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let n = views_a.rows();
    let mut grad_a = Mat64::zeros(n, views_a.cols());
    let mut grad_b = Mat64::zeros(n, views_b.cols());
    let mut total = 0.0;
    let mut logits = vec![0.0; n];
    let mut cos_grads = Vec::with_capacity(n);
    for i in 0..n {
        cos_grads.clear();
        for (j, logit) in logits.iter_mut().enumerate() {
            let (c, ga, gb) = cosine_with_grad(views_a.row(i), views_b.row(j))?;
            *logit = c / temperature;
            cos_grads.push((ga, gb));
        }
        total += log_sum_exp(&logits)? - logits[i];
        let probs = stable_softmax(&logits)?;
        for (j, (ga, gb)) in cos_grads.iter().enumerate() {
            let coef = (probs[j] - if i == j { 1.0 } else { 0.0 }) / (temperature * n as f64);
            for (g, x) in grad_a.row_mut(i).iter_mut().zip(ga) {
                *g += coef * x;
            }
            for (g, x) in grad_b.row_mut(j).iter_mut().zip(gb) {
                *g += coef * x;
            }
        }
    }
    Ok(BatchLoss {
        loss: total / n as f64,
        grad_a,
        grad_b,
    })
}

/// Paired embeddings `u_i, v_i` with binary labels.
#[derive(Debug, Clone)]
pub struct CosentBatch {
    pub u: Mat64,
    pub v: Mat64,
    pub labels: Vec<u8>,
}

impl CosentBatch {
    pub fn new(u: Mat64, v: Mat64, labels: Vec<u8>) -> Result<Self> {
        check_aligned(&u, &v)?;
        if labels.len() != u.rows() {
            return Err(Error::DimensionMismatch {
                expected: u.rows(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        Ok(Self { u, v, labels })
    }
}

/// `log(1 + Σ exp(z_i))`, accurate when every `z_i` is very negative.
fn log1p_sum_exp(zs: &[f64]) -> Result<f64> {
    let max = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        Ok(zs.iter().map(|z| z.exp()).sum::<f64>().ln_1p())
    } else {
        Ok(max + ((-max).exp() + zs.iter().map(|z| (z - max).exp()).sum::<f64>()).ln())
    }
}

/// CoSENT on precomputed cosines: returns the loss and `d loss / d cos_i`.
/// A batch without both labels contributes zero loss and zero gradient.
pub fn cosent_on_cosines(cos: &[f64], labels: &[u8], lambda: f64) -> Result<(f64, Vec<f64>)> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }
    if cos.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: cos.len(),
            got: labels.len(),
        });
    }
    let n = cos.len();
    let pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| labels[i] == 0).collect();
    let mut dcos = vec![0.0; n];
    if pos.is_empty() || neg.is_empty() {
        return Ok((0.0, dcos));
    }

    // The leading 0 is the "1 +" inside the log.
    let mut terms = Vec::with_capacity(1 + pos.len() * neg.len());
    terms.push(0.0);
    for &p in &pos {
        for &q in &neg {
            terms.push(lambda * (cos[q] - cos[p]));
        }
    }
    let loss = log1p_sum_exp(&terms[1..])?;
    let weights = stable_softmax(&terms)?;
    for (pi, &p) in pos.iter().enumerate() {
        for (qi, &q) in neg.iter().enumerate() {
            let w = weights[1 + pi * neg.len() + qi];
            dcos[q] += lambda * w;
            dcos[p] -= lambda * w;
        }
    }
    Ok((loss, dcos))
}

/// `log(1 + Σ_{p ∈ pos, q ∈ neg} exp(λ (cos_q - cos_p)))`.
pub fn cosent_loss(batch: &CosentBatch, lambda: f64) -> Result<BatchLoss> {
    let n = batch.u.rows();
    let mut cos = Vec::with_capacity(n);
    let mut cos_grads = Vec::with_capacity(n);
    for i in 0..n {
        let (c, gu, gv) = cosine_with_grad(batch.u.row(i), batch.v.row(i))?;
        cos.push(c);
        cos_grads.push((gu, gv));
    }
    let (loss, dcos) = cosent_on_cosines(&cos, &batch.labels, lambda)?;
    let mut grad_a = Mat64::zeros(n, batch.u.cols());
    let mut grad_b = Mat64::zeros(n, batch.v.cols());
    for i in 0..n {
        let (gu, gv) = &cos_grads[i];
        for (g, x) in grad_a.row_mut(i).iter_mut().zip(gu) {
            *g += dcos[i] * x;
        }
        for (g, x) in grad_b.row_mut(i).iter_mut().zip(gv) {
            *g += dcos[i] * x;
        }
    }
    Ok(BatchLoss {
        loss,
        grad_a,
        grad_b,
    })
}

#[derive(Debug, Clone)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

/// `t (1 - cos(u, v)) + (1 - t)(1 + cos(u, v))`.
pub fn cosine_pair_loss(u: &[f64], v: &[f64], label: u8) -> Result<PairLoss> {
    if label > 1 {
        return Err(Error::InvalidArgument("label must be 0 or 1".into()));
    }
    let (c, gu, gv) = cosine_with_grad(u, v)?;
    let (loss, sign) = if label == 1 {
        (1.0 - c, -1.0)
    } else {
        (1.0 + c, 1.0)
    };
    Ok(PairLoss {
        loss,
        grad_u: gu.into_iter().map(|g| sign * g).collect(),
        grad_v: gv.into_iter().map(|g| sign * g).collect(),
    })
}

/// Classifier input `[u; v; |u - v|]`.
pub fn sbert_features(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let mut f = Vec::with_capacity(3 * u.len());
    f.extend_from_slice(u);
    f.extend_from_slice(v);
    f.extend(u.iter().zip(v).map(|(a, b)| (a - b).abs()));
    Ok(f)
}

/// Two-class logits of the softmax head.
pub fn sbert_head_logits(u: &[f64], v: &[f64], head: &Mat64) -> Result<[f64; 2]> {
    let f = sbert_features(u, v)?;
    if head.rows() != 2 || head.cols() != f.len() {
        return Err(Error::DimensionMismatch {
            expected: 2 * f.len(),
            got: head.rows() * head.cols(),
        });
    }
    Ok([
        crate::numeric::dot(head.row(0), &f),
        crate::numeric::dot(head.row(1), &f),
    ])
}

#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub loss: f64,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
    pub grad_head: Mat64,
}

/// Cross-entropy of the softmax head.
pub fn sbert_head_loss(u: &[f64], v: &[f64], head: &Mat64, label: u8) -> Result<HeadLoss> {
    if label > 1 {
        return Err(Error::InvalidArgument("label must be 0 or 1".into()));
    }
    let d = u.len();
    let f = sbert_features(u, v)?;
    let logits = sbert_head_logits(u, v, head)?;
    let loss = log_sum_exp(&logits)? - logits[label as usize];
    let mut dz = stable_softmax(&logits)?;
    dz[label as usize] -= 1.0;

    let mut grad_head = Mat64::zeros(2, 3 * d);
    let mut df = vec![0.0; 3 * d];
    for (k, dzk) in dz.iter().enumerate() {
        for (j, (g, fj)) in grad_head.row_mut(k).iter_mut().zip(&f).enumerate() {
            *g = dzk * fj;
            df[j] += dzk * head.row(k)[j];
        }
    }
    let mut grad_u = df[..d].to_vec();
    let mut grad_v = df[d..2 * d].to_vec();
    for j in 0..d {
        let s = (u[j] - v[j]).signum() * if u[j] == v[j] { 0.0 } else { 1.0 };
        grad_u[j] += df[2 * d + j] * s;
        grad_v[j] -= df[2 * d + j] * s;
    }
    Ok(HeadLoss {
        loss,
        grad_u,
        grad_v,
        grad_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Mat64 {
        Mat64::from_rows(rows).unwrap()
    }

    #[test]
    fn infonce_single_pair_is_zero() {
        let l = infonce_loss(&m(&[&[1.0, 2.0]]), &m(&[&[-3.0, 0.5]]), 0.05).unwrap();
        assert_eq!(l.loss, 0.0);
    }

    #[test]
    fn infonce_two_pair_hand_value() {
        // cos(a1,b1)=1, cos(a1,b2)=0, cos(a2,b2)=1, cos(a2,b1)=0, τ=1:
        // each term is -log(e / (e + 1)) = log(1 + e^-1).
        let a = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = infonce_loss(&a, &a, 1.0).unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((l.loss - expected).abs() < 1e-12);
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn infonce_rejects_zero_rows() {
        let a = m(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(infonce_loss(&a, &a, 1.0), Err(Error::ZeroNorm)));
    }

    #[test]
    fn cosent_empty_cross_product() {
        let u = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = m(&[&[1.0, 1.0], &[1.0, -1.0]]);
        for labels in [vec![1, 1], vec![0, 0]] {
            let b = CosentBatch::new(u.clone(), v.clone(), labels).unwrap();
            let l = cosent_loss(&b, 20.0).unwrap();
            assert_eq!(l.loss, 0.0);
            assert!(l.grad_a.as_slice().iter().all(|&g| g == 0.0));
        }
    }

    fn unit_at(angle_cos: f64) -> [f64; 2] {
        [angle_cos, (1.0 - angle_cos * angle_cos).sqrt()]
    }

    #[test]
    fn cosent_hand_value() {
        // pos cos = 0.8, neg cos = 0.9, λ = 1 → log(1 + e^0.1)
        let u = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let v = m(&[&unit_at(0.8), &unit_at(0.9)]);
        let b = CosentBatch::new(u, v, vec![1, 0]).unwrap();
        let l = cosent_loss(&b, 1.0).unwrap();
        let expected = (1.0 + 0.1f64.exp()).ln();
        assert!((l.loss - expected).abs() < 1e-12);
        assert!((expected - 0.744397).abs() < 1e-6);
    }

    #[test]
    fn cosent_vanishes_for_separated_batch_at_large_lambda() {
        let u = m(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let v = m(&[&unit_at(0.9), &unit_at(0.7), &unit_at(0.1)]);
        let b = CosentBatch::new(u, v, vec![1, 1, 0]).unwrap();
        let l = cosent_loss(&b, 100.0).unwrap();
        assert!(l.loss > 0.0 && l.loss < 1e-20, "{}", l.loss);
        assert!(l.loss <= cosent_loss(&b, 50.0).unwrap().loss);
    }

    #[test]
    fn cosine_pair_examples() {
        let u = [0.3, -1.2, 2.0];
        assert!(cosine_pair_loss(&u, &u, 1).unwrap().loss.abs() < 1e-15);
        assert!((cosine_pair_loss(&u, &u, 0).unwrap().loss - 2.0).abs() < 1e-15);
        let l = cosine_pair_loss(&[1.0, 0.0], &unit_at(0.5), 1).unwrap();
        assert!((l.loss - 0.5).abs() < 1e-12);
        assert!(cosine_pair_loss(&u, &u, 2).is_err());
    }

    #[test]
    fn sbert_head_examples() {
        let head = Mat64::zeros(2, 9);
        let l = sbert_head_loss(&[1.0, 2.0, 3.0], &[-1.0, 0.5, 2.0], &head, 1).unwrap();
        assert!((l.loss - 2f64.ln()).abs() < 1e-15);
        let f = sbert_features(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(&f[4..], &[0.0, 0.0]);
        assert!(sbert_head_loss(&[1.0], &[1.0, 2.0], &head, 0).is_err());
        assert!(sbert_head_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &Mat64::zeros(2, 6), 0).is_err());
    }
}
