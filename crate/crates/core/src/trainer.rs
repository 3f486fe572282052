//! Two-phase training: unsupervised SimCSE pre-training over a sentence
//! corpus, then supervised fine-tuning on labeled pairs. Both phases use
//! Adam with linear warmup followed by linear decay to `lr_min`.

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderGrads, ForwardTrace};
use crate::error::{Error, Result};
use crate::losses::{
    cosent_loss, cosine_pair_loss, infonce_loss, sbert_head_loss, CosentBatch, CosentConfig,
    SimcseConfig,
};
use crate::numeric::Mat64;
use crate::rng::Rng;
use crate::text::{Corpus, PairExample, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Simcse,
    Cosent,
    CosinePair,
    SbertHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr_peak: 0.01,
            lr_min: 2e-5,
            warmup_fraction: 0.05,
            seed: 0,
            objective: Objective::Cosent,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_peak) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= lr_min <= lr_peak, got {} and {}",
                self.lr_min, self.lr_peak
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig(format!(
                "warmup_fraction {} not in [0, 1)",
                self.warmup_fraction
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then linear decay to `lr_min` at the
/// last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
}

impl LrSchedule {
    /// Warmup lasts `ceil(warmup_fraction * num_examples)` steps, capped at
    /// `total_steps`.
    pub fn new(num_examples: usize, total_steps: usize, config: &TrainConfig) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        let warmup = (config.warmup_fraction * num_examples as f64).ceil() as usize;
        Ok(Self {
            warmup_steps: warmup.min(total_steps),
            total_steps,
            lr_peak: config.lr_peak,
            lr_min: config.lr_min,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.lr_peak * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - 1 - self.warmup_steps;
        if span == 0 {
            return Ok(self.lr_peak);
        }
        let frac = (step - self.warmup_steps) as f64 / span as f64;
        Ok(self.lr_peak * (1.0 - frac) + self.lr_min * frac)
    }
}

/// Adam moments for a list of parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(group_sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (g_idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[g_idx], &mut self.v[g_idx]);
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::DimensionMismatch {
                    expected: m.len(),
                    got: p.len(),
                });
            }
            for i in 0..m.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr_last: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    /// Softmax head weights (2 × 3d) when fine-tuned with `SbertHead`.
    pub head: Option<Mat64>,
    pub history: Vec<EpochRecord>,
}

/// History as JSONL, one record per epoch.
pub fn history_jsonl(history: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

struct Step<'a> {
    encoder: &'a mut Encoder,
    head: Option<&'a mut Mat64>,
    adam: &'a mut Adam,
    grads: EncoderGrads,
    head_grad: Option<Mat64>,
}

impl Step<'_> {
    fn zero(&mut self) {
        self.grads.clear();
        if let Some(h) = self.head_grad.as_mut() {
            h.fill(0.0);
        }
    }

    fn apply(&mut self, lr: f64) -> Result<()> {
        let grads = &self.grads;
        let params = &mut self.encoder.params;
        match (self.head.as_deref_mut(), self.head_grad.as_ref()) {
            (Some(head), Some(hg)) => self.adam.update(
                &mut [
                    params.token_table.as_mut_slice(),
                    params.position_table.as_mut_slice(),
                    head.as_mut_slice(),
                ],
                &[
                    grads.token_table.as_slice(),
                    grads.position_table.as_slice(),
                    hg.as_slice(),
                ],
                lr,
            ),
            _ => self.adam.update(
                &mut [
                    params.token_table.as_mut_slice(),
                    params.position_table.as_mut_slice(),
                ],
                &[grads.token_table.as_slice(), grads.position_table.as_slice()],
                lr,
            ),
        }
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("training loss in epoch {epoch}")))
    }
}

/// Unsupervised SimCSE: each sentence is encoded twice under independent
/// dropout masks; the two views are positives, the rest of the batch
/// negatives.
pub fn pretrain_simcse(
    corpus: &Corpus,
    vocab: &Vocab,
    encoder_config: &EncoderConfig,
    train: &TrainConfig,
    simcse: &SimcseConfig,
) -> Result<TrainOutcome> {
    train.validate()?;
    simcse.validate()?;
    encoder_config.validate()?;
    if corpus.len() < train.batch_size {
        return Err(Error::InvalidArgument(format!(
            "pre-training corpus has {} sentences, fewer than batch_size {}",
            corpus.len(),
            train.batch_size
        )));
    }
    if corpus.sentences.iter().all(|s| s == &corpus.sentences[0]) {
        log::warn!("pre-training corpus is degenerate: all sentences are identical");
    }

    let mut master = Rng::new(train.seed);
    let mut encoder = Encoder::init(vocab, encoder_config.clone(), &mut master.fork())?;
    let mut shuffle_rng = master.fork();
    let mut dropout_rng = master.fork();

    let ids: Vec<Vec<u32>> = corpus
        .sentences
        .iter()
        .map(|s| vocab.encode_ids(s, encoder_config.max_len))
        .collect();
    let n = ids.len();
    let steps_per_epoch = n.div_ceil(train.batch_size);
    let schedule = LrSchedule::new(n, steps_per_epoch * train.epochs, train)?;
    let mut adam = Adam::new(&[
        encoder.params.token_table.as_slice().len(),
        encoder.params.position_table.as_slice().len(),
    ]);

    let mut history = Vec::with_capacity(train.epochs);
    let mut global_step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..train.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let mut n_batches = 0;
        for batch in batches(&order, train.batch_size) {
            let mut views_a = Vec::with_capacity(batch.len());
            let mut views_b = Vec::with_capacity(batch.len());
            let mut traces: Vec<(ForwardTrace, ForwardTrace)> = Vec::with_capacity(batch.len());
            for &i in batch {
                let ((ea, ta), (eb, tb)) = encoder.forward_two_views(&ids[i], &mut dropout_rng)?;
                views_a.push(ea.0);
                views_b.push(eb.0);
                traces.push((ta, tb));
            }
            let out = infonce_loss(
                &Mat64::from_rows(&views_a)?,
                &Mat64::from_rows(&views_b)?,
                simcse.temperature,
            )?;
            check_finite(out.loss, epoch)?;

            let mut step = Step {
                grads: EncoderGrads::zeros_like(&encoder.params),
                encoder: &mut encoder,
                head: None,
                adam: &mut adam,
                head_grad: None,
            };
            step.zero();
            for (r, (ta, tb)) in traces.iter().enumerate() {
                step.encoder.backward(ta, out.grad_a.row(r), &mut step.grads)?;
                step.encoder.backward(tb, out.grad_b.row(r), &mut step.grads)?;
            }
            lr = schedule.lr_at(global_step)?;
            step.apply(lr)?;
            global_step += 1;
            loss_sum += out.loss;
            n_batches += 1;
        }
        let mean_loss = loss_sum / n_batches as f64;
        log::info!("pretrain epoch {epoch}: loss {mean_loss:.6} lr {lr:.3e}");
        history.push(EpochRecord {
            epoch,
            mean_loss,
            lr_last: lr,
        });
    }
    Ok(TrainOutcome {
        encoder,
        head: None,
        history,
    })
}

/// Head weights for the softmax classifier, uniform in [-0.05, 0.05].
pub fn init_head(embed_dim: usize, rng: &mut Rng) -> Mat64 {
    let mut head = Mat64::zeros(2, 3 * embed_dim);
    for v in head.as_mut_slice() {
        *v = rng.uniform(-0.05, 0.05);
    }
    head
}

/// Supervised fine-tuning of `init` on labeled pairs with the configured
/// objective (`cosent`, `cosine_pair` or `sbert_head`).
pub fn finetune(
    init: &Encoder,
    vocab: &Vocab,
    pairs: &[PairExample],
    train: &TrainConfig,
    cosent: &CosentConfig,
) -> Result<TrainOutcome> {
    train.validate()?;
    cosent.validate()?;
    if train.objective == Objective::Simcse {
        return Err(Error::InvalidConfig(
            "simcse is a pre-training objective; fine-tune with cosent, cosine_pair or sbert_head"
                .into(),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    if init.params.vocab_size() != vocab.len() {
        return Err(Error::DimensionMismatch {
            expected: vocab.len(),
            got: init.params.vocab_size(),
        });
    }

    let mut master = Rng::new(train.seed ^ 0x5EED_F17E);
    let mut encoder = init.clone();
    let d = encoder.config.embed_dim;
    let mut head =
        (train.objective == Objective::SbertHead).then(|| init_head(d, &mut master.fork()));
    let mut shuffle_rng = master.fork();
    let mut dropout_rng = master.fork();

    let max_len = encoder.config.max_len;
    let ids: Vec<(Vec<u32>, Vec<u32>)> = pairs
        .iter()
        .map(|p| (vocab.encode_ids(&p.text_a, max_len), vocab.encode_ids(&p.text_b, max_len)))
        .collect();
    let n = pairs.len();
    let steps_per_epoch = n.div_ceil(train.batch_size);
    let schedule = LrSchedule::new(n, steps_per_epoch * train.epochs, train)?;
    let mut sizes = vec![
        encoder.params.token_table.as_slice().len(),
        encoder.params.position_table.as_slice().len(),
    ];
    if let Some(h) = &head {
        sizes.push(h.as_slice().len());
    }
    let mut adam = Adam::new(&sizes);

    let mut history = Vec::with_capacity(train.epochs);
    let mut global_step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..train.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let mut n_batches = 0;
        for batch in batches(&order, train.batch_size) {
            let mut us = Vec::with_capacity(batch.len());
            let mut vs = Vec::with_capacity(batch.len());
            let mut traces = Vec::with_capacity(batch.len());
            for &i in batch {
                let (a, b) = &ids[i];
                let ma = encoder.sample_mask(a.len(), &mut dropout_rng);
                let mb = encoder.sample_mask(b.len(), &mut dropout_rng);
                let (eu, tu) = encoder.forward(a, ma.as_ref())?;
                let (ev, tv) = encoder.forward(b, mb.as_ref())?;
                us.push(eu.0);
                vs.push(ev.0);
                traces.push((tu, tv));
            }
            let labels: Vec<u8> = batch.iter().map(|&i| pairs[i].label).collect();

            let mut step = Step {
                grads: EncoderGrads::zeros_like(&encoder.params),
                encoder: &mut encoder,
                head_grad: head.as_ref().map(|h| Mat64::zeros(h.rows(), h.cols())),
                head: head.as_mut(),
                adam: &mut adam,
            };
            step.zero();
            let scale = 1.0 / batch.len() as f64;
            let batch_loss = match train.objective {
                Objective::Cosent => {
                    if labels.iter().all(|&l| l == labels[0]) {
                        log::debug!("cosent batch with a single label contributes zero loss");
                    }
                    let out = cosent_loss(
                        &CosentBatch::new(Mat64::from_rows(&us)?, Mat64::from_rows(&vs)?, labels)?,
                        cosent.lambda,
                    )?;
                    for (r, (tu, tv)) in traces.iter().enumerate() {
                        step.encoder.backward(tu, out.grad_a.row(r), &mut step.grads)?;
                        step.encoder.backward(tv, out.grad_b.row(r), &mut step.grads)?;
                    }
                    out.loss
                }
                Objective::CosinePair => {
                    let mut total = 0.0;
                    for (r, (tu, tv)) in traces.iter().enumerate() {
                        let out = cosine_pair_loss(&us[r], &vs[r], labels[r])?;
                        total += out.loss;
                        let gu: Vec<f64> = out.grad_u.iter().map(|g| g * scale).collect();
                        let gv: Vec<f64> = out.grad_v.iter().map(|g| g * scale).collect();
                        step.encoder.backward(tu, &gu, &mut step.grads)?;
                        step.encoder.backward(tv, &gv, &mut step.grads)?;
                    }
                    total * scale
                }
                Objective::SbertHead => {
                    let mut total = 0.0;
                    let head_now = step.head.as_deref().expect("head exists for sbert_head").clone();
                    for (r, (tu, tv)) in traces.iter().enumerate() {
                        let out = sbert_head_loss(&us[r], &vs[r], &head_now, labels[r])?;
                        total += out.loss;
                        let gu: Vec<f64> = out.grad_u.iter().map(|g| g * scale).collect();
                        let gv: Vec<f64> = out.grad_v.iter().map(|g| g * scale).collect();
                        step.encoder.backward(tu, &gu, &mut step.grads)?;
                        step.encoder.backward(tv, &gv, &mut step.grads)?;
                        let hg = step.head_grad.as_mut().expect("head gradient");
                        crate::numeric::axpy(scale, out.grad_head.as_slice(), hg.as_mut_slice());
                    }
                    total * scale
                }
                Objective::Simcse => unreachable!("rejected above"),
            };
            check_finite(batch_loss, epoch)?;
            lr = schedule.lr_at(global_step)?;
            step.apply(lr)?;
            global_step += 1;
            loss_sum += batch_loss;
            n_batches += 1;
        }
        let mean_loss = loss_sum / n_batches as f64;
        log::info!("finetune epoch {epoch}: loss {mean_loss:.6} lr {lr:.3e}");
        history.push(EpochRecord {
            epoch,
            mean_loss,
            lr_last: lr,
        });
    }
    Ok(TrainOutcome {
        encoder,
        head,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::build_vocab;

    fn schedule(n: usize, epochs: usize) -> LrSchedule {
        let cfg = TrainConfig {
            epochs,
            ..TrainConfig::default()
        };
        LrSchedule::new(n, n.div_ceil(cfg.batch_size) * epochs, &cfg).unwrap()
    }

    #[test]
    fn warmup_is_five_percent_of_examples() {
        let s = schedule(1000, 30);
        assert_eq!(s.warmup_steps, 50);
        assert_eq!(s.total_steps, 32 * 30);
        assert_eq!(s.lr_at(50).unwrap(), 0.01);
        assert_eq!(s.lr_at(s.total_steps - 1).unwrap(), 2e-5);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!(s.lr_at(s.total_steps).is_err());
    }

    #[test]
    fn warmup_capped_at_total() {
        let s = schedule(32, 1);
        assert_eq!(s.total_steps, 1);
        assert_eq!(s.warmup_steps, 1);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
    }

    #[test]
    fn adam_zero_gradient_from_rest_is_noop() {
        let mut adam = Adam::new(&[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        adam.update(&mut [&mut p], &[&[0.0; 3]], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.m[0], vec![0.0; 3]);
    }

    #[test]
    fn adam_zero_gradient_decays_moments() {
        let mut adam = Adam::new(&[2]);
        let mut p = vec![0.5, 0.5];
        adam.update(&mut [&mut p], &[&[1.0, -1.0]], 0.1).unwrap();
        let (m, v) = (adam.m[0].clone(), adam.v[0].clone());
        adam.update(&mut [&mut p], &[&[0.0, 0.0]], 0.1).unwrap();
        for i in 0..2 {
            assert_eq!(adam.m[0][i], 0.9 * m[i]);
            assert_eq!(adam.v[0][i], 0.999 * v[i]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(&[1]);
        let mut p = vec![0.0];
        adam.update(&mut [&mut p], &[&[4.0]], 0.01).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
    }

    fn toy_corpus(n: usize) -> Corpus {
        Corpus::new(
            (0..n)
                .map(|i| format!("w{} w{} w{}", i % 7, (i * 3) % 11, (i * 5) % 13))
                .collect(),
        )
    }

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            max_len: 8,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn one_epoch_pretraining_history() {
        let corpus = toy_corpus(32);
        let vocab = build_vocab(corpus.sentences.iter().map(String::as_str), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            objective: Objective::Simcse,
            ..TrainConfig::default()
        };
        let out = pretrain_simcse(&corpus, &vocab, &small_encoder(), &cfg, &SimcseConfig::default())
            .unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.history[0].mean_loss.is_finite());
    }

    #[test]
    fn pretraining_without_dropout_is_finite() {
        let corpus = toy_corpus(40);
        let vocab = build_vocab(corpus.sentences.iter().map(String::as_str), 1).unwrap();
        let enc = EncoderConfig {
            dropout_p: 0.0,
            ..small_encoder()
        };
        let cfg = TrainConfig {
            epochs: 2,
            objective: Objective::Simcse,
            ..TrainConfig::default()
        };
        let out = pretrain_simcse(&corpus, &vocab, &enc, &cfg, &SimcseConfig::default()).unwrap();
        assert!(out.history.iter().all(|r| r.mean_loss.is_finite()));
    }

    #[test]
    fn pretraining_rejects_small_corpus() {
        let corpus = toy_corpus(5);
        let vocab = build_vocab(corpus.sentences.iter().map(String::as_str), 1).unwrap();
        let r = pretrain_simcse(
            &corpus,
            &vocab,
            &small_encoder(),
            &TrainConfig::default(),
            &SimcseConfig::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn cosent_all_positive_batch_has_zero_loss() {
        let corpus = toy_corpus(8);
        let vocab = build_vocab(corpus.sentences.iter().map(String::as_str), 1).unwrap();
        let enc = Encoder::init(&vocab, small_encoder(), &mut Rng::new(1)).unwrap();
        let pairs: Vec<PairExample> = (0..4)
            .map(|i| PairExample::new(&corpus.sentences[i], &corpus.sentences[i + 1], 1).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = finetune(&enc, &vocab, &pairs, &cfg, &CosentConfig::default()).unwrap();
        assert_eq!(out.history[0].mean_loss, 0.0);
    }

    #[test]
    fn finetune_rejects_simcse_objective() {
        let corpus = toy_corpus(4);
        let vocab = build_vocab(corpus.sentences.iter().map(String::as_str), 1).unwrap();
        let enc = Encoder::init(&vocab, small_encoder(), &mut Rng::new(1)).unwrap();
        let pairs = vec![PairExample::new("w1", "w2", 1).unwrap()];
        let cfg = TrainConfig {
            objective: Objective::Simcse,
            ..TrainConfig::default()
        };
        assert!(finetune(&enc, &vocab, &pairs, &cfg, &CosentConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lr_min: 0.1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            warmup_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
