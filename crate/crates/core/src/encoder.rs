//! Siamese sentence encoder: token and position embedding tables, inverted
//! dropout and mean/CLS pooling, with exact backpropagation into the tables.
//!
//! Sentences are encoded one at a time by the same [`Encoder`], so both sides
//! of a pair share parameters. Anything implementing [`SentenceEncoder`] can
//! stand in for it at inference time (retrieval, KNN store, evaluation).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Mat64;
use crate::rng::Rng;
use crate::text::{Vocab, DEFAULT_MAX_LEN, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub pooling: Pooling,
    pub use_position: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            max_len: DEFAULT_MAX_LEN,
            dropout_p: 0.1,
            pooling: Pooling::Mean,
            use_position: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::InvalidConfig("embed_dim must be at least 2".into()));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidConfig("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!(
                "dropout_p {} not in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Trainable tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_table: Mat64,
    pub position_table: Mat64,
}

impl EncoderParams {
    pub fn vocab_size(&self) -> usize {
        self.token_table.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.token_table.cols()
    }
}

/// Uniform(-0.05, 0.05) entries; the PAD row is zero.
pub fn init_params(vocab: &Vocab, config: &EncoderConfig, rng: &mut Rng) -> EncoderParams {
    let d = config.embed_dim;
    let mut token_table = Mat64::zeros(vocab.len(), d);
    for v in token_table.as_mut_slice() {
        *v = rng.uniform(-0.05, 0.05);
    }
    token_table.row_mut(PAD as usize).fill(0.0);
    let mut position_table = Mat64::zeros(config.max_len, d);
    for v in position_table.as_mut_slice() {
        *v = rng.uniform(-0.05, 0.05);
    }
    EncoderParams {
        token_table,
        position_table,
    }
}

/// Keep/drop pattern for one sentence, stored as per-element multipliers
/// (0 or `1/(1-p)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    seed: u64,
    p: f64,
    len: usize,
    dim: usize,
    scale: Vec<f64>,
}

impl DropoutMask {
    pub fn generate(seed: u64, len: usize, dim: usize, p: f64) -> Self {
        let mut rng = Rng::new(seed);
        let keep = 1.0 / (1.0 - p);
        let scale = (0..len * dim)
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        Self {
            seed,
            p,
            len,
            dim,
            scale,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    fn at(&self, pos: usize) -> &[f64] {
        &self.scale[pos * self.dim..(pos + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding(pub Vec<f64>);

impl SentenceEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    ids: Vec<u32>,
    mask: Option<DropoutMask>,
    pooling: Pooling,
    use_position: bool,
    dim: usize,
}

/// Dense gradient tables mirroring [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub token_table: Mat64,
    pub position_table: Mat64,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            token_table: Mat64::zeros(params.token_table.rows(), params.token_table.cols()),
            position_table: Mat64::zeros(
                params.position_table.rows(),
                params.position_table.cols(),
            ),
        }
    }

    pub fn clear(&mut self) {
        self.token_table.fill(0.0);
        self.position_table.fill(0.0);
    }
}

/// Inference-time sentence encoding, implemented by anything that can map an
/// id sequence to a dense vector.
pub trait SentenceEncoder {
    fn dim(&self) -> usize;
    fn max_len(&self) -> usize;
    fn embed(&self, ids: &[u32]) -> Result<SentenceEmbedding>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        if params.embed_dim() != config.embed_dim
            || params.position_table.cols() != config.embed_dim
        {
            return Err(Error::DimensionMismatch {
                expected: config.embed_dim,
                got: params.embed_dim(),
            });
        }
        if params.position_table.rows() != config.max_len {
            return Err(Error::DimensionMismatch {
                expected: config.max_len,
                got: params.position_table.rows(),
            });
        }
        Ok(Self { config, params })
    }

    pub fn init(vocab: &Vocab, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = init_params(vocab, &config, rng);
        Self::new(config, params)
    }

    pub fn forward(
        &self,
        ids: &[u32],
        mask: Option<&DropoutMask>,
    ) -> Result<(SentenceEmbedding, ForwardTrace)> {
        let d = self.config.embed_dim;
        if ids.is_empty() {
            return Err(Error::Empty("id sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        let vocab = self.params.vocab_size();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::IdOutOfRange { id, size: vocab });
        }
        if let Some(m) = mask {
            if m.len < ids.len() || m.dim != d {
                return Err(Error::DimensionMismatch {
                    expected: ids.len() * d,
                    got: m.len * m.dim,
                });
            }
        }

        let positions = match self.config.pooling {
            Pooling::Mean => ids.len(),
            Pooling::Cls => 1,
        };
        let mut out = vec![0.0; d];
        for (pos, &id) in ids.iter().enumerate().take(positions) {
            let tok = self.params.token_table.row(id as usize);
            let pe = self.params.position_table.row(pos);
            for j in 0..d {
                let mut x = tok[j];
                if self.config.use_position {
                    x += pe[j];
                }
                if let Some(m) = mask {
                    x *= m.at(pos)[j];
                }
                out[j] += x;
            }
        }
        if positions > 1 {
            let inv = 1.0 / positions as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let trace = ForwardTrace {
            ids: ids.to_vec(),
            mask: mask.cloned(),
            pooling: self.config.pooling,
            use_position: self.config.use_position,
            dim: d,
        };
        Ok((SentenceEmbedding(out), trace))
    }

    /// Draws a fresh dropout mask for `ids` from `rng` (none when p = 0).
    pub fn sample_mask(&self, len: usize, rng: &mut Rng) -> Option<DropoutMask> {
        let seed = rng.next_u64();
        (self.config.dropout_p > 0.0)
            .then(|| DropoutMask::generate(seed, len, self.config.embed_dim, self.config.dropout_p))
    }

    /// Encodes the same sentence twice under independent dropout masks.
    pub fn forward_two_views(
        &self,
        ids: &[u32],
        rng: &mut Rng,
    ) -> Result<((SentenceEmbedding, ForwardTrace), (SentenceEmbedding, ForwardTrace))> {
        let m1 = self.sample_mask(ids.len(), rng);
        let m2 = self.sample_mask(ids.len(), rng);
        Ok((
            self.forward(ids, m1.as_ref())?,
            self.forward(ids, m2.as_ref())?,
        ))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d embedding`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_embedding: &[f64],
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        let d = trace.dim;
        if grad_embedding.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: grad_embedding.len(),
            });
        }
        if grads.token_table.cols() != d
            || grads.token_table.rows() != self.params.vocab_size()
            || grads.position_table.rows() != self.params.position_table.rows()
            || grads.position_table.cols() != d
        {
            return Err(Error::DimensionMismatch {
                expected: self.params.vocab_size() * d,
                got: grads.token_table.rows() * grads.token_table.cols(),
            });
        }
        let positions = match trace.pooling {
            Pooling::Mean => trace.ids.len(),
            Pooling::Cls => 1,
        };
        let inv = 1.0 / positions as f64;
        let mut local = vec![0.0; d];
        for (pos, &id) in trace.ids.iter().enumerate().take(positions) {
            for j in 0..d {
                let m = trace.mask.as_ref().map_or(1.0, |m| m.at(pos)[j]);
                local[j] = grad_embedding[j] * inv * m;
            }
            for (g, l) in grads.token_table.row_mut(id as usize).iter_mut().zip(&local) {
                *g += l;
            }
            if trace.use_position {
                for (g, l) in grads.position_table.row_mut(pos).iter_mut().zip(&local) {
                    *g += l;
                }
            }
        }
        Ok(())
    }
}

impl SentenceEncoder for Encoder {
    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn embed(&self, ids: &[u32]) -> Result<SentenceEmbedding> {
        self.forward(ids, None).map(|(e, _)| e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{cosine_similarity, dot, finite_diff_grad, relative_error, FD_STEP};
    use crate::text::build_vocab;

    fn setup(cfg: EncoderConfig, seed: u64) -> (Vocab, Encoder) {
        let vocab = build_vocab(["a b c d e f g"], 1).unwrap();
        let enc = Encoder::init(&vocab, cfg, &mut Rng::new(seed)).unwrap();
        (vocab, enc)
    }

    fn cfg(pooling: Pooling, use_position: bool, dropout_p: f64) -> EncoderConfig {
        EncoderConfig {
            embed_dim: 6,
            max_len: 8,
            dropout_p,
            pooling,
            use_position,
        }
    }

    #[test]
    fn single_token_mean_is_row() {
        let (_, enc) = setup(cfg(Pooling::Mean, false, 0.0), 1);
        let (e, _) = enc.forward(&[4], None).unwrap();
        assert_eq!(e.0, enc.params.token_table.row(4));
    }

    #[test]
    fn mean_of_two_tokens() {
        let (_, enc) = setup(cfg(Pooling::Mean, false, 0.0), 2);
        let (e, _) = enc.forward(&[3, 5], None).unwrap();
        let (a, b) = (enc.params.token_table.row(3), enc.params.token_table.row(5));
        for j in 0..6 {
            assert_eq!(e.0[j], (a[j] + b[j]) / 2.0);
        }
    }

    #[test]
    fn zero_dropout_gives_identical_views() {
        let (_, enc) = setup(cfg(Pooling::Mean, true, 0.0), 3);
        let ((a, _), (b, _)) = enc.forward_two_views(&[2, 3, 4], &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(cosine_similarity(&a.0, &b.0).unwrap(), 1.0);
    }

    #[test]
    fn dropout_views_are_reproducible_and_distinct() {
        let (_, enc) = setup(cfg(Pooling::Mean, true, 0.1), 3);
        let ids = [2, 3, 4, 5];
        let v1 = enc.forward_two_views(&ids, &mut Rng::new(11)).unwrap();
        let v2 = enc.forward_two_views(&ids, &mut Rng::new(11)).unwrap();
        assert_eq!(v1.0 .0, v2.0 .0);
        assert_eq!(v1.1 .0, v2.1 .0);
        let mut distinct = 0;
        for seed in 0..100 {
            let ((a, _), (b, _)) = enc.forward_two_views(&ids, &mut Rng::new(seed)).unwrap();
            if a != b {
                distinct += 1;
            }
            assert!(cosine_similarity(&a.0, &b.0).unwrap() > 0.0);
        }
        assert!(distinct > 90);
    }

    #[test]
    fn rejects_bad_ids() {
        let (_, enc) = setup(cfg(Pooling::Mean, true, 0.0), 1);
        assert!(matches!(enc.forward(&[99], None), Err(Error::IdOutOfRange { .. })));
        assert!(enc.forward(&[], None).is_err());
        assert!(enc.forward(&[3; 9], None).is_err());
    }

    #[test]
    fn init_pad_row_zero_and_deterministic() {
        let (vocab, enc) = setup(EncoderConfig::default(), 9);
        assert!(enc.params.token_table.row(PAD as usize).iter().all(|&v| v == 0.0));
        let again = Encoder::init(&vocab, EncoderConfig::default(), &mut Rng::new(9)).unwrap();
        assert_eq!(enc, again);
        assert!(enc
            .params
            .token_table
            .as_slice()
            .iter()
            .all(|v| (-0.05..=0.05).contains(v)));
    }

    #[test]
    fn init_mean_within_three_sigma() {
        let tokens: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
        let vocab = build_vocab(tokens.iter().map(String::as_str), 1).unwrap();
        let p = init_params(&vocab, &EncoderConfig::default(), &mut Rng::new(4));
        let xs = p.token_table.as_slice();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        // Var of U(-a, a) is a^2 / 3.
        let sigma = (0.05f64.powi(2) / 3.0).sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} sigma {sigma}");
    }

    #[test]
    fn mean_pooling_gradient_spreads_evenly() {
        let (_, enc) = setup(cfg(Pooling::Mean, false, 0.0), 1);
        let (_, trace) = enc.forward(&[3, 4, 5], None).unwrap();
        let g = vec![0.3, -0.6, 0.9, 0.0, 1.2, -1.5];
        let mut grads = EncoderGrads::zeros_like(&enc.params);
        enc.backward(&trace, &g, &mut grads).unwrap();
        for id in [3, 4, 5] {
            for (got, want) in grads.token_table.row(id).iter().zip(&g) {
                assert!((got - want / 3.0).abs() < 1e-15);
            }
        }
        assert!(grads.position_table.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cls_pooling_touches_only_position_zero() {
        let (_, enc) = setup(cfg(Pooling::Cls, true, 0.0), 1);
        let (_, trace) = enc.forward(&[2, 4, 5], None).unwrap();
        let mut grads = EncoderGrads::zeros_like(&enc.params);
        enc.backward(&trace, &[1.0; 6], &mut grads).unwrap();
        assert!(grads.token_table.row(2).iter().all(|&v| v == 1.0));
        assert!(grads.token_table.row(4).iter().all(|&v| v == 0.0));
        assert!(grads.position_table.row(0).iter().all(|&v| v == 1.0));
        assert!(grads.position_table.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let (_, enc) = setup(cfg(Pooling::Mean, true, 0.0), 1);
        let (_, trace) = enc.forward(&[2, 4], None).unwrap();
        let mut grads = EncoderGrads::zeros_like(&enc.params);
        assert!(enc.backward(&trace, &[1.0; 3], &mut grads).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_with_dropout() {
        for (k, pooling) in [Pooling::Mean, Pooling::Cls].into_iter().enumerate() {
            let (_, enc) = setup(cfg(pooling, true, 0.3), k as u64);
            let ids = [2, 5, 3, 5];
            let mask = DropoutMask::generate(7, ids.len(), 6, 0.3);
            let dir = [0.5, -1.0, 0.25, 2.0, -0.75, 1.5];
            let (_, trace) = enc.forward(&ids, Some(&mask)).unwrap();
            let mut grads = EncoderGrads::zeros_like(&enc.params);
            enc.backward(&trace, &dir, &mut grads).unwrap();

            let numeric = finite_diff_grad(
                |flat| {
                    let mut e = enc.clone();
                    e.params.token_table.as_mut_slice().copy_from_slice(flat);
                    Ok(dot(&e.forward(&ids, Some(&mask))?.0 .0, &dir))
                },
                enc.params.token_table.as_slice(),
                FD_STEP,
            )
            .unwrap();
            assert!(relative_error(grads.token_table.as_slice(), &numeric) < 1e-4);
        }
    }
}
