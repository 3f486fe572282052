//! A trained matcher: encoder, linear classifier and optional neighbor store,
//! scored with classifier/KNN fusion.

use crate::checkpoint::Checkpoint;
use crate::encoder::{Encoder, SentenceEncoder};
use crate::error::Result;
use crate::eval::{best_threshold, PairScorer};
use crate::knn::{fuse, FusionConfig, NeighborStore};
use crate::losses::sbert_head_logits;
use crate::numeric::{cosine_similarity, stable_softmax, Mat64};
use crate::text::{PairExample, Vocab};

/// The linear classifier `F(t)` whose softmax is blended with the KNN vote.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    /// Trained softmax head over `[u; v; |u - v|]`, shape 2 × 3d.
    Head(Mat64),
    /// For encoders trained on cosine objectives: logits `[0, scale (cos - threshold)]`.
    Cosine { threshold: f64, scale: f64 },
}

impl Classifier {
    pub fn logits(&self, u: &[f64], v: &[f64]) -> Result<[f64; 2]> {
        match self {
            Classifier::Head(h) => sbert_head_logits(u, v, h),
            Classifier::Cosine { threshold, scale } => {
                Ok([0.0, scale * (cosine_similarity(u, v)? - threshold)])
            }
        }
    }

    /// Fits the cosine classifier: the threshold is the F1-maximizing cosine
    /// cut on the training pairs.
    pub fn fit_cosine<E: SentenceEncoder>(
        encoder: &E,
        vocab: &Vocab,
        pairs: &[PairExample],
        scale: f64,
    ) -> Result<Self> {
        let scores = pairs
            .iter()
            .map(|p| {
                let u = encoder.embed(&vocab.encode_ids(&p.text_a, encoder.max_len()))?;
                let v = encoder.embed(&vocab.encode_ids(&p.text_b, encoder.max_len()))?;
                cosine_similarity(&u.0, &v.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
        let threshold = match best_threshold(&scores, &labels) {
            Ok((t, _)) => t,
            Err(_) => {
                log::warn!("training pairs carry a single label; cosine classifier threshold set to 0");
                0.0
            }
        };
        Ok(Classifier::Cosine { threshold, scale })
    }
}

/// Everything needed to score a pair of raw texts.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub vocab: Vocab,
    pub encoder: Encoder,
    pub classifier: Option<Classifier>,
    pub store: Option<NeighborStore>,
    pub fusion: FusionConfig,
}

impl ModelBundle {
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self
            .encoder
            .embed(&self.vocab.encode_ids(text, self.encoder.config.max_len))?
            .0)
    }
}

impl PairScorer for ModelBundle {
    /// Fused probability of "similar" when a store is present, the classifier
    /// softmax when only a classifier is present, otherwise raw cosine.
    fn score(&self, text_a: &str, text_b: &str) -> Result<f64> {
        let u = self.embed_text(text_a)?;
        let v = self.embed_text(text_b)?;
        let logits = match &self.classifier {
            Some(c) => c.logits(&u, &v)?,
            None if self.store.is_none() => return cosine_similarity(&u, &v),
            None => Classifier::Cosine {
                threshold: 0.0,
                scale: 1.0,
            }
            .logits(&u, &v)?,
        };
        match &self.store {
            Some(store) => {
                let query: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 0.5 * (a + b)).collect();
                Ok(fuse(&logits, &query, store, &self.fusion)?[1])
            }
            None => Ok(stable_softmax(&logits)?[1]),
        }
    }
}

impl ModelBundle {
    pub fn from_checkpoint(vocab: Vocab, checkpoint: Checkpoint, fusion: FusionConfig) -> Self {
        Self {
            vocab,
            encoder: checkpoint.encoder,
            classifier: checkpoint.classifier,
            store: checkpoint.store,
            fusion,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.clone(),
            classifier: self.classifier.clone(),
            store: self.store.clone(),
        }
    }
}
