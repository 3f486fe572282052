//! Classifier/KNN score fusion: `S = (1 - w) softmax(logits) + w KNN(t)`.

use serde::{Deserialize, Serialize};

use crate::encoder::SentenceEncoder;
use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, stable_softmax, Mat64};
use crate::text::{PairExample, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Weight of the KNN vote.
    pub w: f64,
    /// Neighbor count.
    pub k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { w: 0.3, k: 5 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::InvalidConfig(format!("fusion weight {} not in [0, 1]", self.w)));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Labeled embedding memory.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborStore {
    embeddings: Mat64,
    labels: Vec<u8>,
    provenance: String,
}

impl NeighborStore {
    pub fn new(embeddings: Mat64, labels: Vec<u8>, provenance: impl Into<String>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.rows(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("store labels must be 0 or 1".into()));
        }
        Ok(Self {
            embeddings,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &Mat64 {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }
}

/// Similarity-weighted vote of the `k` most cosine-similar stored rows.
/// Negative similarities carry no weight; an all-zero vote is uniform.
pub fn knn_vote(query: &[f64], store: &NeighborStore, k: usize) -> Result<[f64; 2]> {
    if store.is_empty() {
        return Err(Error::Empty("neighbor store"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut scored = store
        .embeddings
        .iter_rows()
        .enumerate()
        .map(|(i, row)| cosine_similarity(query, row).map(|c| (c, i)))
        .collect::<Result<Vec<_>>>()?;
    let k = k.min(scored.len());
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
    }
    let mut votes = [0.0; 2];
    for (c, i) in scored {
        votes[store.labels[i] as usize] += c.max(0.0);
    }
    let total = votes[0] + votes[1];
    if total == 0.0 {
        return Ok([0.5, 0.5]);
    }
    Ok([votes[0] / total, votes[1] / total])
}

/// Convex combination of the classifier softmax and the KNN vote.
pub fn fuse(
    classifier_logits: &[f64; 2],
    query: &[f64],
    store: &NeighborStore,
    config: &FusionConfig,
) -> Result<[f64; 2]> {
    config.validate()?;
    let soft = stable_softmax(classifier_logits)?;
    // The endpoints skip the blend so they reproduce each source exactly.
    if config.w == 0.0 {
        return Ok([soft[0], soft[1]]);
    }
    let vote = knn_vote(query, store, config.k)?;
    if config.w == 1.0 {
        return Ok(vote);
    }
    let w = config.w;
    let s1 = (1.0 - w) * soft[1] + w * vote[1];
    Ok([1.0 - s1, s1])
}

/// Pair representation stored in and queried against the neighbor store:
/// the element-wise mean of both sentence embeddings.
pub fn pair_representation<E: SentenceEncoder>(
    encoder: &E,
    vocab: &Vocab,
    text_a: &str,
    text_b: &str,
) -> Result<Vec<f64>> {
    let u = encoder.embed(&vocab.encode_ids(text_a, encoder.max_len()))?;
    let v = encoder.embed(&vocab.encode_ids(text_b, encoder.max_len()))?;
    Ok(u.0.iter().zip(&v.0).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// One row per training pair, in input order.
pub fn build_store<E: SentenceEncoder>(
    encoder: &E,
    vocab: &Vocab,
    pairs: &[PairExample],
) -> Result<NeighborStore> {
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let rows = pairs
        .iter()
        .map(|p| pair_representation(encoder, vocab, &p.text_a, &p.text_b))
        .collect::<Result<Vec<_>>>()?;
    NeighborStore::new(
        Mat64::from_rows(&rows)?,
        pairs.iter().map(|p| p.label).collect(),
        format!("{} training pairs", pairs.len()),
    )
}
