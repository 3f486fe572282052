//! Exact top-k cosine retrieval over unit-normalized document embeddings.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::encoder::SentenceEncoder;
use crate::error::{Error, Result};
use crate::numeric::{dot, normalized, Mat64};
use crate::text::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    embeddings: Mat64,
    doc_ids: Vec<usize>,
    texts: Vec<String>,
    /// Input positions that encoded to no tokens and were left out.
    skipped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: usize,
    pub score: f64,
    pub text: String,
}

impl Index {
    /// Builds from already-computed vectors; doc ids are the input positions.
    pub fn from_vectors<R: AsRef<[f64]>>(vectors: &[R], texts: Vec<String>) -> Result<Self> {
        if vectors.len() != texts.len() {
            return Err(Error::DimensionMismatch {
                expected: vectors.len(),
                got: texts.len(),
            });
        }
        let rows = vectors
            .iter()
            .map(|v| normalized(v.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embeddings: Mat64::from_rows(&rows)?,
            doc_ids: (0..rows.len()).collect(),
            texts,
            skipped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn embeddings(&self) -> &Mat64 {
        &self.embeddings
    }

    pub fn doc_ids(&self) -> &[usize] {
        &self.doc_ids
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }

    /// Top `min(k, n)` rows by dot product with a unit query, best first,
    /// ties to the lower row.
    pub fn search(&self, unit_query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Empty("index"));
        }
        if unit_query.len() != self.embeddings.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.embeddings.cols(),
                got: unit_query.len(),
            });
        }
        let mut scored: Vec<(f64, usize)> = self
            .embeddings
            .iter_rows()
            .enumerate()
            .map(|(i, row)| (dot(row, unit_query).clamp(-1.0, 1.0), i))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .map(|(score, i)| Hit {
                doc_id: self.doc_ids[i],
                score,
                text: self.texts[i].clone(),
            })
            .collect())
    }
}

/// Encodes each text without dropout and stores it L2-normalized, in input
/// order. Texts with no tokens are skipped and recorded.
pub fn build_index<E: SentenceEncoder>(texts: &[String], encoder: &E, vocab: &Vocab) -> Result<Index> {
    if texts.is_empty() {
        return Err(Error::Empty("index texts"));
    }
    let mut rows = Vec::with_capacity(texts.len());
    let mut doc_ids = Vec::with_capacity(texts.len());
    let mut kept = Vec::with_capacity(texts.len());
    let mut skipped = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let ids = vocab.encode_ids(text, encoder.max_len());
        if ids.len() <= 1 {
            log::warn!("document {i} has no tokens; skipped");
            skipped.push(i);
            continue;
        }
        rows.push(normalized(&encoder.embed(&ids)?.0)?);
        doc_ids.push(i);
        kept.push(text.clone());
    }
    if rows.is_empty() {
        return Err(Error::Empty("index: every document was empty"));
    }
    Ok(Index {
        embeddings: Mat64::from_rows(&rows)?,
        doc_ids,
        texts: kept,
        skipped,
    })
}

/// Encodes `text` and returns its top-k documents.
pub fn query<E: SentenceEncoder>(
    text: &str,
    index: &Index,
    encoder: &E,
    vocab: &Vocab,
    k: usize,
) -> Result<Vec<Hit>> {
    let ids = vocab.encode_ids(text, encoder.max_len());
    if ids.len() <= 1 {
        return Err(Error::Empty("query has no tokens"));
    }
    index.search(&normalized(&encoder.embed(&ids)?.0)?, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig};
    use crate::rng::Rng;
    use crate::text::build_vocab;

    fn fixture() -> (Vocab, Encoder, Vec<String>) {
        let docs: Vec<String> = ["土壤 水分 数据", "glacier mass balance", "土壤 水分 数据", "大气 温度"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let vocab = build_vocab(docs.iter().map(String::as_str), 1).unwrap();
        let cfg = EncoderConfig {
            embed_dim: 16,
            ..EncoderConfig::default()
        };
        let enc = Encoder::init(&vocab, cfg, &mut Rng::new(5)).unwrap();
        (vocab, enc, docs)
    }

    #[test]
    fn self_retrieval_and_duplicates() {
        let (vocab, enc, docs) = fixture();
        let index = build_index(&docs, &enc, &vocab).unwrap();
        assert_eq!(index.len(), 4);
        for row in index.embeddings().iter_rows() {
            assert!((crate::numeric::l2_norm(row) - 1.0).abs() < 1e-9);
        }
        let hits = query("glacier mass balance", &index, &enc, &vocab, 1).unwrap();
        assert_eq!(hits[0].doc_id, 1);
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        let hits = query("土壤 水分 数据", &index, &enc, &vocab, 2).unwrap();
        assert_eq!(hits.iter().map(|h| h.doc_id).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn k_larger_than_index() {
        let (vocab, enc, docs) = fixture();
        let index = build_index(&docs[..2], &enc, &vocab).unwrap();
        assert_eq!(query("大气", &index, &enc, &vocab, 3).unwrap().len(), 2);
    }

    #[test]
    fn rebuild_is_identical() {
        let (vocab, enc, docs) = fixture();
        assert_eq!(
            build_index(&docs, &enc, &vocab).unwrap(),
            build_index(&docs, &enc, &vocab).unwrap()
        );
    }

    #[test]
    fn empty_docs_are_skipped_and_empty_query_errors() {
        let (vocab, enc, mut docs) = fixture();
        docs.insert(1, "  ... ".into());
        let index = build_index(&docs, &enc, &vocab).unwrap();
        assert_eq!(index.skipped(), &[1]);
        assert_eq!(index.doc_ids(), &[0, 2, 3, 4]);
        assert!(query("!!", &index, &enc, &vocab, 1).is_err());
        assert!(query("大气", &index, &enc, &vocab, 0).is_err());
    }
}
