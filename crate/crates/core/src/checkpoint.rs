//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "CSDRCKPT"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes
//! payload  f64 token table, f64 position table,
//!          [f64 head 2×3d], [f64 store rows×d, u8 store labels]
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! The header records the encoder config, the vocabulary hash and which
//! optional sections are present. Loading checks the digest before parsing
//! anything, so a truncated or corrupted file yields an error and no state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::knn::NeighborStore;
use crate::model::Classifier;
use crate::numeric::Mat64;
use crate::text::Vocab;

const MAGIC: &[u8; 8] = b"CSDRCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub classifier: Option<Classifier>,
    pub store: Option<NeighborStore>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    encoder: EncoderConfig,
    vocab_hash: String,
    vocab_size: usize,
    classifier: Option<ClassifierHeader>,
    store: Option<StoreHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ClassifierHeader {
    Head,
    Cosine { threshold: f64, scale: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreHeader {
    rows: usize,
    provenance: String,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("payload shorter than header declares".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat64> {
        let values = self.f64s(rows * cols)?;
        Mat64::from_vec(rows, cols, values).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self, vocab: &Vocab) -> Result<Vec<u8>> {
        let params = &self.encoder.params;
        if params.vocab_size() != vocab.len() {
            return Err(Error::DimensionMismatch {
                expected: vocab.len(),
                got: params.vocab_size(),
            });
        }
        let header = Header {
            encoder: self.encoder.config.clone(),
            vocab_hash: vocab.hash(),
            vocab_size: vocab.len(),
            classifier: self.classifier.as_ref().map(|c| match c {
                Classifier::Head(_) => ClassifierHeader::Head,
                Classifier::Cosine { threshold, scale } => ClassifierHeader::Cosine {
                    threshold: *threshold,
                    scale: *scale,
                },
            }),
            store: self.store.as_ref().map(|s| StoreHeader {
                rows: s.len(),
                provenance: s.provenance().to_owned(),
            }),
        };
        let header = serde_json::to_vec(&header)?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        put_f64s(&mut out, params.token_table.as_slice());
        put_f64s(&mut out, params.position_table.as_slice());
        if let Some(Classifier::Head(h)) = &self.classifier {
            put_f64s(&mut out, h.as_slice());
        }
        if let Some(s) = &self.store {
            put_f64s(&mut out, s.embeddings().as_slice());
            out.extend_from_slice(s.labels());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], vocab: &Vocab) -> Result<Self> {
        let min = MAGIC.len() + 4 + 8 + DIGEST_LEN;
        if bytes.len() < min {
            return Err(Error::Checkpoint(format!(
                "file is {} bytes, shorter than the minimum {min}",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint(
                "checksum mismatch (file truncated or corrupted)".into(),
            ));
        }

        let mut r = Reader { buf: body, pos: 12 };
        let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

        let found = vocab.hash();
        if header.vocab_hash != found {
            return Err(Error::VocabHashMismatch {
                expected: header.vocab_hash,
                found,
            });
        }
        let d = header.encoder.embed_dim;
        let token_table = r.mat(header.vocab_size, d)?;
        let position_table = r.mat(header.encoder.max_len, d)?;
        let encoder = Encoder::new(
            header.encoder,
            EncoderParams {
                token_table,
                position_table,
            },
        )?;
        let classifier = match header.classifier {
            None => None,
            Some(ClassifierHeader::Head) => Some(Classifier::Head(r.mat(2, 3 * d)?)),
            Some(ClassifierHeader::Cosine { threshold, scale }) => {
                Some(Classifier::Cosine { threshold, scale })
            }
        };
        let store = match header.store {
            None => None,
            Some(s) => {
                let emb = r.mat(s.rows, d)?;
                let labels = r.take(s.rows)?.to_vec();
                Some(NeighborStore::new(emb, labels, s.provenance)?)
            }
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            encoder,
            classifier,
            store,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, vocab: &Vocab, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes(vocab)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, vocab: &Vocab) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::text::build_vocab;

    fn sample() -> (Vocab, Checkpoint) {
        let vocab = build_vocab(["甲 乙 丙 丁 x y"], 1).unwrap();
        let cfg = EncoderConfig {
            embed_dim: 4,
            max_len: 6,
            ..EncoderConfig::default()
        };
        let encoder = Encoder::init(&vocab, cfg, &mut Rng::new(3)).unwrap();
        let store = NeighborStore::new(
            Mat64::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.5, 0.25, 1e-300]]).unwrap(),
            vec![1, 0],
            "two rows",
        )
        .unwrap();
        let mut head = Mat64::zeros(2, 12);
        head.as_mut_slice()[5] = std::f64::consts::PI;
        (
            vocab,
            Checkpoint {
                encoder,
                classifier: Some(Classifier::Head(head)),
                store: Some(store),
            },
        )
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (vocab, ck) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        save_checkpoint(&ck, &vocab, &path).unwrap();
        let back = load_checkpoint(&path, &vocab).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(&vocab).unwrap(), fs::read(&path).unwrap());

        let plain = Checkpoint {
            classifier: Some(Classifier::Cosine {
                threshold: 0.123456789,
                scale: 20.0,
            }),
            store: None,
            ..ck
        };
        let bytes = plain.to_bytes(&vocab).unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes, &vocab).unwrap(), plain);
    }

    #[test]
    fn wrong_vocab_names_hash() {
        let (vocab, ck) = sample();
        let bytes = ck.to_bytes(&vocab).unwrap();
        let other = build_vocab(["甲 乙 丙 丁 x z"], 1).unwrap();
        let err = Checkpoint::from_bytes(&bytes, &other).unwrap_err();
        assert!(matches!(err, Error::VocabHashMismatch { .. }));
        assert!(err.to_string().contains(&vocab.hash()));
    }

    #[test]
    fn truncation_and_corruption_rejected() {
        let (vocab, ck) = sample();
        let bytes = ck.to_bytes(&vocab).unwrap();
        for cut in [0, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], &vocab).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[100] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, &vocab),
            Err(Error::Checkpoint(_))
        ));
        let mut bad = bytes;
        bad[8] = 9;
        let err = Checkpoint::from_bytes(&bad, &vocab).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
