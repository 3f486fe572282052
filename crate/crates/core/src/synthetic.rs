//! Seeded synthetic topic data for end-to-end runs.
//!
//! Each topic owns a disjoint block of CJK characters. A sentence is 5 to 12
//! characters drawn from one topic; positive pairs share a topic, negative
//! pairs come from two different topics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::text::{pairs_to_tsv, PairExample};

const FIRST_CODEPOINT: u32 = 0x4E00;
const LAST_CODEPOINT: u32 = 0x9FFF;
const MIN_TOKENS: usize = 5;
const MAX_TOKENS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub vocab_size: usize,
    pub pairs: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(Error::InvalidArgument("need at least 2 topics".into()));
        }
        if self.vocab_size < 10 * self.topics {
            return Err(Error::InvalidArgument(format!(
                "vocab size {} must be at least 10 x topics ({})",
                self.vocab_size,
                10 * self.topics
            )));
        }
        let available = (LAST_CODEPOINT - FIRST_CODEPOINT + 1) as usize;
        if self.vocab_size > available {
            return Err(Error::InvalidArgument(format!(
                "vocab size {} exceeds the {available} available characters",
                self.vocab_size
            )));
        }
        if self.pairs < 10 {
            return Err(Error::InvalidArgument("need at least 10 pairs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    /// Characters owned by each topic.
    pub topic_tokens: Vec<String>,
    pub corpus_topics: Vec<usize>,
    pub pair_topics: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: Vec<String>,
    pub pairs: Vec<PairExample>,
    pub manifest: Manifest,
}

fn sentence(tokens: &[char], rng: &mut Rng) -> String {
    let len = MIN_TOKENS + rng.index(MAX_TOKENS - MIN_TOKENS + 1);
    (0..len).map(|_| tokens[rng.index(tokens.len())]).collect()
}

/// Generates `pairs` labeled pairs (half positive, half negative, shuffled)
/// and a corpus of the same number of unlabeled sentences.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);

    let base = spec.vocab_size / spec.topics;
    let extra = spec.vocab_size % spec.topics;
    let mut next = FIRST_CODEPOINT;
    let topics: Vec<Vec<char>> = (0..spec.topics)
        .map(|t| {
            let n = base + usize::from(t < extra);
            let block = (next..next + n as u32)
                .map(|c| char::from_u32(c).expect("CJK block codepoint"))
                .collect();
            next += n as u32;
            block
        })
        .collect();

    let mut corpus = Vec::with_capacity(spec.pairs);
    let mut corpus_topics = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let t = rng.index(spec.topics);
        corpus.push(sentence(&topics[t], &mut rng));
        corpus_topics.push(t);
    }

    let positives = spec.pairs / 2;
    let mut labels: Vec<u8> = (0..spec.pairs).map(|i| u8::from(i < positives)).collect();
    rng.shuffle(&mut labels);

    let mut pairs = Vec::with_capacity(spec.pairs);
    let mut pair_topics = Vec::with_capacity(spec.pairs);
    for label in labels {
        let ta = rng.index(spec.topics);
        let tb = if label == 1 {
            ta
        } else {
            (ta + 1 + rng.index(spec.topics - 1)) % spec.topics
        };
        let a = sentence(&topics[ta], &mut rng);
        let b = sentence(&topics[tb], &mut rng);
        pairs.push(PairExample::new(a, b, label)?);
        pair_topics.push((ta, tb));
    }

    Ok(SyntheticData {
        corpus,
        pairs,
        manifest: Manifest {
            spec: *spec,
            topic_tokens: topics.iter().map(|t| t.iter().collect()).collect(),
            corpus_topics,
            pair_topics,
        },
    })
}

impl SyntheticData {
    /// Writes `corpus.txt`, `pairs.tsv` and `manifest.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut corpus = self.corpus.join("\n");
        corpus.push('\n');
        fs::write(dir.join("corpus.txt"), corpus)?;
        fs::write(dir.join("pairs.tsv"), pairs_to_tsv(&self.pairs))?;
        let mut manifest = serde_json::to_string_pretty(&self.manifest)?;
        manifest.push('\n');
        fs::write(dir.join("manifest.json"), manifest)?;
        Ok(())
    }
}
