//! Tokenization, vocabulary, pair datasets and train/test splitting.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const RESERVED_TOKENS: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

pub const DEFAULT_MAX_LEN: usize = 64;

fn is_cjk(ch: char) -> bool {
    matches!(
        ch as u32,
        0x4E00..=0x9FFF       // CJK Unified Ideographs
            | 0x3400..=0x4DBF // Extension A
            | 0x20000..=0x2EBEF // Extensions B-F
            | 0x30000..=0x3134F // Extension G
            | 0xF900..=0xFAFF // Compatibility Ideographs
            | 0x2F800..=0x2FA1F
            | 0x3040..=0x30FF // Hiragana, Katakana
            | 0xAC00..=0xD7AF // Hangul syllables
    )
}

fn normalize(text: &str) -> String {
    // NFKC before and after lowercasing: a few lowercase mappings leave
    // sequences that NFKC would recompose.
    let folded: String = text.nfkc().collect::<String>().to_lowercase();
    folded.nfkc().collect()
}

/// Splits text into tokens: one token per CJK character, one per maximal run
/// of other alphanumeric characters. Everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut run = String::new();
    for ch in normalize(text).chars() {
        if is_cjk(ch) {
            if !run.is_empty() {
                tokens.push(std::mem::take(&mut run));
            }
            tokens.push(ch.to_string());
        } else if ch.is_alphanumeric() {
            run.push(ch);
        } else if !run.is_empty() {
            tokens.push(std::mem::take(&mut run));
        }
    }
    if !run.is_empty() {
        tokens.push(run);
    }
    tokens
}

/// Token/id mapping. Ids 0..3 are `[PAD]`, `[UNK]`, `[CLS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary must start with {RESERVED_TOKENS:?}"
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("malformed token {t:?} at id {i}")));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the newline-joined token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        Self::from_tokens(raw.lines().map(str::to_owned).collect()).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: 0,
            message: e.to_string(),
        })
    }

    /// `[CLS]` followed by token ids (UNK for unknown tokens), truncated to `max_len`.
    pub fn encode_ids(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(max_len.min(64));
        ids.push(CLS);
        ids.extend(
            tokenize(text)
                .iter()
                .take(max_len.saturating_sub(1))
                .map(|t| self.id(t).unwrap_or(UNK)),
        );
        ids.truncate(max_len.max(1));
        ids
    }

    /// Space-joined tokens for the non-reserved ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != CLS && id != PAD)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Builds a vocabulary ordered by descending frequency, ties broken by first
/// occurrence.
pub fn build_vocab<'a, I>(texts: I, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if min_freq == 0 {
        return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
    }
    // token -> (count, first occurrence)
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    let mut seen = 0usize;
    let mut n_texts = 0usize;
    for text in texts {
        n_texts += 1;
        for tok in tokenize(text) {
            let next = counts.len();
            let entry = counts.entry(tok).or_insert((0, next));
            entry.0 += 1;
            seen += 1;
        }
    }
    if n_texts == 0 {
        return Err(Error::Empty("vocabulary corpus"));
    }
    if seen == 0 {
        log::warn!("vocabulary corpus produced no tokens");
    }
    let mut ranked: Vec<(String, usize, usize)> = counts
        .into_iter()
        .filter(|(_, (c, _))| *c >= min_freq)
        .map(|(t, (c, first))| (t, c, first))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let tokens = RESERVED_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Labeled sentence pair; label 1 = similar, 0 = dissimilar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairExample {
    pub text_a: String,
    pub text_b: String,
    pub label: u8,
}

impl PairExample {
    pub fn new(text_a: impl Into<String>, text_b: impl Into<String>, label: u8) -> Result<Self> {
        let (text_a, text_b) = (text_a.into(), text_b.into());
        if label > 1 {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
        for t in [&text_a, &text_b] {
            if normalize(t).trim().is_empty() {
                return Err(Error::InvalidArgument("empty text".into()));
            }
        }
        Ok(Self {
            text_a,
            text_b,
            label,
        })
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// Unlabeled sentences in load order.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub sentences: Vec<String>,
    pub provenance: Option<PathBuf>,
}

impl Corpus {
    pub fn new(sentences: Vec<String>) -> Self {
        Self {
            sentences,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let bytes = fs::read(path)?;
    let mut out = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(raw).map_err(|_| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: "invalid UTF-8".into(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if !line.trim().is_empty() {
            out.push((i + 1, line.to_owned()));
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonPair {
    text_a: String,
    text_b: String,
    label: i64,
}

fn parse_pair_line(line: &str) -> std::result::Result<PairExample, String> {
    let (a, b, label) = if line.trim_start().starts_with('{') {
        let rec: JsonPair = serde_json::from_str(line).map_err(|e| format!("bad JSON record: {e}"))?;
        (rec.text_a, rec.text_b, rec.label)
    } else {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(format!("expected 3 tab-separated fields, found {}", fields.len()));
        }
        let label = fields[2]
            .trim()
            .parse::<i64>()
            .map_err(|_| format!("label {:?} is not an integer", fields[2].trim()))?;
        (fields[0].to_owned(), fields[1].to_owned(), label)
    };
    if !(0..=1).contains(&label) {
        return Err("label out of range".into());
    }
    if normalize(&a).trim().is_empty() {
        return Err("missing text_a".into());
    }
    if normalize(&b).trim().is_empty() {
        return Err("missing text_b".into());
    }
    Ok(PairExample {
        text_a: a,
        text_b: b,
        label: label as u8,
    })
}

/// Loads a pair file; each line is either `a<TAB>b<TAB>label` or a JSON object
/// with `text_a`, `text_b`, `label`.
pub fn load_pairs(path: &Path) -> Result<Vec<PairExample>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            parse_pair_line(&line).map_err(|message| Error::Parse {
                path: path.to_owned(),
                line: n,
                message,
            })
        })
        .collect()
}

pub fn pairs_to_tsv(pairs: &[PairExample]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!("{}\t{}\t{}\n", p.text_a, p.text_b, p.label));
    }
    out
}

/// Loads one sentence per line.
pub fn load_sentences(path: &Path) -> Result<Corpus> {
    let sentences = read_lines(path)?.into_iter().map(|(_, l)| l).collect();
    Ok(Corpus {
        sentences,
        provenance: Some(path.to_owned()),
    })
}

/// Seeded shuffle, then the first `ceil(ratio * n)` examples go to train.
/// Both sides are kept non-empty.
pub fn split_pairs<T: Clone>(examples: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = examples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 examples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    // The epsilon keeps e.g. 0.7 * 10 = 7.000000000000001 from rounding up.
    let n_train = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let train = order[..n_train].iter().map(|&i| examples[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| examples[i].clone()).collect();
    Ok((train, test))
}
