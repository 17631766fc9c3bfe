//! Datasets: tokenization, JSONL ingestion, length filtering and synthetic
//! classification tasks.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::model::PAD_ID;

/// Default training-length cap.
pub const DEFAULT_MAX_TOKENS: usize = 256;

/// Whitespace word tokenizer with byte fallback. Id 0 is padding, ids
/// `1..=W` are the known words, and `W+1..=W+256` are raw bytes. With no
/// words it is a pure byte tokenizer, which is reversible.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub words: Vec<String>,
}

impl Tokenizer {
    pub fn bytes() -> Self {
        Self::default()
    }

    pub fn with_words(words: Vec<String>) -> Self {
        Self { words }
    }

    pub fn vocab_size(&self) -> usize {
        1 + self.words.len() + 256
    }

    fn byte_base(&self) -> usize {
        1 + self.words.len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        if self.words.is_empty() {
            return text.bytes().map(|b| self.byte_base() + b as usize).collect();
        }
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            match self.words.iter().position(|k| k == w) {
                Some(i) => out.push(1 + i),
                None => out.extend(w.bytes().map(|b| self.byte_base() + b as usize)),
            }
        }
        out
    }

    /// Inverse of [`Tokenizer::tokenize`] in byte mode. In word mode words
    /// are re-joined with single spaces and byte runs are kept contiguous.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let base = self.byte_base();
        let mut bytes = Vec::new();
        let mut prev_word = false;
        for &id in ids {
            if id == PAD_ID || id >= self.vocab_size() {
                return Err(Error::Vocabulary {
                    id,
                    vocab_size: self.vocab_size(),
                });
            }
            if id < base {
                if !bytes.is_empty() {
                    bytes.push(b' ');
                }
                bytes.extend_from_slice(self.words[id - 1].as_bytes());
                prev_word = true;
            } else {
                if prev_word {
                    bytes.push(b' ');
                    prev_word = false;
                }
                bytes.push((id - base) as u8);
            }
        }
        String::from_utf8(bytes).map_err(|e| Error::Input(format!("detokenized bytes: {e}")))
    }
}

/// Prefix and suffix wrapped around each text before tokenization.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionTemplate {
    #[serde(default)]
    pub prefix: String,
    #[serde(default)]
    pub suffix: String,
}

impl InstructionTemplate {
    pub fn apply(&self, text: &str) -> String {
        format!("{}{}{}", self.prefix, text, self.suffix)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl LabeledExample {
    pub fn token_length(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub name: String,
    pub num_classes: usize,
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl DatasetSplits {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("a classification task needs at least 2 classes"));
        }
        if self.train.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        if self.dev.is_empty() {
            return Err(Error::config("dev split is empty"));
        }
        let mut seen = BTreeSet::new();
        for (split, xs) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for x in xs {
                if x.label >= self.num_classes {
                    return Err(Error::Input(format!(
                        "{split} example {} has label {} with {} classes",
                        x.id, x.label, self.num_classes
                    )));
                }
                if x.tokens.is_empty() {
                    return Err(Error::Input(format!("{split} example {} is empty", x.id)));
                }
                if !seen.insert(x.id) {
                    return Err(Error::Input(format!("example id {} appears twice", x.id)));
                }
            }
        }
        Ok(())
    }

    /// Largest token id used anywhere.
    pub fn max_token(&self) -> usize {
        self.all().flat_map(|x| x.tokens.iter().copied()).max().unwrap_or(0)
    }

    pub fn max_length(&self) -> usize {
        self.all().map(LabeledExample::token_length).max().unwrap_or(0)
    }

    fn all(&self) -> impl Iterator<Item = &LabeledExample> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    pub fn manifest(&self) -> SplitManifest {
        let part = |xs: &[LabeledExample]| SplitInfo {
            count: xs.len(),
            ids: xs.iter().map(|x| x.id).collect(),
            sha256: {
                let mut h = Sha256::new();
                h.update(serde_json::to_vec(xs).expect("examples serialize"));
                format!("{:x}", h.finalize())
            },
        };
        SplitManifest {
            name: self.name.clone(),
            num_classes: self.num_classes,
            train: part(&self.train),
            dev: part(&self.dev),
            test: part(&self.test),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        io::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_slice(&io::read_file(path)?)?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub count: usize,
    pub ids: Vec<u64>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub num_classes: usize,
    pub train: SplitInfo,
    pub dev: SplitInfo,
    pub test: SplitInfo,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    #[serde(default)]
    id: Option<u64>,
    text: String,
    label: usize,
}

/// Reads `{"text": ..., "label": ...}` lines. Examples without an `id` are
/// numbered from `first_id` by line.
pub fn parse_jsonl(
    src: &str,
    tokenizer: &Tokenizer,
    template: &InstructionTemplate,
    first_id: u64,
) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: JsonlRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("line {}: {e}", i + 1)))?;
        out.push(LabeledExample {
            id: r.id.unwrap_or(first_id + i as u64),
            tokens: tokenizer.tokenize(&template.apply(&r.text)),
            label: r.label,
        });
    }
    Ok(out)
}

pub fn load_jsonl(
    path: &Path,
    tokenizer: &Tokenizer,
    template: &InstructionTemplate,
    first_id: u64,
) -> Result<Vec<LabeledExample>> {
    let bytes = io::read_file(path)?;
    let src = std::str::from_utf8(&bytes)
        .map_err(|e| Error::Encoding(format!("{}: {e}", path.display())))?;
    parse_jsonl(src, tokenizer, template, first_id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub max_tokens: usize,
    pub before: usize,
    pub after: usize,
    pub retained_fraction: f64,
}

/// Drops training examples longer than `max_tokens`; dev and test are left
/// as they are.
pub fn filter_by_length(splits: &DatasetSplits, max_tokens: usize) -> Result<(DatasetSplits, FilterReport)> {
    if max_tokens == 0 {
        return Err(Error::config("max_tokens must be at least 1"));
    }
    let mut out = splits.clone();
    out.train.retain(|x| x.token_length() <= max_tokens);
    if out.train.is_empty() {
        return Err(Error::config(format!(
            "length filter at {max_tokens} tokens removes every training example"
        )));
    }
    let report = FilterReport {
        max_tokens,
        before: splits.train.len(),
        after: out.train.len(),
        retained_fraction: out.train.len() as f64 / splits.train.len().max(1) as f64,
    };
    Ok((out, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Binary: parity of the number of occurrences of one marker token.
    Parity,
    /// Binary: label 1 iff the keyword token occurs.
    KeywordSentiment,
    /// Ternary: the most frequent of three class tokens.
    MajorityToken,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity" => Ok(Self::Parity),
            "keyword-sentiment" => Ok(Self::KeywordSentiment),
            "majority-token" => Ok(Self::MajorityToken),
            _ => Err(Error::config(format!("unknown synthetic task '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, train: usize, dev: usize, test: usize, seed: u64) -> Self {
        Self {
            kind,
            train,
            dev,
            test,
            vocab_size: 64,
            min_len: 4,
            max_len: 12,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            SyntheticKind::Parity | SyntheticKind::KeywordSentiment => 2,
            SyntheticKind::MajorityToken => 3,
        }
    }
}

/// Token id of the keyword in keyword-sentiment, the marker in parity, and
/// the first class token in majority-token.
pub const SPECIAL_TOKEN: usize = 1;
/// Ids below this are never used as filler.
const FIRST_FILLER: usize = 4;

/// Label-balanced synthetic splits; ids are unique across splits.
pub fn make_synthetic_task(spec: &SyntheticSpec) -> Result<DatasetSplits> {
    if spec.vocab_size <= FIRST_FILLER + 1 {
        return Err(Error::config(format!(
            "synthetic tasks need vocab_size > {}",
            FIRST_FILLER + 1
        )));
    }
    if spec.min_len < 3 || spec.min_len > spec.max_len {
        return Err(Error::config(format!(
            "invalid length range {}..={} (minimum 3)",
            spec.min_len, spec.max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.num_classes();
    let mut next_id = 0u64;
    let mut split = |n: usize, rng: &mut ChaCha8Rng| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        labels.shuffle(rng);
        labels
            .into_iter()
            .map(|label| {
                let tokens = synth_tokens(spec, label, rng);
                let id = next_id;
                next_id += 1;
                LabeledExample { id, tokens, label }
            })
            .collect::<Vec<_>>()
    };
    let train = split(spec.train, &mut rng);
    let dev = split(spec.dev, &mut rng);
    let test = split(spec.test, &mut rng);
    let name = match spec.kind {
        SyntheticKind::Parity => "parity",
        SyntheticKind::KeywordSentiment => "keyword-sentiment",
        SyntheticKind::MajorityToken => "majority-token",
    };
    Ok(DatasetSplits {
        name: name.to_string(),
        num_classes: c,
        train,
        dev,
        test,
    })
}

fn filler(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(FIRST_FILLER..spec.vocab_size)
}

fn synth_tokens(spec: &SyntheticSpec, label: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let mut t: Vec<usize> = (0..len).map(|_| filler(spec, rng)).collect();
    match spec.kind {
        SyntheticKind::KeywordSentiment => {
            if label == 1 {
                let hits = rng.gen_range(1..=2.min(len));
                for p in rand::seq::index::sample(rng, len, hits) {
                    t[p] = SPECIAL_TOKEN;
                }
            }
        }
        SyntheticKind::Parity => {
            let max_hits = len.min(4);
            let mut hits = rng.gen_range(0..=max_hits);
            if hits % 2 != label {
                hits = if hits == 0 { 1 } else { hits - 1 };
            }
            for p in rand::seq::index::sample(rng, len, hits) {
                t[p] = SPECIAL_TOKEN;
            }
        }
        SyntheticKind::MajorityToken => {
            // Every position holds a class token; the label's token gets a
            // strict plurality.
            let class_tok = |k: usize| SPECIAL_TOKEN + k;
            let major = len / 2 + 1;
            let mut slots: Vec<usize> = (0..len).collect();
            slots.shuffle(rng);
            for (i, &p) in slots.iter().enumerate() {
                t[p] = if i < major {
                    class_tok(label)
                } else {
                    class_tok((label + rng.gen_range(1..3)) % 3)
                };
            }
        }
    }
    t
}

/// Rule that generated the label, used as a ground-truth classifier.
pub fn oracle_label(kind: SyntheticKind, tokens: &[usize]) -> usize {
    let count = |tok: usize| tokens.iter().filter(|&&t| t == tok).count();
    match kind {
        SyntheticKind::KeywordSentiment => usize::from(count(SPECIAL_TOKEN) > 0),
        SyntheticKind::Parity => count(SPECIAL_TOKEN) % 2,
        SyntheticKind::MajorityToken => (0..3)
            .max_by_key(|&k| count(SPECIAL_TOKEN + k))
            .expect("three classes"),
    }
}
