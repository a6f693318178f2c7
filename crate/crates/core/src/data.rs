//! Dataset ingestion, vocabulary, tokenization, synthetic data, and run
//! manifests.
//!
//! Datasets are JSONL: one [`Example`] object per line. The tokenizer is
//! whitespace-based with five reserved ids; context truncation keeps the
//! most recent tokens, response truncation keeps the earliest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::TokenSequence;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const TURN_ID: usize = 3;
pub const UNK_ID: usize = 4;
pub const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[TURN]", "[UNK]"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed example: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("example {id}: {msg}")]
    InvalidExample { id: String, msg: String },
    #[error("invalid spec: {msg}")]
    InvalidSpec { msg: String },
    #[error("vocabulary file {path}: {msg}")]
    InvalidVocab { path: String, msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One ranking sample: a conversation context, K candidate responses,
/// and the index of the correct one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub context: String,
    pub candidates: Vec<String>,
    pub gold: usize,
}

impl Example {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.candidates.len() < 2 {
            return Err(DataError::InvalidExample {
                id: self.id.clone(),
                msg: format!("needs at least 2 candidates, got {}", self.candidates.len()),
            });
        }
        if self.gold >= self.candidates.len() {
            return Err(DataError::InvalidExample {
                id: self.id.clone(),
                msg: format!(
                    "gold index {} out of range for {} candidates",
                    self.gold,
                    self.candidates.len()
                ),
            });
        }
        if self.context.trim().is_empty() {
            return Err(DataError::InvalidExample {
                id: self.id.clone(),
                msg: "empty context".into(),
            });
        }
        Ok(())
    }
}

/// Loads a JSONL dataset, validating each example. Blank lines are
/// skipped; an empty file yields an empty list.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[Example]) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut buf = String::new();
    for ex in examples {
        buf.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Whitespace-token vocabulary with five reserved ids. Construction is
/// deterministic: most frequent first, lexicographic tie-break.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from a token stream, capped at `max_size` total ids
    /// (including the 5 reserved ones). Reserved literals appearing in
    /// the corpus map to their reserved ids and are not re-added.
    pub fn build<I, S>(texts: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in text.as_ref().split_whitespace() {
                if RESERVED_TOKENS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        let mut sorted: Vec<(String, usize)> = counts.into_iter().collect();
        sorted.sort_by(|(wa, ca), (wb, cb)| cb.cmp(ca).then_with(|| wa.cmp(wb)));
        let budget = max_size.saturating_sub(RESERVED_TOKENS.len());
        sorted.truncate(budget);
        Self::from_words(sorted.into_iter().map(|(w, _)| w).collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), RESERVED_TOKENS.len() + i))
            .collect();
        Self { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        RESERVED_TOKENS.len() + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Token → id; reserved literals map to reserved ids, everything
    /// unknown maps to `[UNK]`.
    pub fn id_of(&self, token: &str) -> usize {
        if let Some(pos) = RESERVED_TOKENS.iter().position(|r| *r == token) {
            return pos;
        }
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        if id < RESERVED_TOKENS.len() {
            RESERVED_TOKENS[id]
        } else {
            &self.words[id - RESERVED_TOKENS.len()]
        }
    }

    /// One token per line; line number (0-based) + 5 = id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut buf = String::new();
        for w in &self.words {
            buf.push_str(w);
            buf.push('\n');
        }
        fs::write(path, buf).map_err(|e| io_err(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut words = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let w = line.trim();
            if w.is_empty() {
                continue;
            }
            if RESERVED_TOKENS.contains(&w) {
                return Err(DataError::InvalidVocab {
                    path: path.display().to_string(),
                    msg: format!("line {}: reserved token {w:?} listed explicitly", i + 1),
                });
            }
            if !seen.insert(w.to_string()) {
                return Err(DataError::InvalidVocab {
                    path: path.display().to_string(),
                    msg: format!("line {}: duplicate token {w:?}", i + 1),
                });
            }
            words.push(w.to_string());
        }
        Ok(Self::from_words(words))
    }
}

/// Which side of a pair a text is, deciding the truncation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Oldest tokens are dropped; the most recent turns survive.
    Context,
    /// A prefix is kept.
    Response,
}

/// Whitespace tokenization into a `[CLS]`-prefixed, `[PAD]`-padded
/// sequence of exactly `max_len` ids. Degenerate text yields a
/// `[CLS]`-only sequence.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize, side: Side) -> TokenSequence {
    assert!(max_len >= 2, "tokenize requires max_len >= 2");
    let mapped: Vec<usize> = text.split_whitespace().map(|t| vocab.id_of(t)).collect();
    let budget = max_len - 1;
    let kept: &[usize] = if mapped.len() > budget {
        match side {
            Side::Context => &mapped[mapped.len() - budget..],
            Side::Response => &mapped[..budget],
        }
    } else {
        &mapped
    };
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend_from_slice(kept);
    let valid_len = ids.len();
    ids.resize(max_len, PAD_ID);
    TokenSequence::new(ids, valid_len, vocab.vocab_size())
        .expect("tokenizer output satisfies sequence invariants")
}

/// Number of model input tokens a text produces (its tokens plus `[CLS]`).
pub fn input_length(text: &str) -> usize {
    1 + text.split_whitespace().count()
}

/// Smallest length L such that at least `quantile` of the given input
/// lengths are ≤ L (so at most `1 - quantile` get truncated).
pub fn choose_max_len(lengths: &[usize], quantile: f64) -> usize {
    assert!(
        !lengths.is_empty(),
        "choose_max_len requires a non-empty corpus"
    );
    assert!((0.0..=1.0).contains(&quantile));
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let need = ((quantile * sorted.len() as f64).ceil() as usize).max(1);
    sorted[need - 1]
}

/// Parameters for the synthetic topic-mixture generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    /// Total id space, including the 5 reserved ids.
    pub vocab_size: usize,
    pub topics: usize,
    pub tokens_per_turn: usize,
    pub turns_per_context: usize,
    /// Candidates per example (gold + distractors).
    pub candidates: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// Probability that a token is drawn uniformly from the whole
    /// vocabulary instead of the topic block. In [0, 1).
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::InvalidSpec { msg });
        if self.vocab_size <= RESERVED_TOKENS.len() {
            return fail(format!("vocab_size must exceed {}", RESERVED_TOKENS.len()));
        }
        if self.topics < 2 {
            return fail("need at least 2 topics".into());
        }
        if self.vocab_size - RESERVED_TOKENS.len() < self.topics {
            return fail("fewer words than topics".into());
        }
        if self.tokens_per_turn == 0 || self.turns_per_context == 0 {
            return fail("tokens_per_turn and turns_per_context must be positive".into());
        }
        if self.candidates < 2 {
            return fail("need at least 2 candidates".into());
        }
        if self.train_size == 0 || self.valid_size == 0 || self.test_size == 0 {
            return fail("split sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.noise) {
            return fail(format!("noise {} outside [0, 1)", self.noise));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SyntheticData {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    pub warnings: Vec<String>,
}

struct TopicSampler {
    n_words: usize,
    block: usize,
    topics: usize,
    noise: f64,
}

impl TopicSampler {
    fn word(&self, rng: &mut ChaCha12Rng, topic: usize) -> String {
        let i = if rng.gen::<f64>() < self.noise {
            rng.gen_range(0..self.n_words)
        } else {
            topic * self.block + rng.gen_range(0..self.block)
        };
        format!("w{i:03}")
    }

    fn span(&self, rng: &mut ChaCha12Rng, topic: usize, len: usize) -> String {
        (0..len)
            .map(|_| self.word(rng, topic))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn other_topic(&self, rng: &mut ChaCha12Rng, not: usize) -> usize {
        let t = rng.gen_range(0..self.topics - 1);
        if t >= not {
            t + 1
        } else {
            t
        }
    }
}

/// Generates topic-coherent train/valid/test splits. Each context draws
/// a topic; the gold response draws from the same topic's token
/// distribution; distractors draw from other topics; `noise` mixes in
/// uniform draws. Deterministic by seed; split contexts are disjoint by
/// construction.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let mut warnings = Vec::new();
    if spec.candidates > spec.topics {
        warnings.push(format!(
            "candidates ({}) exceed topics ({}): distractor topics will repeat",
            spec.candidates, spec.topics
        ));
    }
    let sampler = TopicSampler {
        n_words: spec.vocab_size - RESERVED_TOKENS.len(),
        block: (spec.vocab_size - RESERVED_TOKENS.len()) / spec.topics,
        topics: spec.topics,
        noise: spec.noise,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut seen_contexts: HashSet<String> = HashSet::new();
    let topic_dist = Uniform::new(0, spec.topics);

    let mut make_split = |name: &str, size: usize| -> Result<Vec<Example>, DataError> {
        let mut out = Vec::with_capacity(size);
        for i in 0..size {
            let mut context = String::new();
            let mut topic = 0;
            let mut ok = false;
            for _attempt in 0..100 {
                topic = topic_dist.sample(&mut rng);
                let turns: Vec<String> = (0..spec.turns_per_context)
                    .map(|_| sampler.span(&mut rng, topic, spec.tokens_per_turn))
                    .collect();
                context = turns.join(" [TURN] ");
                if seen_contexts.insert(context.clone()) {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(DataError::InvalidSpec {
                    msg: format!(
                        "could not generate a fresh context for {name} after 100 attempts; \
                         spec too small for disjoint splits"
                    ),
                });
            }
            let gold = rng.gen_range(0..spec.candidates);
            let mut candidates = Vec::with_capacity(spec.candidates);
            for c in 0..spec.candidates {
                let t = if c == gold {
                    topic
                } else {
                    sampler.other_topic(&mut rng, topic)
                };
                candidates.push(sampler.span(&mut rng, t, spec.tokens_per_turn));
            }
            out.push(Example {
                id: format!("{name}-{i:05}"),
                context,
                candidates,
                gold,
            });
        }
        Ok(out)
    };

    let train = make_split("train", spec.train_size)?;
    let valid = make_split("valid", spec.valid_size)?;
    let test = make_split("test", spec.test_size)?;
    Ok(SyntheticData {
        train,
        valid,
        test,
        warnings,
    })
}

/// Reproducibility record written next to every CLI artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// input path → sha256
    pub inputs: BTreeMap<String, String>,
    /// output path → sha256
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let body = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    f.write_all(body.as_bytes()).map_err(|e| io_err(path, e))?;
    f.write_all(b"\n").map_err(|e| io_err(path, e))
}
