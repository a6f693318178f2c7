//! Ranking metrics, paired significance testing, the pre-encoded
//! candidate index, and the latency benchmark.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{tokenize, Example, Side, Vocab};
use crate::heads::HeadKind;
use crate::model::{Model, ModelError};
use crate::tape::Tape;
use crate::train::tokenize_examples;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: paired inputs of different lengths ({lhs} vs {rhs})")]
    LengthMismatch {
        op: &'static str,
        lhs: usize,
        rhs: usize,
    },
    #[error("head does not support {op}")]
    UnsupportedHead { op: &'static str },
    #[error("index was built by a different model (checksum {expected:#018x}, model {actual:#018x}); refusing lookup")]
    ChecksumMismatch { expected: u64, actual: u64 },
    #[error("index file {path}: {msg}")]
    BadIndexFile { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("benchmark: {msg}")]
    Benchmark { msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Scores and gold rank for one evaluated example.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub id: String,
    pub scores: Vec<f64>,
    pub gold: usize,
    /// 1-based; ties break toward the lower candidate index.
    pub rank: usize,
}

/// 1-based rank of the gold candidate under descending score, ties
/// resolved to the lower candidate index.
pub fn rank_of_gold(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    let better = scores.iter().filter(|&&s| s > g).count();
    let tied_before = scores[..gold].iter().filter(|&&s| s == g).count();
    1 + better + tied_before
}

/// Scores every example's candidate list and ranks the gold response.
/// Parallel across examples; output order equals dataset order.
pub fn evaluate_model(
    model: &Model,
    vocab: &Vocab,
    data: &[Example],
) -> Result<Vec<RankingResult>, EvalError> {
    let tokenized = tokenize_examples(
        vocab,
        data,
        model.config.max_ctx_len,
        model.config.max_resp_len,
    );
    tokenized
        .par_iter()
        .map(|ex| {
            let scores = model.score_candidates_values(&ex.ctx, &ex.candidates)?;
            let rank = rank_of_gold(&scores, ex.gold);
            Ok(RankingResult {
                id: ex.id.clone(),
                gold: ex.gold,
                rank,
                scores,
            })
        })
        .collect()
}

/// Fraction of examples whose gold response ranked first.
pub fn recall_at_1(results: &[RankingResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty { op: "recall_at_1" });
    }
    let hits = results.iter().filter(|r| r.rank == 1).count();
    Ok(hits as f64 / results.len() as f64)
}

/// Mean reciprocal rank of the gold response.
pub fn mrr(results: &[RankingResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty { op: "mrr" });
    }
    let sum: f64 = results.iter().map(|r| 1.0 / r.rank as f64).sum();
    Ok(sum / results.len() as f64)
}

/// Per-example reciprocal ranks, the granularity the significance test
/// pairs on.
pub fn reciprocal_ranks(results: &[RankingResult]) -> Vec<f64> {
    results.iter().map(|r| 1.0 / r.rank as f64).collect()
}

/// Two-tailed p-value of the paired t statistic over per-example metric
/// differences. Zero-variance differences degenerate to p = 1 when the
/// mean difference is 0 and p = 0 otherwise.
pub fn paired_ttest(per_example_a: &[f64], per_example_b: &[f64]) -> Result<f64, EvalError> {
    if per_example_a.len() != per_example_b.len() {
        return Err(EvalError::LengthMismatch {
            op: "paired_ttest",
            lhs: per_example_a.len(),
            rhs: per_example_b.len(),
        });
    }
    let n = per_example_a.len();
    if n < 2 {
        return Err(EvalError::Empty { op: "paired_ttest" });
    }
    let diffs: Vec<f64> = per_example_a
        .iter()
        .zip(per_example_b)
        .map(|(a, b)| a - b)
        .collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(student_t_two_tailed_p(t, n - 1))
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom, via the
/// regularized incomplete beta function.
pub fn student_t_two_tailed_p(t: f64, df: usize) -> f64 {
    let nu = df as f64;
    betai(nu / 2.0, 0.5, nu / (nu + t * t))
}

// Lanczos approximation, g = 7, 9 coefficients.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    use std::f64::consts::PI;
    if x < 0.5 {
        PI.ln() - (PI * x).sin().abs().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = COEFFS[0];
        for (i, &c) in COEFFS.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

// Continued fraction for the incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let mf = m as f64;
        let m2 = 2.0 * mf;
        let aa = mf * (b - mf) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + mf) * (qab + mf) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

const INDEX_MAGIC: &[u8; 4] = b"DRIX";
const INDEX_VERSION: u32 = 1;

/// Pre-encoded candidate vectors bound to the producing model by
/// checksum.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateIndex {
    pub d: usize,
    pub ids: Vec<String>,
    pub checksum: u64,
    data: Vec<f64>,
}

impl CandidateIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Encodes the context once and scores it against every stored
    /// vector by dot product. Refuses to run against a model other than
    /// the one that built the index.
    pub fn score_context(
        &self,
        model: &Model,
        vocab: &Vocab,
        context: &str,
    ) -> Result<Vec<f64>, EvalError> {
        let actual = model.checksum();
        if actual != self.checksum {
            return Err(EvalError::ChecksumMismatch {
                expected: self.checksum,
                actual,
            });
        }
        let seq = tokenize(context, vocab, model.config.max_ctx_len, Side::Context);
        let ctx_vec = model.bi_vector_values(&seq)?;
        Ok((0..self.len())
            .map(|i| dot(&ctx_vec, self.vector(i)))
            .collect())
    }

    /// Header (magic, version, d, count, checksum, ids) followed by
    /// packed little-endian f64 rows.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.d as u64).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.checksum.to_le_bytes());
        for id in &self.ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let bad = |msg: &str| EvalError::BadIndexFile {
            path: path.display().to_string(),
            msg: msg.to_string(),
        };
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8], EvalError> {
            if at + n > bytes.len() {
                return Err(bad("truncated"));
            }
            let s = &bytes[at..at + n];
            at += n;
            Ok(s)
        };
        if take(4)? != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let d = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let checksum = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let raw = take(len)?;
            ids.push(
                String::from_utf8(raw.to_vec()).map_err(|_| bad("id is not valid utf-8"))?,
            );
        }
        let mut data = Vec::with_capacity(count * d);
        for _ in 0..count * d {
            data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            d,
            ids,
            checksum,
            data,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pre-encodes every response into its bi-encoder vector. Only models
/// with the bi head support an index: other heads cannot score from
/// pre-computed vectors.
pub fn build_candidate_index(
    model: &Model,
    vocab: &Vocab,
    responses: &[(String, String)],
) -> Result<CandidateIndex, EvalError> {
    if model.head.kind() != HeadKind::Bi {
        return Err(EvalError::UnsupportedHead {
            op: "build_candidate_index",
        });
    }
    let vectors: Vec<Vec<f64>> = responses
        .par_iter()
        .map(|(_, text)| {
            let seq = tokenize(text, vocab, model.config.max_resp_len, Side::Response);
            model.bi_vector_values(&seq)
        })
        .collect::<Result<_, _>>()?;
    let d = vectors.first().map_or(bi_vector_width(model), Vec::len);
    Ok(CandidateIndex {
        d,
        ids: responses.iter().map(|(id, _)| id.clone()).collect(),
        checksum: model.checksum(),
        data: vectors.into_iter().flatten().collect(),
    })
}

fn bi_vector_width(model: &Model) -> usize {
    match model.config.bi_agg {
        crate::heads::BiAggregation::Cls => model.config.encoder.d_model,
        crate::heads::BiAggregation::ClsMaxMean => 3 * model.config.encoder.d_model,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyEntry {
    pub candidates: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub head: HeadKind,
    pub entries: Vec<LatencyEntry>,
}

/// Times per-sample scoring, single-threaded, after `warmup` untimed
/// samples. Bi-encoder timing covers context encoding plus K dot
/// products against pre-encoded vectors (candidate encoding happens
/// offline); cross-encoder timing covers K full paired forward passes.
/// Tokenization is outside the timed region for every head.
pub fn benchmark_latency(
    model: &Model,
    vocab: &Vocab,
    data: &[Example],
    candidate_counts: &[usize],
    warmup: usize,
    timed: usize,
) -> Result<LatencyReport, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Empty {
            op: "benchmark_latency",
        });
    }
    if candidate_counts.is_empty() || timed == 0 {
        return Err(EvalError::Benchmark {
            msg: "need at least one candidate count and one timed sample".into(),
        });
    }
    let max_k = *candidate_counts.iter().max().unwrap();
    let pool: Vec<&str> = data
        .iter()
        .flat_map(|ex| ex.candidates.iter().map(String::as_str))
        .take(max_k)
        .collect();
    if pool.len() < max_k {
        return Err(EvalError::Benchmark {
            msg: format!(
                "dataset provides {} candidates, benchmark needs {max_k}",
                pool.len()
            ),
        });
    }
    let pool_seqs: Vec<_> = pool
        .iter()
        .map(|t| tokenize(t, vocab, model.config.max_resp_len, Side::Response))
        .collect();
    let ctx_seqs: Vec<_> = data
        .iter()
        .cycle()
        .take(warmup + timed)
        .map(|ex| tokenize(&ex.context, vocab, model.config.max_ctx_len, Side::Context))
        .collect();

    let head = model.head.kind();
    // candidate vectors are computed offline for the bi head
    let offline_vectors: Option<Vec<Vec<f64>>> = if head == HeadKind::Bi {
        Some(
            pool_seqs
                .iter()
                .map(|s| model.bi_vector_values(s))
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };

    let mut entries = Vec::with_capacity(candidate_counts.len());
    for &k in candidate_counts {
        let mut times_ms = Vec::with_capacity(timed);
        for (i, ctx) in ctx_seqs.iter().enumerate() {
            let start = Instant::now();
            match &offline_vectors {
                Some(vectors) => {
                    let ctx_vec = model.bi_vector_values(ctx)?;
                    let mut best = f64::NEG_INFINITY;
                    for v in &vectors[..k] {
                        let s = dot(&ctx_vec, v);
                        if s > best {
                            best = s;
                        }
                    }
                    std::hint::black_box(best);
                }
                None => {
                    let mut best = f64::NEG_INFINITY;
                    for cand in &pool_seqs[..k] {
                        let tape = Tape::new();
                        let s = model.score_pair(&tape, ctx, cand)?.value()?;
                        if s > best {
                            best = s;
                        }
                    }
                    std::hint::black_box(best);
                }
            }
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            if i >= warmup {
                times_ms.push(elapsed);
            }
        }
        times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
        let median = if times_ms.len() % 2 == 1 {
            times_ms[times_ms.len() / 2]
        } else {
            0.5 * (times_ms[times_ms.len() / 2 - 1] + times_ms[times_ms.len() / 2])
        };
        entries.push(LatencyEntry {
            candidates: k,
            mean_ms: mean,
            median_ms: median,
            samples: times_ms.len(),
        });
    }
    Ok(LatencyReport { head, entries })
}
