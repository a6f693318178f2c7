//! Token-sequence encoders: a tiny transformer and a BiLSTM.
//!
//! Both turn a padded id sequence into one encoding row per token.
//! Attention keys and recurrent steps are masked to the valid prefix, so
//! padding can never leak into the rows that matter.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CLS_ID, PAD_ID};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid token sequence: {msg}")]
    InvalidSequence { msg: String },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },
    #[error("encoder config: {msg}")]
    InvalidConfig { msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `[CLS]`-prefixed, `[PAD]`-padded token ids with the true length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    valid_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, valid_len: usize, vocab_size: usize) -> Result<Self, EncoderError> {
        let fail = |msg: String| Err(EncoderError::InvalidSequence { msg });
        if ids.is_empty() {
            return fail("no ids".into());
        }
        if valid_len == 0 || valid_len > ids.len() {
            return fail(format!(
                "valid_len {valid_len} outside 1..={}",
                ids.len()
            ));
        }
        if ids[0] != CLS_ID {
            return fail(format!("first id must be [CLS] ({CLS_ID}), got {}", ids[0]));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(EncoderError::Vocabulary { id, vocab_size });
        }
        if ids[valid_len..].iter().any(|&id| id != PAD_ID) {
            return fail("positions past valid_len must be [PAD]".into());
        }
        Ok(Self { ids, valid_len })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    /// Padded length.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `[CLS] ⊕ context ⊕ [SEP] ⊕ response`, padded to `padded_len`.
    /// This is the joint input the plain cross-encoder scores.
    pub fn join(
        ctx: &TokenSequence,
        resp: &TokenSequence,
        padded_len: usize,
        vocab_size: usize,
    ) -> Result<Self, EncoderError> {
        let mut ids = Vec::with_capacity(padded_len);
        ids.push(CLS_ID);
        ids.extend_from_slice(&ctx.ids[1..ctx.valid_len]);
        ids.push(crate::data::SEP_ID);
        ids.extend_from_slice(&resp.ids[1..resp.valid_len]);
        let valid_len = ids.len();
        if valid_len > padded_len {
            return Err(EncoderError::InvalidSequence {
                msg: format!("joined length {valid_len} exceeds padded length {padded_len}"),
            });
        }
        ids.resize(padded_len, PAD_ID);
        Self::new(ids, valid_len, vocab_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Transformer,
    Bilstm,
}

/// Everything that determines encoder weight shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    /// Attention heads per transformer layer (unused by the BiLSTM).
    pub n_heads: usize,
    /// Feed-forward hidden width (unused by the BiLSTM).
    pub d_ff: usize,
    /// Positional-embedding table length (unused by the BiLSTM).
    pub max_pos: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |msg: String| Err(EncoderError::InvalidConfig { msg });
        if self.vocab_size <= PAD_ID.max(CLS_ID) {
            return fail("vocabulary must cover the reserved ids".into());
        }
        if self.d_model == 0 || self.n_layers == 0 {
            return fail("d_model and n_layers must be positive".into());
        }
        match self.kind {
            EncoderKind::Transformer => {
                if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                    return fail(format!(
                        "n_heads {} must divide d_model {}",
                        self.n_heads, self.d_model
                    ));
                }
                if self.d_ff == 0 || self.max_pos == 0 {
                    return fail("d_ff and max_pos must be positive".into());
                }
            }
            EncoderKind::Bilstm => {
                if self.d_model % 2 != 0 {
                    return fail(format!(
                        "BiLSTM d_model {} must be even (two directions)",
                        self.d_model
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-token encodings of one sequence, carrying its valid length.
#[derive(Clone, Copy)]
pub struct Encoded<'t> {
    pub rows: Var<'t>,
    pub valid_len: usize,
}

struct AttentionWiring {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

struct TransformerLayerWiring {
    attn: AttentionWiring,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    w_ff1: ParamId,
    b_ff1: ParamId,
    w_ff2: ParamId,
    b_ff2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

pub struct TransformerWiring {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<TransformerLayerWiring>,
}

struct LstmDirectionWiring {
    w_in: ParamId,
    w_rec: ParamId,
    bias: ParamId,
}

struct BilstmLayerWiring {
    fwd: LstmDirectionWiring,
    bwd: LstmDirectionWiring,
}

pub struct BilstmWiring {
    tok_emb: ParamId,
    layers: Vec<BilstmLayerWiring>,
}

pub enum EncoderWiring {
    Transformer(TransformerWiring),
    Bilstm(BilstmWiring),
}

pub(crate) fn uniform_init(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape fits")
}

pub(crate) fn xavier_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform_init(rng, vec![rows, cols], bound)
}

pub(crate) fn zeros_init(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

impl EncoderWiring {
    /// Registers all encoder weights in `ps` (deterministic order) and
    /// returns the wiring. Embeddings start uniform(-0.05, 0.05),
    /// projections Xavier, biases zero, layer-norm gains one.
    pub fn build(
        cfg: &EncoderConfig,
        ps: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let d = cfg.d_model;
        match cfg.kind {
            EncoderKind::Transformer => {
                let tok_emb = ps.add(
                    "enc.tok_emb",
                    uniform_init(rng, vec![cfg.vocab_size, d], 0.05),
                );
                let pos_emb = ps.add("enc.pos_emb", uniform_init(rng, vec![cfg.max_pos, d], 0.05));
                let mut layers = Vec::with_capacity(cfg.n_layers);
                for l in 0..cfg.n_layers {
                    let p = |suffix: &str| format!("enc.layer{l}.{suffix}");
                    layers.push(TransformerLayerWiring {
                        attn: AttentionWiring {
                            wq: ps.add(p("attn.wq"), xavier_init(rng, d, d)),
                            bq: ps.add(p("attn.bq"), zeros_init(vec![d])),
                            wk: ps.add(p("attn.wk"), xavier_init(rng, d, d)),
                            bk: ps.add(p("attn.bk"), zeros_init(vec![d])),
                            wv: ps.add(p("attn.wv"), xavier_init(rng, d, d)),
                            bv: ps.add(p("attn.bv"), zeros_init(vec![d])),
                            wo: ps.add(p("attn.wo"), xavier_init(rng, d, d)),
                            bo: ps.add(p("attn.bo"), zeros_init(vec![d])),
                        },
                        ln1_gamma: ps.add(p("ln1.gamma"), Tensor::vector(vec![1.0; d])),
                        ln1_beta: ps.add(p("ln1.beta"), zeros_init(vec![d])),
                        w_ff1: ps.add(p("ffn.w1"), xavier_init(rng, d, cfg.d_ff)),
                        b_ff1: ps.add(p("ffn.b1"), zeros_init(vec![cfg.d_ff])),
                        w_ff2: ps.add(p("ffn.w2"), xavier_init(rng, cfg.d_ff, d)),
                        b_ff2: ps.add(p("ffn.b2"), zeros_init(vec![d])),
                        ln2_gamma: ps.add(p("ln2.gamma"), Tensor::vector(vec![1.0; d])),
                        ln2_beta: ps.add(p("ln2.beta"), zeros_init(vec![d])),
                    });
                }
                Ok(Self::Transformer(TransformerWiring {
                    tok_emb,
                    pos_emb,
                    layers,
                }))
            }
            EncoderKind::Bilstm => {
                let tok_emb = ps.add(
                    "enc.tok_emb",
                    uniform_init(rng, vec![cfg.vocab_size, d], 0.05),
                );
                let h = d / 2;
                let mut layers = Vec::with_capacity(cfg.n_layers);
                for l in 0..cfg.n_layers {
                    let mut dir = |name: &str| LstmDirectionWiring {
                        w_in: ps.add(
                            format!("enc.layer{l}.{name}.w_in"),
                            xavier_init(rng, d, 4 * h),
                        ),
                        w_rec: ps.add(
                            format!("enc.layer{l}.{name}.w_rec"),
                            xavier_init(rng, h, 4 * h),
                        ),
                        bias: ps.add(format!("enc.layer{l}.{name}.bias"), zeros_init(vec![4 * h])),
                    };
                    let fwd = dir("fwd");
                    let bwd = dir("bwd");
                    layers.push(BilstmLayerWiring { fwd, bwd });
                }
                Ok(Self::Bilstm(BilstmWiring { tok_emb, layers }))
            }
        }
    }

    /// Encodes one sequence. Deterministic; padded positions never
    /// influence the first `valid_len` output rows.
    pub fn encode<'t>(
        &self,
        cfg: &EncoderConfig,
        ps: &ParamSet,
        tape: &'t Tape,
        seq: &TokenSequence,
    ) -> Result<Encoded<'t>, EncoderError> {
        if let Some(&id) = seq.ids().iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(EncoderError::Vocabulary {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        match self {
            Self::Transformer(w) => w.encode(cfg, ps, tape, seq),
            Self::Bilstm(w) => w.encode(cfg, ps, tape, seq),
        }
    }
}

impl TransformerWiring {
    fn encode<'t>(
        &self,
        cfg: &EncoderConfig,
        ps: &ParamSet,
        tape: &'t Tape,
        seq: &TokenSequence,
    ) -> Result<Encoded<'t>, EncoderError> {
        let m = seq.len();
        if m > cfg.max_pos {
            return Err(EncoderError::InvalidConfig {
                msg: format!(
                    "sequence of padded length {m} exceeds positional table {}",
                    cfg.max_pos
                ),
            });
        }
        let valid = seq.valid_len();
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;

        let tok = tape.param(ps, self.tok_emb).gather_rows(seq.ids())?;
        let positions: Vec<usize> = (0..m).collect();
        let pos = tape.param(ps, self.pos_emb).gather_rows(&positions)?;
        let mut x = tok.add(pos)?;

        for layer in &self.layers {
            let a = &layer.attn;
            let q = x
                .matmul(tape.param(ps, a.wq))?
                .add_row_broadcast(tape.param(ps, a.bq))?;
            let k = x
                .matmul(tape.param(ps, a.wk))?
                .add_row_broadcast(tape.param(ps, a.bk))?;
            let v = x
                .matmul(tape.param(ps, a.wv))?
                .add_row_broadcast(tape.param(ps, a.bv))?;

            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = q.narrow(1, h * dh, dh)?;
                let kh = k.narrow(1, h * dh, dh)?;
                let vh = v.narrow(1, h * dh, dh)?;
                let scores = qh
                    .matmul(kh.transpose()?)?
                    .scale(1.0 / (dh as f64).sqrt());
                let attn = scores.softmax_rows_masked(valid)?;
                heads.push(attn.matmul(vh)?);
            }
            let merged = tape
                .concat(&heads, 1)?
                .matmul(tape.param(ps, a.wo))?
                .add_row_broadcast(tape.param(ps, a.bo))?;
            x = x.add(merged)?.layer_norm(
                tape.param(ps, layer.ln1_gamma),
                tape.param(ps, layer.ln1_beta),
                LN_EPS,
            )?;

            let ff = x
                .matmul(tape.param(ps, layer.w_ff1))?
                .add_row_broadcast(tape.param(ps, layer.b_ff1))?
                .relu()
                .matmul(tape.param(ps, layer.w_ff2))?
                .add_row_broadcast(tape.param(ps, layer.b_ff2))?;
            x = x.add(ff)?.layer_norm(
                tape.param(ps, layer.ln2_gamma),
                tape.param(ps, layer.ln2_beta),
                LN_EPS,
            )?;
        }
        Ok(Encoded {
            rows: x,
            valid_len: valid,
        })
    }
}

impl BilstmWiring {
    fn encode<'t>(
        &self,
        cfg: &EncoderConfig,
        ps: &ParamSet,
        tape: &'t Tape,
        seq: &TokenSequence,
    ) -> Result<Encoded<'t>, EncoderError> {
        let m = seq.len();
        let valid = seq.valid_len();
        let d = cfg.d_model;
        let h = d / 2;

        let mut x = tape.param(ps, self.tok_emb).gather_rows(seq.ids())?;
        for layer in &self.layers {
            let fwd = run_direction(tape, ps, &layer.fwd, x, valid, h, false)?;
            let bwd = run_direction(tape, ps, &layer.bwd, x, valid, h, true)?;
            let mut rows = Vec::with_capacity(m);
            for t in 0..valid {
                rows.push(tape.concat(&[fwd[t], bwd[t]], 1)?);
            }
            for _ in valid..m {
                rows.push(tape.zeros(vec![1, d]));
            }
            x = tape.concat(&rows, 0)?;
        }
        Ok(Encoded {
            rows: x,
            valid_len: valid,
        })
    }
}

/// One LSTM direction over the valid prefix. Returns the hidden state
/// per timestep, indexed by position (not visit order).
fn run_direction<'t>(
    tape: &'t Tape,
    ps: &ParamSet,
    w: &LstmDirectionWiring,
    x: Var<'t>,
    valid: usize,
    h: usize,
    reverse: bool,
) -> Result<Vec<Var<'t>>, EncoderError> {
    let w_in = tape.param(ps, w.w_in);
    let w_rec = tape.param(ps, w.w_rec);
    let bias = tape.param(ps, w.bias);
    let mut hidden = tape.zeros(vec![1, h]);
    let mut cell = tape.zeros(vec![1, h]);
    let mut out: Vec<Option<Var<'t>>> = vec![None; valid];
    let steps: Vec<usize> = if reverse {
        (0..valid).rev().collect()
    } else {
        (0..valid).collect()
    };
    for t in steps {
        let x_t = x.narrow(0, t, 1)?;
        let z = x_t
            .matmul(w_in)?
            .add(hidden.matmul(w_rec)?)?
            .add_row_broadcast(bias)?;
        let input_gate = z.narrow(1, 0, h)?.sigmoid();
        let forget_gate = z.narrow(1, h, h)?.sigmoid();
        let cand = z.narrow(1, 2 * h, h)?.tanh();
        let output_gate = z.narrow(1, 3 * h, h)?.sigmoid();
        cell = forget_gate
            .hadamard(cell)?
            .add(input_gate.hadamard(cand)?)?;
        hidden = output_gate.hadamard(cell.tanh())?;
        out[t] = Some(hidden);
    }
    Ok(out.into_iter().map(|v| v.expect("all steps visited")).collect())
}

/// Row 0 of the encodings: the `[CLS]` summary vector.
pub fn aggregate_cls<'t>(enc: &Encoded<'t>) -> Result<Var<'t>, TensorError> {
    enc.rows.row(0)
}

/// `[CLS] ⊕ max-pool ⊕ mean-pool` over the valid rows, length `3d`.
pub fn aggregate_cls_max_mean<'t>(
    tape: &'t Tape,
    enc: &Encoded<'t>,
) -> Result<Var<'t>, TensorError> {
    let cls = enc.rows.row(0)?;
    let mx = enc.rows.pool(crate::tape::PoolKind::Max, enc.valid_len)?;
    let mn = enc.rows.pool(crate::tape::PoolKind::Mean, enc.valid_len)?;
    tape.concat(&[cls, mx, mn], 0)
}
