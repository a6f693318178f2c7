//! A complete scoring model: encoder + head + parameters, with
//! checkpoint persistence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::Vocab;
use crate::encoder::{EncoderConfig, EncoderError, EncoderKind, EncoderWiring, Encoded, TokenSequence};
use crate::heads::{
    batch_score_matrix, bi_vector, score_bi, score_enhanced, score_plain_cross, BiAggregation,
    HeadConfig, HeadError, HeadKind, HeadWiring,
};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {msg}")]
    Config { msg: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Full architecture descriptor; two models built from equal configs and
/// seeds are identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub bi_agg: BiAggregation,
    pub max_ctx_len: usize,
    pub max_resp_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.max_ctx_len < 2 || self.max_resp_len < 2 {
            return Err(ModelError::Config {
                msg: "max_ctx_len and max_resp_len must be at least 2".into(),
            });
        }
        if self.encoder.kind == EncoderKind::Transformer {
            let needed = match self.head.kind {
                HeadKind::PlainCross => self.joint_len(),
                _ => self.max_ctx_len.max(self.max_resp_len),
            };
            if self.encoder.max_pos < needed {
                return Err(ModelError::Config {
                    msg: format!(
                        "positional table {} shorter than longest input {needed}",
                        self.encoder.max_pos
                    ),
                });
            }
        }
        Ok(())
    }

    /// Padded length of the joint `[CLS] ctx [SEP] resp` input.
    pub fn joint_len(&self) -> usize {
        self.max_ctx_len + self.max_resp_len
    }

    /// Desk-scale transformer: d=32, 2 layers, 2 heads, FFN 64.
    pub fn desk_transformer(
        vocab_size: usize,
        head: HeadConfig,
        max_ctx_len: usize,
        max_resp_len: usize,
    ) -> Self {
        Self {
            encoder: EncoderConfig {
                kind: EncoderKind::Transformer,
                vocab_size,
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                d_ff: 64,
                max_pos: max_ctx_len + max_resp_len,
            },
            bi_agg: BiAggregation::Cls,
            head,
            max_ctx_len,
            max_resp_len,
        }
    }

    /// Desk-scale BiLSTM bi-encoder; aggregates `[CLS] ⊕ max ⊕ mean`.
    pub fn desk_bilstm(vocab_size: usize, max_ctx_len: usize, max_resp_len: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                kind: EncoderKind::Bilstm,
                vocab_size,
                d_model: 32,
                n_layers: 1,
                n_heads: 0,
                d_ff: 0,
                max_pos: 0,
            },
            head: HeadConfig::bi(),
            bi_agg: BiAggregation::ClsMaxMean,
            max_ctx_len,
            max_resp_len,
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: EncoderWiring,
    pub head: HeadWiring,
    pub seed: u64,
}

impl Model {
    /// Builds and initializes a model deterministically from the seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = EncoderWiring::build(&config.encoder, &mut ps, &mut rng)?;
        let head = HeadWiring::build(&config.head, config.encoder.d_model, &mut ps, &mut rng)?;
        Ok(Self {
            config,
            params: ps,
            encoder,
            head,
            seed,
        })
    }

    pub fn encode<'t>(&self, tape: &'t Tape, seq: &TokenSequence) -> Result<Encoded<'t>, ModelError> {
        Ok(self.encoder.encode(&self.config.encoder, &self.params, tape, seq)?)
    }

    /// Joint input for the plain cross-encoder.
    pub fn joint_sequence(
        &self,
        ctx: &TokenSequence,
        resp: &TokenSequence,
    ) -> Result<TokenSequence, ModelError> {
        Ok(TokenSequence::join(
            ctx,
            resp,
            self.config.joint_len(),
            self.config.encoder.vocab_size,
        )?)
    }

    /// Scores one (context, response) pair on the given tape.
    pub fn score_pair<'t>(
        &self,
        tape: &'t Tape,
        ctx: &TokenSequence,
        resp: &TokenSequence,
    ) -> Result<Var<'t>, ModelError> {
        match &self.head {
            HeadWiring::Bi => {
                let c = self.encode(tape, ctx)?;
                let r = self.encode(tape, resp)?;
                self.score_encoded_pair(tape, &c, &r)
            }
            HeadWiring::Enhanced(_) => {
                let c = self.encode(tape, ctx)?;
                let r = self.encode(tape, resp)?;
                self.score_encoded_pair(tape, &c, &r)
            }
            HeadWiring::PlainCross(w) => {
                let joint = self.joint_sequence(ctx, resp)?;
                let enc = self.encode(tape, &joint)?;
                Ok(score_plain_cross(tape, &self.params, w, &enc)?)
            }
        }
    }

    /// Scores a pair from already-computed encodings (bi and enhanced
    /// heads; the plain cross head has no separate encodings to reuse).
    pub fn score_encoded_pair<'t>(
        &self,
        tape: &'t Tape,
        c: &Encoded<'t>,
        r: &Encoded<'t>,
    ) -> Result<Var<'t>, ModelError> {
        match &self.head {
            HeadWiring::Bi => {
                let cv = bi_vector(tape, c, self.config.bi_agg)?;
                let rv = bi_vector(tape, r, self.config.bi_agg)?;
                Ok(score_bi(cv, rv)?)
            }
            HeadWiring::Enhanced(w) => {
                Ok(score_enhanced(tape, &self.params, &self.config.head, w, c, r)?)
            }
            HeadWiring::PlainCross(_) => Err(ModelError::Head(HeadError::UnsupportedHead {
                kind: HeadKind::PlainCross,
                op: "score_encoded_pair",
            })),
        }
    }

    /// Scores a context against each candidate, as one rank-1 var. The
    /// context is encoded once for heads with separate encodings.
    pub fn score_candidates<'t>(
        &self,
        tape: &'t Tape,
        ctx: &TokenSequence,
        candidates: &[TokenSequence],
    ) -> Result<Var<'t>, ModelError> {
        let mut scores = Vec::with_capacity(candidates.len());
        match &self.head {
            HeadWiring::PlainCross(w) => {
                for cand in candidates {
                    let joint = self.joint_sequence(ctx, cand)?;
                    let enc = self.encode(tape, &joint)?;
                    scores.push(score_plain_cross(tape, &self.params, w, &enc)?);
                }
            }
            _ => {
                let c = self.encode(tape, ctx)?;
                for cand in candidates {
                    let r = self.encode(tape, cand)?;
                    scores.push(self.score_encoded_pair(tape, &c, &r)?);
                }
            }
        }
        Ok(tape.concat(&scores, 0)?)
    }

    /// Candidate scores as plain values (inference only).
    pub fn score_candidates_values(
        &self,
        ctx: &TokenSequence,
        candidates: &[TokenSequence],
    ) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        Ok(self.score_candidates(&tape, ctx, candidates)?.data())
    }

    /// The aggregated bi-encoder vector of one sequence, as values.
    pub fn bi_vector_values(&self, seq: &TokenSequence) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        let enc = self.encode(&tape, seq)?;
        Ok(bi_vector(&tape, &enc, self.config.bi_agg)?.data())
    }

    /// In-batch score matrix over pre-computed encodings.
    pub fn batch_matrix<'t>(
        &self,
        tape: &'t Tape,
        contexts: &[Encoded<'t>],
        responses: &[Encoded<'t>],
    ) -> Result<Var<'t>, ModelError> {
        Ok(batch_score_matrix(
            tape,
            &self.params,
            &self.config.head,
            &self.head,
            self.config.bi_agg,
            contexts,
            responses,
        )?)
    }

    /// Hash binding artifacts (candidate indexes) to this exact model:
    /// config plus every parameter bit.
    pub fn checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_string(&self.config).expect("config serializes"));
        for (name, tensor) in self.params.iter() {
            hasher.update(name.as_bytes());
            for &v in tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
    }
}

/// Validation metrics recorded at save time; reloading and re-evaluating
/// on the same split must reproduce them exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub r1: f64,
    pub mrr: f64,
    pub n: usize,
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Versioned, self-contained model container: architecture, weights,
/// vocabulary, and the training provenance needed to reproduce it.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub vocab_words: Vec<String>,
    params: Vec<SavedParam>,
    pub train_config: Option<crate::train::TrainConfig>,
    pub val_metrics: Option<ValMetrics>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        vocab: &Vocab,
        train_config: Option<crate::train::TrainConfig>,
        val_metrics: Option<ValMetrics>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            seed: model.seed,
            vocab_words: vocab.words().to_vec(),
            params: model
                .params
                .iter()
                .map(|(name, t)| SavedParam {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
            train_config,
            val_metrics,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let body = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, body).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let body = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let ckpt: Checkpoint =
            serde_json::from_str(&body).map_err(|e| ModelError::Checkpoint {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint {
                path: path.display().to_string(),
                msg: format!(
                    "version {} unsupported (expected {CHECKPOINT_VERSION})",
                    ckpt.version
                ),
            });
        }
        Ok(ckpt)
    }

    /// Rebuilds the model and its vocabulary. Saved parameters must
    /// match the architecture's parameter set exactly.
    pub fn instantiate(&self) -> Result<(Model, Vocab), ModelError> {
        let mut model = Model::new(self.config.clone(), self.seed)?;
        if self.params.len() != model.params.len() {
            return Err(ModelError::Config {
                msg: format!(
                    "checkpoint has {} parameters, architecture expects {}",
                    self.params.len(),
                    model.params.len()
                ),
            });
        }
        for saved in &self.params {
            let id = model.params.id_of(&saved.name).ok_or_else(|| ModelError::Config {
                msg: format!("checkpoint parameter {:?} not in architecture", saved.name),
            })?;
            let target = model.params.get_mut(id);
            if target.shape() != saved.shape.as_slice() {
                return Err(ModelError::Config {
                    msg: format!(
                        "parameter {:?} shape {:?} does not match architecture {:?}",
                        saved.name,
                        saved.shape,
                        target.shape()
                    ),
                });
            }
            let tensor = Tensor::new(saved.shape.clone(), saved.data.clone())?.with_grad();
            *target = tensor;
        }
        Ok((model, Vocab::from_words(self.vocab_words.clone())))
    }
}
