//! Losses, the Adam optimizer, teacher-logit caching, and the training
//! loop.
//!
//! Two-phase distillation: train the teacher, cache its per-candidate
//! logits with [`cache_teacher_logits`], then train the student with
//! `α·CE + (1−α)·MSE(teacher logits, student logits)`. With in-batch
//! negatives the CE term comes from the B×B score matrix (diagonal
//! gold); the distillation term always compares logits over the
//! example's own candidate list, so teacher and student vectors align.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Example, Vocab};
use crate::encoder::TokenSequence;
use crate::eval::{self, EvalError};
use crate::heads::HeadKind;
use crate::model::{Model, ModelError, ValMetrics};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {msg}")]
    Config { msg: String },
    #[error("train data: {msg}")]
    Data { msg: String },
    #[error("loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativesMode {
    /// Other examples' gold responses within the mini-batch act as
    /// negatives (B×B matrix, diagonal gold).
    InBatch,
    /// Each example is scored against its own candidate list.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the cross-entropy term; `1 - alpha` weighs distillation.
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub negatives: NegativesMode,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Early stopping: epochs without validation R@1 improvement before
    /// training stops. `None` always runs all epochs.
    pub patience: Option<usize>,
}

impl TrainConfig {
    /// Defaults for transformer-based models.
    pub fn for_transformer() -> Self {
        Self {
            alpha: 0.5,
            lr: 5e-5,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            negatives: NegativesMode::InBatch,
            clip_norm: Some(1.0),
            patience: Some(3),
        }
    }

    /// Defaults for the BiLSTM student.
    pub fn for_bilstm() -> Self {
        Self {
            lr: 1e-3,
            ..Self::for_transformer()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Config {
                msg: format!("alpha {} outside [0, 1]", self.alpha),
            });
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainError::Config {
                msg: format!("learning rate {} must be positive", self.lr),
            });
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config {
                msg: "batch_size and epochs must be positive".into(),
            });
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(TrainError::Config {
                    msg: format!("clip_norm {c} must be positive"),
                });
            }
        }
        Ok(())
    }
}

/// Cached teacher logits for one example's candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationRecord {
    pub id: String,
    pub teacher_logits: Vec<f64>,
}

/// One record per line, floats at full round-trip precision.
pub fn save_records(
    path: impl AsRef<Path>,
    records: &[DistillationRecord],
) -> Result<(), TrainError> {
    let path = path.as_ref();
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).expect("records serialize"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<DistillationRecord>, TrainError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DistillationRecord =
            serde_json::from_str(&line).map_err(|e| TrainError::Data {
                msg: format!("{}:{}: malformed record: {e}", path.display(), i + 1),
            })?;
        if rec.teacher_logits.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Data {
                msg: format!("record {:?} has non-finite logits", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Cross entropy of a score vector against the gold index:
/// `-log softmax(scores)[target]`, numerically stabilized.
pub fn ce_loss<'t>(scores: Var<'t>, target: usize) -> Result<Var<'t>, TensorError> {
    let k = scores.shape()[0];
    if target >= k {
        return Err(TensorError::IndexOutOfRange {
            op: "ce_loss",
            index: target,
            len: k,
        });
    }
    scores.logsumexp()?.sub(scores.pick(target)?)
}

/// Mean squared error between teacher logits (constants) and student
/// logits: `‖z_T − z_S‖² / K`.
pub fn distill_loss<'t>(
    tape: &'t Tape,
    teacher_logits: &[f64],
    student_logits: Var<'t>,
) -> Result<Var<'t>, TensorError> {
    let k = student_logits.shape();
    if k.len() != 1 || k[0] != teacher_logits.len() {
        return Err(TensorError::ShapeMismatch {
            op: "distill_loss",
            lhs: vec![teacher_logits.len()],
            rhs: k,
        });
    }
    let teacher = tape.vector(teacher_logits);
    let diff = student_logits.sub(teacher)?;
    Ok(diff
        .hadamard(diff)?
        .sum()
        .scale(1.0 / teacher_logits.len() as f64))
}

/// `α·L_CE + (1−α)·L_distill`, exactly.
pub fn combined_loss<'t>(
    alpha: f64,
    l_ce: Var<'t>,
    l_distill: Var<'t>,
) -> Result<Var<'t>, TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Config {
            msg: format!("alpha {alpha} outside [0, 1]"),
        });
    }
    Ok(l_ce.scale(alpha).add(l_distill.scale(1.0 - alpha))?)
}

/// First/second moment buffers and step counter for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params
            .ids()
            .map(|id| vec![0.0; params.get(id).numel()])
            .collect::<Vec<_>>();
        Self {
            step: 0,
            m: m.clone(),
            v: m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter's current
/// gradient buffer.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, id) in params.ids().enumerate().collect::<Vec<_>>() {
        let tensor = params.get_mut(id);
        let grads: Vec<f64> = match tensor.grad() {
            Some(g) => g.to_vec(),
            None => continue,
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = tensor.data_mut();
        for k in 0..grads.len() {
            let g = grads[k];
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            data[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        params.scale_grads(max_norm / norm);
    }
    norm
}

/// Context and candidates of one example, tokenized once.
pub struct TokenizedExample {
    pub id: String,
    pub ctx: TokenSequence,
    pub candidates: Vec<TokenSequence>,
    pub gold: usize,
}

pub fn tokenize_examples(
    vocab: &Vocab,
    examples: &[Example],
    max_ctx_len: usize,
    max_resp_len: usize,
) -> Vec<TokenizedExample> {
    examples
        .iter()
        .map(|ex| TokenizedExample {
            id: ex.id.clone(),
            ctx: crate::data::tokenize(&ex.context, vocab, max_ctx_len, crate::data::Side::Context),
            candidates: ex
                .candidates
                .iter()
                .map(|c| crate::data::tokenize(c, vocab, max_resp_len, crate::data::Side::Response))
                .collect(),
            gold: ex.gold,
        })
        .collect()
}

/// Runs the (frozen) teacher over every example's candidate list in
/// inference mode. Output order always equals dataset order.
pub fn cache_teacher_logits(
    teacher: &Model,
    vocab: &Vocab,
    data: &[Example],
) -> Result<Vec<DistillationRecord>, TrainError> {
    use rayon::prelude::*;
    let tokenized = tokenize_examples(
        vocab,
        data,
        teacher.config.max_ctx_len,
        teacher.config.max_resp_len,
    );
    tokenized
        .par_iter()
        .map(|ex| {
            let logits = teacher.score_candidates_values(&ex.ctx, &ex.candidates)?;
            Ok(DistillationRecord {
                id: ex.id.clone(),
                teacher_logits: logits,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r1: f64,
    pub val_mrr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: ValMetrics,
}

/// Trains the model in place, returning per-epoch history. Deterministic
/// given the config seed. The model is left at its best-validation-R@1
/// parameters.
pub fn train(
    model: &mut Model,
    vocab: &Vocab,
    train_data: &[Example],
    valid_data: &[Example],
    cfg: &TrainConfig,
    teacher_records: Option<&[DistillationRecord]>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_data.is_empty() || valid_data.is_empty() {
        return Err(TrainError::Data {
            msg: "train and validation splits must be non-empty".into(),
        });
    }
    if model.head.kind() == HeadKind::PlainCross && cfg.negatives == NegativesMode::InBatch {
        return Err(TrainError::Config {
            msg: "the plain cross-encoder cannot reuse encodings for in-batch negatives; \
                  use explicit negatives"
                .into(),
        });
    }

    // α = 1 makes the distillation term weightless; skip it entirely so
    // runs with and without records are bit-identical.
    let kd: Option<HashMap<&str, &[f64]>> = match teacher_records {
        Some(records) if cfg.alpha < 1.0 => {
            let by_id: HashMap<&str, &[f64]> = records
                .iter()
                .map(|r| (r.id.as_str(), r.teacher_logits.as_slice()))
                .collect();
            for ex in train_data {
                match by_id.get(ex.id.as_str()) {
                    None => {
                        return Err(TrainError::Config {
                            msg: format!("distillation requested but example {:?} has no record", ex.id),
                        })
                    }
                    Some(logits) if logits.len() != ex.candidates.len() => {
                        return Err(TrainError::Data {
                            msg: format!(
                                "example {:?}: {} candidates but {} teacher logits",
                                ex.id,
                                ex.candidates.len(),
                                logits.len()
                            ),
                        })
                    }
                    _ => {}
                }
            }
            Some(by_id)
        }
        _ => None,
    };

    let tokenized = tokenize_examples(
        vocab,
        train_data,
        model.config.max_ctx_len,
        model.config.max_resp_len,
    );
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut history = Vec::new();
    let mut best: Option<(usize, ValMetrics, ParamSet)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..tokenized.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let loss = batch_loss(model, &tape, &tokenized, chunk, cfg, kd.as_ref())?;
            let value = loss.value()?;
            if !value.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: batch_no,
                });
            }
            epoch_loss += value;
            batches += 1;

            model.params.zero_grads();
            tape.backward(loss)?;
            tape.accumulate_grads(&mut model.params);
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut model.params, max_norm);
            }
            adam_step(&mut model.params, &mut adam, cfg.lr);
        }

        let results = eval::evaluate_model(model, vocab, valid_data)?;
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_r1: eval::recall_at_1(&results)?,
            val_mrr: eval::mrr(&results)?,
        };
        on_epoch(&stats);
        history.push(stats);

        let metrics = ValMetrics {
            r1: stats.val_r1,
            mrr: stats.val_mrr,
            n: results.len(),
        };
        let improved = best.as_ref().map_or(true, |(_, b, _)| metrics.r1 > b.r1);
        if improved {
            best = Some((epoch, metrics, model.params.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if let Some(patience) = cfg.patience {
                if stale_epochs >= patience {
                    break;
                }
            }
        }
    }

    let (best_epoch, best_val, best_params) = best.expect("at least one epoch ran");
    model.params = best_params;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val,
    })
}

/// Loss of one mini-batch on the given tape.
fn batch_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    tokenized: &[TokenizedExample],
    chunk: &[usize],
    cfg: &TrainConfig,
    kd: Option<&HashMap<&str, &[f64]>>,
) -> Result<Var<'t>, TrainError> {
    match cfg.negatives {
        NegativesMode::InBatch => {
            let mut ctx_encs = Vec::with_capacity(chunk.len());
            let mut gold_encs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &tokenized[i];
                ctx_encs.push(model.encode(tape, &ex.ctx)?);
                gold_encs.push(model.encode(tape, &ex.candidates[ex.gold])?);
            }
            let matrix = model.batch_matrix(tape, &ctx_encs, &gold_encs)?;
            let mut ce_sum: Option<Var<'t>> = None;
            for row in 0..chunk.len() {
                let ce = ce_loss(matrix.row(row)?, row)?;
                ce_sum = Some(match ce_sum {
                    Some(s) => s.add(ce)?,
                    None => ce,
                });
            }
            let l_ce = ce_sum.expect("non-empty batch").scale(1.0 / chunk.len() as f64);

            let Some(kd) = kd else { return Ok(l_ce) };
            let mut mse_sum: Option<Var<'t>> = None;
            for (b, &i) in chunk.iter().enumerate() {
                let ex = &tokenized[i];
                let mut scores = Vec::with_capacity(ex.candidates.len());
                for (j, cand) in ex.candidates.iter().enumerate() {
                    // the gold candidate is already encoded for the matrix
                    let enc = if j == ex.gold {
                        gold_encs[b]
                    } else {
                        model.encode(tape, cand)?
                    };
                    scores.push(model.score_encoded_pair(tape, &ctx_encs[b], &enc)?);
                }
                let z_student = tape.concat(&scores, 0)?;
                let z_teacher = kd[tokenized[i].id.as_str()];
                let mse = distill_loss(tape, z_teacher, z_student)?;
                mse_sum = Some(match mse_sum {
                    Some(s) => s.add(mse)?,
                    None => mse,
                });
            }
            let l_distill = mse_sum
                .expect("non-empty batch")
                .scale(1.0 / chunk.len() as f64);
            combined_loss(cfg.alpha, l_ce, l_distill)
        }
        NegativesMode::Explicit => {
            let mut loss_sum: Option<Var<'t>> = None;
            for &i in chunk {
                let ex = &tokenized[i];
                let scores = model.score_candidates(tape, &ex.ctx, &ex.candidates)?;
                let ce = ce_loss(scores, ex.gold)?;
                let loss_i = match kd {
                    Some(kd) => {
                        let mse = distill_loss(tape, kd[ex.id.as_str()], scores)?;
                        combined_loss(cfg.alpha, ce, mse)?
                    }
                    None => ce,
                };
                loss_sum = Some(match loss_sum {
                    Some(s) => s.add(loss_i)?,
                    None => loss_i,
                });
            }
            Ok(loss_sum
                .expect("non-empty batch")
                .scale(1.0 / chunk.len() as f64))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec, Vocab};
    use crate::heads::HeadConfig;
    use crate::model::ModelConfig;

    #[test]
    fn defaults_match_the_stated_hyperparameters() {
        let t = TrainConfig::for_transformer();
        assert_eq!(t.alpha, 0.5);
        assert_eq!(t.batch_size, 8);
        assert_eq!(t.lr, 5e-5);
        let b = TrainConfig::for_bilstm();
        assert_eq!(b.lr, 1e-3);
        assert_eq!(b.batch_size, 8);
        assert_eq!(b.alpha, 0.5);
    }

    #[test]
    fn ce_loss_examples() {
        let tape = Tape::new();
        let uniform = tape.vector(&[0.0, 0.0]);
        let l = ce_loss(uniform, 0).unwrap().value().unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        // l ≈ 2.06e-9; the log-sum-exp route recovers it from a value
        // near 10, so agreement is limited by cancellation at ~1e-15
        let saturated = tape.vector(&[10.0, -10.0]);
        let l = ce_loss(saturated, 0).unwrap().value().unwrap();
        let expect = (-20f64).exp().ln_1p();
        assert!((l - expect).abs() < 1e-14, "{l} vs {expect}");
        assert!(l > 0.0 && l < 1e-8);

        assert!(matches!(
            ce_loss(uniform, 2),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn distill_loss_examples() {
        let tape = Tape::new();
        let z = tape.vector(&[0.3, -0.7, 1.1]);
        assert_eq!(
            distill_loss(&tape, &[0.3, -0.7, 1.1], z).unwrap().value().unwrap(),
            0.0
        );

        let s = tape.vector(&[0.0, 0.0]);
        let l = distill_loss(&tape, &[1.0, 0.0], s).unwrap().value().unwrap();
        assert_eq!(l, 0.5);

        // symmetry
        let a = [0.2, 0.9, -0.4];
        let b = [1.0, -0.3, 0.5];
        let va = tape.vector(&a);
        let vb = tape.vector(&b);
        let lab = distill_loss(&tape, &b, va).unwrap().value().unwrap();
        let lba = distill_loss(&tape, &a, vb).unwrap().value().unwrap();
        assert_eq!(lab.to_bits(), lba.to_bits());

        let short = tape.vector(&[0.0]);
        assert!(distill_loss(&tape, &[1.0, 2.0], short).is_err());
    }

    #[test]
    fn combined_loss_grid_is_exactly_affine() {
        let tape = Tape::new();
        let ce = tape.vector(&[1.0]);
        let kd = tape.vector(&[0.4]);
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let l = combined_loss(alpha, ce, kd).unwrap().value().unwrap();
            assert_eq!(l, alpha * 1.0 + (1.0 - alpha) * 0.4);
        }
        assert_eq!(combined_loss(1.0, ce, kd).unwrap().value().unwrap(), 1.0);
        assert_eq!(combined_loss(0.0, ce, kd).unwrap().value().unwrap(), 0.4);
        assert!((combined_loss(0.5, ce, kd).unwrap().value().unwrap() - 0.7).abs() < 1e-15);
        assert!(combined_loss(1.5, ce, kd).is_err());
        assert!(combined_loss(-0.1, ce, kd).is_err());
    }

    fn param_set(values: &[f64]) -> (ParamSet, crate::params::ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.add("w", crate::tensor::Tensor::vector(values.to_vec()));
        (ps, id)
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let (mut ps, id) = param_set(&[1.0, -2.0]);
        let mut state = AdamState::new(&ps);
        adam_step(&mut ps, &mut state, 0.1);
        assert_eq!(ps.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_magnitude_near_lr() {
        let (mut ps, id) = param_set(&[0.0, 0.0]);
        ps.accumulate_grad(id, &[0.3, -7.0]).unwrap();
        let mut state = AdamState::new(&ps);
        adam_step(&mut ps, &mut state, 0.01);
        let data = ps.get(id).data();
        // first bias-corrected step is -lr·sign(g), up to epsilon
        assert!((data[0] + 0.01).abs() < 1e-6, "{data:?}");
        assert!((data[1] - 0.01).abs() < 1e-6, "{data:?}");
    }

    #[test]
    fn adam_two_steps_match_scalar_oracle() {
        let (mut ps, id) = param_set(&[1.0]);
        let mut state = AdamState::new(&ps);
        let lr = 0.05;
        let grads = [0.4, -0.2];

        // hand-rolled scalar Adam, same constants
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in grads.iter().enumerate() {
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t as i32 + 1));
            theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }

        for g in grads {
            ps.zero_grads();
            ps.accumulate_grad(id, &[g]).unwrap();
            adam_step(&mut ps, &mut state, lr);
        }
        assert!((ps.get(id).data()[0] - theta).abs() < 1e-15);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let (mut ps, id) = param_set(&[0.0, 0.0]);
        ps.accumulate_grad(id, &[3.0, 4.0]).unwrap();
        let pre = clip_global_norm(&mut ps, 1.0);
        assert_eq!(pre, 5.0);
        assert!((ps.grad_norm() - 1.0).abs() < 1e-12);

        ps.zero_grads();
        ps.accumulate_grad(id, &[0.3, 0.4]).unwrap();
        clip_global_norm(&mut ps, 1.0);
        assert!((ps.grad_norm() - 0.5).abs() < 1e-12);
    }

    fn tiny_setup(head: HeadConfig) -> (Model, Vocab, Vec<Example>, Vec<Example>) {
        let spec = SyntheticSpec {
            vocab_size: 30,
            topics: 4,
            tokens_per_turn: 4,
            turns_per_context: 1,
            candidates: 3,
            train_size: 8,
            valid_size: 4,
            test_size: 4,
            noise: 0.0,
            seed: 5,
        };
        let data = generate_synthetic(&spec).unwrap();
        let vocab = Vocab::build(
            data.train
                .iter()
                .flat_map(|e| std::iter::once(e.context.as_str()).chain(e.candidates.iter().map(String::as_str))),
            spec.vocab_size,
        );
        let mut cfg = ModelConfig::desk_transformer(vocab.vocab_size(), head, 8, 6);
        cfg.encoder.d_model = 8;
        cfg.encoder.d_ff = 16;
        cfg.encoder.n_layers = 1;
        let model = Model::new(cfg, 1).unwrap();
        (model, vocab, data.train, data.valid)
    }

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: 1.0,
            lr: 1e-3,
            batch_size: 4,
            epochs,
            seed,
            negatives: NegativesMode::InBatch,
            clip_norm: Some(1.0),
            patience: None,
        }
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let (mut model, vocab, train_data, valid_data) = tiny_setup(HeadConfig::bi());
        let two = &train_data[..2];
        let mut cfg = quick_cfg(50, 3);
        cfg.batch_size = 2;
        let outcome = train(&mut model, &vocab, two, valid_data.as_slice(), &cfg, None, |_| {})
            .unwrap();
        let first = outcome.history.first().unwrap().train_loss;
        let last = outcome.history.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} → {last}");
    }

    #[test]
    fn fixed_seed_reproduces_history_bitwise() {
        let run = || {
            let (mut model, vocab, train_data, valid_data) = tiny_setup(HeadConfig::bi());
            train(
                &mut model,
                &vocab,
                &train_data,
                &valid_data,
                &quick_cfg(3, 9),
                None,
                |_| {},
            )
            .unwrap()
            .history
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_r1.to_bits(), y.val_r1.to_bits());
            assert_eq!(x.val_mrr.to_bits(), y.val_mrr.to_bits());
        }
    }

    #[test]
    fn alpha_one_ignores_records_bitwise() {
        let (model, vocab, train_data, valid_data) = tiny_setup(HeadConfig::bi());
        let records: Vec<DistillationRecord> = train_data
            .iter()
            .map(|ex| DistillationRecord {
                id: ex.id.clone(),
                teacher_logits: vec![0.5; ex.candidates.len()],
            })
            .collect();

        let run = |records: Option<&[DistillationRecord]>| {
            let mut m = Model::new(model.config.clone(), model.seed).unwrap();
            train(
                &mut m,
                &vocab,
                &train_data,
                &valid_data,
                &quick_cfg(2, 4),
                records,
                |_| {},
            )
            .unwrap();
            m.checksum()
        };
        assert_eq!(run(None), run(Some(&records)));
    }

    #[test]
    fn missing_and_mismatched_records_rejected() {
        let (mut model, vocab, train_data, valid_data) = tiny_setup(HeadConfig::bi());
        let mut cfg = quick_cfg(1, 0);
        cfg.alpha = 0.5;

        let missing = vec![DistillationRecord {
            id: train_data[0].id.clone(),
            teacher_logits: vec![0.0; 3],
        }];
        assert!(matches!(
            train(&mut model, &vocab, &train_data, &valid_data, &cfg, Some(&missing), |_| {}),
            Err(TrainError::Config { .. })
        ));

        let wrong_len: Vec<DistillationRecord> = train_data
            .iter()
            .map(|ex| DistillationRecord {
                id: ex.id.clone(),
                teacher_logits: vec![0.0; ex.candidates.len() + 1],
            })
            .collect();
        assert!(matches!(
            train(&mut model, &vocab, &train_data, &valid_data, &cfg, Some(&wrong_len), |_| {}),
            Err(TrainError::Data { .. })
        ));
    }

    #[test]
    fn plain_cross_rejects_in_batch_negatives() {
        let (mut model, vocab, train_data, valid_data) = tiny_setup(HeadConfig::plain_cross());
        let err = train(
            &mut model,
            &vocab,
            &train_data,
            &valid_data,
            &quick_cfg(1, 0),
            None,
            |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Config { .. }));
    }

    #[test]
    fn poisoned_parameters_surface_as_divergence() {
        let (mut model, vocab, train_data, valid_data) = tiny_setup(HeadConfig::bi());
        let id = model.params.id_of("enc.tok_emb").unwrap();
        model.params.get_mut(id).data_mut()[0] = f64::NAN;
        let err = train(
            &mut model,
            &vocab,
            &train_data,
            &valid_data,
            &quick_cfg(1, 0),
            None,
            |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Divergence { .. }), "{err}");
    }

    #[test]
    fn identical_student_and_teacher_give_zero_initial_distill_loss() {
        let (model, vocab, train_data, _) = tiny_setup(HeadConfig::bi());
        let records = cache_teacher_logits(&model, &vocab, &train_data).unwrap();
        // student with the very same weights reproduces every logit
        let tokenized = tokenize_examples(&vocab, &train_data, 8, 6);
        for (ex, rec) in tokenized.iter().zip(&records) {
            let tape = Tape::new();
            let z = model.score_candidates(&tape, &ex.ctx, &ex.candidates).unwrap();
            let l = distill_loss(&tape, &rec.teacher_logits, z).unwrap().value().unwrap();
            assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn cached_records_are_deterministic_and_sized() {
        let (model, vocab, train_data, _) = tiny_setup(HeadConfig::enhanced_cross());
        let a = cache_teacher_logits(&model, &vocab, &train_data).unwrap();
        let b = cache_teacher_logits(&model, &vocab, &train_data).unwrap();
        assert_eq!(a, b);
        for (rec, ex) in a.iter().zip(&train_data) {
            assert_eq!(rec.id, ex.id);
            assert_eq!(rec.teacher_logits.len(), ex.candidates.len());
        }
    }

    #[test]
    fn zeroed_output_head_caches_zero_logits() {
        let (mut model, vocab, train_data, _) = tiny_setup(HeadConfig::enhanced_cross());
        for name in ["head.w_out", "head.b_out"] {
            let id = model.params.id_of(name).unwrap();
            model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let records = cache_teacher_logits(&model, &vocab, &train_data).unwrap();
        assert!(records
            .iter()
            .all(|r| r.teacher_logits.iter().all(|&z| z == 0.0)));
    }

    #[test]
    fn records_roundtrip_with_full_precision() {
        let records = vec![
            DistillationRecord {
                id: "a".into(),
                teacher_logits: vec![0.1 + 0.2, -1.5e-308, 7.237005577332262e75],
            },
            DistillationRecord {
                id: "b".into(),
                teacher_logits: vec![],
            },
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_records(f.path(), &records).unwrap();
        let loaded = load_records(f.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        for (l, r) in loaded.iter().zip(&records) {
            assert_eq!(l.id, r.id);
            for (x, y) in l.teacher_logits.iter().zip(&r.teacher_logits) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn batch_permutation_leaves_per_example_losses_unchanged() {
        let (model, vocab, train_data, _) = tiny_setup(HeadConfig::bi());
        let tokenized = tokenize_examples(&vocab, &train_data, 8, 6);
        let order_a = [0usize, 1, 2];
        let order_b = [2usize, 0, 1];

        let per_example = |order: &[usize]| -> Vec<f64> {
            let tape = Tape::new();
            let ctxs: Vec<_> = order
                .iter()
                .map(|&i| model.encode(&tape, &tokenized[i].ctx).unwrap())
                .collect();
            let golds: Vec<_> = order
                .iter()
                .map(|&i| {
                    model
                        .encode(&tape, &tokenized[i].candidates[tokenized[i].gold])
                        .unwrap()
                })
                .collect();
            let m = model.batch_matrix(&tape, &ctxs, &golds).unwrap();
            (0..order.len())
                .map(|r| ce_loss(m.row(r).unwrap(), r).unwrap().value().unwrap())
                .collect()
        };

        let a = per_example(&order_a);
        let b = per_example(&order_b);
        // per-example losses follow the examples through the permutation
        for (pos_b, &i) in order_b.iter().enumerate() {
            let pos_a = order_a.iter().position(|&j| j == i).unwrap();
            assert!((a[pos_a] - b[pos_b]).abs() < 1e-12);
        }
    }
}
