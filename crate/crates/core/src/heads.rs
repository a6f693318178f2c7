//! Scoring heads: bi-encoder dot product, plain cross-encoder MLP, and
//! the enhanced cross-encoder (comparison attention + SubMult features
//! over separately encoded inputs).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{aggregate_cls, aggregate_cls_max_mean, xavier_init, zeros_init, Encoded};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("head {kind:?} does not support {op}")]
    UnsupportedHead { kind: HeadKind, op: &'static str },
    #[error("head config: {msg}")]
    Config { msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Bi,
    PlainCross,
    EnhancedCross,
}

/// How a bi-encoder collapses token encodings into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiAggregation {
    /// The `[CLS]` row (width d).
    Cls,
    /// `[CLS] ⊕ max ⊕ mean` (width 3d).
    ClsMaxMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Enhanced head only: compare with SubMult (4× features) instead of
    /// plain concatenation.
    pub use_submult: bool,
    /// Enhanced head only: apply the comparison-attention layer; when
    /// off, encodings pass through unchanged.
    pub use_cross_attention: bool,
    /// Bias terms on the two final projections.
    pub bias: bool,
}

impl HeadConfig {
    pub fn bi() -> Self {
        Self {
            kind: HeadKind::Bi,
            use_submult: true,
            use_cross_attention: true,
            bias: true,
        }
    }

    pub fn plain_cross() -> Self {
        Self {
            kind: HeadKind::PlainCross,
            use_submult: true,
            use_cross_attention: true,
            bias: true,
        }
    }

    pub fn enhanced_cross() -> Self {
        Self {
            kind: HeadKind::EnhancedCross,
            use_submult: true,
            use_cross_attention: true,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if self.kind != HeadKind::EnhancedCross && (!self.use_submult || !self.use_cross_attention)
        {
            return Err(HeadError::Config {
                msg: format!("ablation flags only apply to the enhanced head, not {:?}", self.kind),
            });
        }
        Ok(())
    }
}

pub struct EnhancedWiring {
    /// 4d→d projection after the comparison attention; absent when the
    /// attention layer is ablated away.
    pub w_cross: Option<ParamId>,
    /// 12d→d (or 6d→d without SubMult) projection of the pair features.
    pub w_hidden: ParamId,
    pub b_hidden: Option<ParamId>,
    pub w_out: ParamId,
    pub b_out: Option<ParamId>,
}

pub struct PlainCrossWiring {
    pub w1: ParamId,
    pub b1: Option<ParamId>,
    pub w2: ParamId,
    pub b2: Option<ParamId>,
}

pub enum HeadWiring {
    Bi,
    PlainCross(PlainCrossWiring),
    Enhanced(EnhancedWiring),
}

impl HeadWiring {
    /// Registers head weights sized off the encoder width `d_model`.
    pub fn build(
        cfg: &HeadConfig,
        d_model: usize,
        ps: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Result<Self, HeadError> {
        cfg.validate()?;
        let d = d_model;
        match cfg.kind {
            HeadKind::Bi => Ok(Self::Bi),
            HeadKind::PlainCross => Ok(Self::PlainCross(PlainCrossWiring {
                w1: ps.add("head.w1", xavier_init(rng, d, d)),
                b1: cfg.bias.then(|| ps.add("head.b1", zeros_init(vec![d]))),
                w2: ps.add("head.w2", xavier_init(rng, d, 1)),
                b2: cfg.bias.then(|| ps.add("head.b2", zeros_init(vec![1]))),
            })),
            HeadKind::EnhancedCross => {
                let w_cross = cfg
                    .use_cross_attention
                    .then(|| ps.add("head.w_cross", xavier_init(rng, 4 * d, d)));
                // pair features: SubMult of two 3d vectors (12d) or their
                // concatenation (6d)
                let feat = if cfg.use_submult { 12 * d } else { 6 * d };
                Ok(Self::Enhanced(EnhancedWiring {
                    w_cross,
                    w_hidden: ps.add("head.w_hidden", xavier_init(rng, feat, d)),
                    b_hidden: cfg.bias.then(|| ps.add("head.b_hidden", zeros_init(vec![d]))),
                    w_out: ps.add("head.w_out", xavier_init(rng, d, 1)),
                    b_out: cfg.bias.then(|| ps.add("head.b_out", zeros_init(vec![1]))),
                }))
            }
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Self::Bi => HeadKind::Bi,
            Self::PlainCross(_) => HeadKind::PlainCross,
            Self::Enhanced(_) => HeadKind::EnhancedCross,
        }
    }
}

/// `a ⊕ b ⊕ (a−b) ⊕ (a⊙b)`, in exactly that order. Rank-1 inputs widen
/// end to end; rank-2 inputs widen per row (columns ×4).
pub fn submult<'t>(tape: &'t Tape, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
    let axis = if a.shape().len() == 2 { 1 } else { 0 };
    tape.concat(&[a, b, a.sub(b)?, a.hadamard(b)?], axis)
}

/// Comparison attention: `softmax(q·kᵀ/√d)·k`, with key positions at or
/// past `k_valid` masked out before the softmax.
pub fn scaled_dot_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    k_valid: usize,
) -> Result<Var<'t>, TensorError> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(TensorError::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let d = qs[1] as f64;
    let weights = q
        .matmul(k.transpose()?)?
        .scale(1.0 / d.sqrt())
        .softmax_rows_masked(k_valid)?;
    weights.matmul(k)
}

/// One layer of cross attention over both sides: each side's tokens are
/// compared (SubMult) with their attended summary of the other side and
/// projected back to width d. With `use_cross_attention` off this is the
/// identity on both sides.
pub fn cross_attend<'t>(
    tape: &'t Tape,
    ps: &ParamSet,
    cfg: &HeadConfig,
    wiring: &EnhancedWiring,
    c: &Encoded<'t>,
    r: &Encoded<'t>,
) -> Result<(Encoded<'t>, Encoded<'t>), HeadError> {
    if !cfg.use_cross_attention {
        return Ok((*c, *r));
    }
    let w_cross = tape.param(
        ps,
        wiring.w_cross.ok_or_else(|| HeadError::Config {
            msg: "cross attention enabled but its projection is missing".into(),
        })?,
    );
    let att_c = scaled_dot_attention(c.rows, r.rows, r.valid_len)?;
    let c_hat = submult(tape, c.rows, att_c)?.matmul(w_cross)?;
    let att_r = scaled_dot_attention(r.rows, c.rows, c.valid_len)?;
    let r_hat = submult(tape, r.rows, att_r)?.matmul(w_cross)?;
    Ok((
        Encoded {
            rows: c_hat,
            valid_len: c.valid_len,
        },
        Encoded {
            rows: r_hat,
            valid_len: r.valid_len,
        },
    ))
}

/// Enhanced cross-encoder score: cross attention, `[CLS]⊕max⊕mean`
/// aggregation on both sides, SubMult (or concat) of the 3d vectors,
/// then a two-layer network down to one logit.
pub fn score_enhanced<'t>(
    tape: &'t Tape,
    ps: &ParamSet,
    cfg: &HeadConfig,
    wiring: &EnhancedWiring,
    c: &Encoded<'t>,
    r: &Encoded<'t>,
) -> Result<Var<'t>, HeadError> {
    let (c_hat, r_hat) = cross_attend(tape, ps, cfg, wiring, c, r)?;
    let c_bar = aggregate_cls_max_mean(tape, &c_hat)?;
    let r_bar = aggregate_cls_max_mean(tape, &r_hat)?;
    let features = if cfg.use_submult {
        submult(tape, c_bar, r_bar)?
    } else {
        tape.concat(&[c_bar, r_bar], 0)?
    };
    let width = features.shape()[0];
    let mut hidden = features
        .reshape(vec![1, width])?
        .matmul(tape.param(ps, wiring.w_hidden))?;
    if let Some(b) = wiring.b_hidden {
        hidden = hidden.add_row_broadcast(tape.param(ps, b))?;
    }
    let mut out = hidden.relu().matmul(tape.param(ps, wiring.w_out))?;
    if let Some(b) = wiring.b_out {
        out = out.add_row_broadcast(tape.param(ps, b))?;
    }
    Ok(out.reshape(vec![1])?)
}

/// Bi-encoder score: plain dot product of the two aggregated vectors.
pub fn score_bi<'t>(c_vec: Var<'t>, r_vec: Var<'t>) -> Result<Var<'t>, TensorError> {
    c_vec.dot(r_vec)
}

/// The aggregated vector a bi-encoder compares.
pub fn bi_vector<'t>(
    tape: &'t Tape,
    enc: &Encoded<'t>,
    agg: BiAggregation,
) -> Result<Var<'t>, TensorError> {
    match agg {
        BiAggregation::Cls => aggregate_cls(enc),
        BiAggregation::ClsMaxMean => aggregate_cls_max_mean(tape, enc),
    }
}

/// Plain cross-encoder score: two-layer MLP over the `[CLS]` row of the
/// jointly encoded pair.
pub fn score_plain_cross<'t>(
    tape: &'t Tape,
    ps: &ParamSet,
    wiring: &PlainCrossWiring,
    joint: &Encoded<'t>,
) -> Result<Var<'t>, HeadError> {
    let cls = joint.rows.narrow(0, 0, 1)?;
    let mut hidden = cls.matmul(tape.param(ps, wiring.w1))?;
    if let Some(b) = wiring.b1 {
        hidden = hidden.add_row_broadcast(tape.param(ps, b))?;
    }
    let mut out = hidden.relu().matmul(tape.param(ps, wiring.w2))?;
    if let Some(b) = wiring.b2 {
        out = out.add_row_broadcast(tape.param(ps, b))?;
    }
    Ok(out.reshape(vec![1])?)
}

/// All-pairs score matrix for one batch: entry (i, j) scores context i
/// against response j, so the diagonal holds the positives. Only heads
/// that reuse separate encodings support this; the plain cross-encoder
/// would have to re-encode every pair.
pub fn batch_score_matrix<'t>(
    tape: &'t Tape,
    ps: &ParamSet,
    cfg: &HeadConfig,
    wiring: &HeadWiring,
    agg: BiAggregation,
    contexts: &[Encoded<'t>],
    responses: &[Encoded<'t>],
) -> Result<Var<'t>, HeadError> {
    if contexts.len() != responses.len() || contexts.is_empty() {
        return Err(HeadError::Config {
            msg: format!(
                "need equal non-empty batches, got {} contexts and {} responses",
                contexts.len(),
                responses.len()
            ),
        });
    }
    let b = contexts.len();
    match wiring {
        HeadWiring::Bi => {
            let stack = |encs: &[Encoded<'t>]| -> Result<Var<'t>, TensorError> {
                let rows = encs
                    .iter()
                    .map(|e| {
                        let v = bi_vector(tape, e, agg)?;
                        let w = v.shape()[0];
                        v.reshape(vec![1, w])
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                tape.concat(&rows, 0)
            };
            let c = stack(contexts)?;
            let r = stack(responses)?;
            Ok(c.matmul(r.transpose()?)?)
        }
        HeadWiring::Enhanced(ew) => {
            let mut cells = Vec::with_capacity(b * b);
            for ci in contexts {
                for rj in responses {
                    cells.push(score_enhanced(tape, ps, cfg, ew, ci, rj)?);
                }
            }
            Ok(tape.concat(&cells, 0)?.reshape(vec![b, b])?)
        }
        HeadWiring::PlainCross(_) => Err(HeadError::UnsupportedHead {
            kind: HeadKind::PlainCross,
            op: "batch_score_matrix",
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!((a - e).abs() <= tol, "expected {expected:?}, got {actual:?}");
        }
    }

    #[test]
    fn submult_examples() {
        let tape = Tape::new();
        let a = tape.vector(&[1.0, 2.0]);
        let b = tape.vector(&[3.0, 4.0]);
        let out = submult(&tape, a, b).unwrap();
        assert_close(&out.data(), &[1.0, 2.0, 3.0, 4.0, -2.0, -2.0, 3.0, 8.0], 0.0);

        // (a, a) → a ⊕ a ⊕ 0 ⊕ a²
        let same = submult(&tape, a, a).unwrap();
        assert_close(&same.data(), &[1.0, 2.0, 1.0, 2.0, 0.0, 0.0, 1.0, 4.0], 0.0);

        // output length 4d' for a random width
        let w = tape.vector(&[0.5; 7]);
        assert_eq!(submult(&tape, w, w).unwrap().shape(), vec![28]);

        let short = tape.vector(&[1.0]);
        assert!(submult(&tape, a, short).is_err());
    }

    #[test]
    fn attention_single_key_returns_that_key() {
        let tape = Tape::new();
        let q = tape.matrix(2, 3, &[5.0, -2.0, 0.1, 0.0, 0.0, 0.0]).unwrap();
        let k = tape.matrix(1, 3, &[1.0, 2.0, 3.0]).unwrap();
        let out = scaled_dot_attention(q, k, 1).unwrap();
        assert_close(&out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0], 1e-15);
    }

    #[test]
    fn attention_orthogonal_query_averages_equal_norm_keys() {
        let tape = Tape::new();
        // q ⟂ both keys, keys of equal norm → uniform weights
        let q = tape.matrix(1, 3, &[0.0, 0.0, 2.0]).unwrap();
        let k = tape
            .matrix(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
            .unwrap();
        let out = scaled_dot_attention(q, k, 2).unwrap();
        assert_close(&out.data(), &[0.5, 0.5, 0.0], 1e-15);
    }

    #[test]
    fn attention_two_key_hand_case() {
        // q = [1,0], k = [[1,0],[0,1]], d = 2: logits [1/√2, 0],
        // weights [0.6698, 0.3302], output equals the weights
        let tape = Tape::new();
        let q = tape.matrix(1, 2, &[1.0, 0.0]).unwrap();
        let k = tape.matrix(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = scaled_dot_attention(q, k, 2).unwrap();
        let e = (1.0f64 / 2.0f64.sqrt()).exp();
        let w1 = e / (e + 1.0);
        assert_close(&out.data(), &[w1, 1.0 - w1], 1e-12);
        assert!((out.data()[0] - 0.6698).abs() < 1e-4);
        assert!((out.data()[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn attention_masking_equals_truncating_keys() {
        let tape = Tape::new();
        let q = tape.matrix(2, 4, &[0.3, -1.0, 0.5, 0.2, 1.5, 0.0, -0.7, 0.9]).unwrap();
        let k_full = tape
            .matrix(3, 4, &[0.1, 0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8, 9.0, 9.0, 9.0, 9.0])
            .unwrap();
        let k_cut = tape
            .matrix(2, 4, &[0.1, 0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8])
            .unwrap();
        let masked = scaled_dot_attention(q, k_full, 2).unwrap();
        let cut = scaled_dot_attention(q, k_cut, 2).unwrap();
        assert_close(&masked.data(), &cut.data(), 1e-12);
    }

    #[test]
    fn attention_rejects_empty_or_mismatched() {
        let tape = Tape::new();
        let q = tape.matrix(1, 2, &[0.0, 0.0]).unwrap();
        let k = tape.matrix(2, 2, &[0.0; 4]).unwrap();
        assert!(matches!(
            scaled_dot_attention(q, k, 0),
            Err(TensorError::EmptySequence { .. })
        ));
        let k3 = tape.matrix(2, 3, &[0.0; 6]).unwrap();
        assert!(scaled_dot_attention(q, k3, 2).is_err());
    }

    fn build_enhanced(cfg: &HeadConfig, d: usize, seed: u64) -> (ParamSet, EnhancedWiring) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        match HeadWiring::build(cfg, d, &mut ps, &mut rng).unwrap() {
            HeadWiring::Enhanced(w) => (ps, w),
            _ => unreachable!(),
        }
    }

    #[test]
    fn cross_attend_identity_bypass() {
        let mut cfg = HeadConfig::enhanced_cross();
        cfg.use_cross_attention = false;
        let (ps, wiring) = build_enhanced(&cfg, 4, 1);
        assert!(wiring.w_cross.is_none());

        let tape = Tape::new();
        let c = Encoded {
            rows: tape.matrix(2, 4, &[1.0; 8]).unwrap(),
            valid_len: 2,
        };
        let r = Encoded {
            rows: tape.matrix(3, 4, &[2.0; 12]).unwrap(),
            valid_len: 3,
        };
        let (ch, rh) = cross_attend(&tape, &ps, &cfg, &wiring, &c, &r).unwrap();
        assert_eq!(ch.rows.data(), c.rows.data());
        assert_eq!(rh.rows.data(), r.rows.data());
    }

    #[test]
    fn cross_attend_single_token_pair_equals_submult_projection() {
        let cfg = HeadConfig::enhanced_cross();
        let d = 4;
        let (ps, wiring) = build_enhanced(&cfg, d, 2);
        let tape = Tape::new();
        let v = [0.3, -0.7, 0.2, 0.9];
        let c = Encoded {
            rows: tape.matrix(1, d, &v).unwrap(),
            valid_len: 1,
        };
        let (ch, _) = cross_attend(&tape, &ps, &cfg, &wiring, &c, &c).unwrap();

        // with one key, attention returns the key row, so the row is
        // SubMult(v, v)·W
        let feats = submult(&tape, tape.vector(&v), tape.vector(&v)).unwrap();
        let expect = feats
            .reshape(vec![1, 4 * d])
            .unwrap()
            .matmul(tape.param(&ps, wiring.w_cross.unwrap()))
            .unwrap();
        assert_close(&ch.rows.data(), &expect.data(), 1e-12);
    }

    #[test]
    fn cross_attend_output_shapes() {
        let cfg = HeadConfig::enhanced_cross();
        let d = 4;
        let (ps, wiring) = build_enhanced(&cfg, d, 3);
        let tape = Tape::new();
        let c = Encoded {
            rows: tape.matrix(5, d, &[0.1; 20]).unwrap(),
            valid_len: 4,
        };
        let r = Encoded {
            rows: tape.matrix(3, d, &[0.2; 12]).unwrap(),
            valid_len: 2,
        };
        let (ch, rh) = cross_attend(&tape, &ps, &cfg, &wiring, &c, &r).unwrap();
        assert_eq!(ch.rows.shape(), vec![5, d]);
        assert_eq!(rh.rows.shape(), vec![3, d]);
        assert_eq!(ch.valid_len, 4);
        assert_eq!(rh.valid_len, 2);
    }

    #[test]
    fn score_enhanced_zero_output_weights_scores_zero() {
        let cfg = HeadConfig::enhanced_cross();
        let d = 4;
        let (mut ps, wiring) = build_enhanced(&cfg, d, 4);
        ps.get_mut(wiring.w_out).data_mut().iter_mut().for_each(|v| *v = 0.0);

        let tape = Tape::new();
        let c = Encoded {
            rows: tape.matrix(3, d, &[0.4; 12]).unwrap(),
            valid_len: 3,
        };
        let r = Encoded {
            rows: tape.matrix(2, d, &[-0.3; 8]).unwrap(),
            valid_len: 2,
        };
        let s = score_enhanced(&tape, &ps, &cfg, &wiring, &c, &r).unwrap();
        assert_eq!(s.value().unwrap(), 0.0);
    }

    #[test]
    fn score_enhanced_deterministic() {
        let cfg = HeadConfig::enhanced_cross();
        let d = 4;
        let (ps, wiring) = build_enhanced(&cfg, d, 5);
        fn mk(tape: &Tape) -> (Encoded<'_>, Encoded<'_>) {
            let c = Encoded {
                rows: tape
                    .matrix(
                        3,
                        4,
                        &[0.11, -0.2, 0.3, 0.7, 0.5, 0.1, -0.4, 0.2, 0.0, 0.9, -0.6, 0.3],
                    )
                    .unwrap(),
                valid_len: 2,
            };
            let r = Encoded {
                rows: tape
                    .matrix(2, 4, &[0.25, 0.5, -0.75, 1.0, -1.25, 1.5, -1.75, 2.0])
                    .unwrap(),
                valid_len: 2,
            };
            (c, r)
        }
        let t1 = Tape::new();
        let (c, r) = mk(&t1);
        let s1 = score_enhanced(&t1, &ps, &cfg, &wiring, &c, &r).unwrap().value().unwrap();
        let t2 = Tape::new();
        let (c, r) = mk(&t2);
        let s2 = score_enhanced(&t2, &ps, &cfg, &wiring, &c, &r).unwrap().value().unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());
    }

    #[test]
    fn ablation_flags_change_hidden_projection_shape() {
        let d = 8;
        let (ps, wiring) = build_enhanced(&HeadConfig::enhanced_cross(), d, 6);
        assert_eq!(ps.get(wiring.w_hidden).shape(), &[12 * d, d]);

        let mut cfg = HeadConfig::enhanced_cross();
        cfg.use_submult = false;
        let (ps, wiring) = build_enhanced(&cfg, d, 6);
        assert_eq!(ps.get(wiring.w_hidden).shape(), &[6 * d, d]);
    }

    #[test]
    fn score_bi_examples() {
        let tape = Tape::new();
        let a = tape.vector(&[1.0, 0.0]);
        let b = tape.vector(&[0.0, 1.0]);
        assert_eq!(score_bi(a, b).unwrap().value().unwrap(), 0.0);
        let c = tape.vector(&[1.0, 2.0]);
        let d = tape.vector(&[3.0, 4.0]);
        assert_eq!(score_bi(c, d).unwrap().value().unwrap(), 11.0);
        assert_eq!(
            score_bi(c, d).unwrap().value().unwrap(),
            score_bi(d, c).unwrap().value().unwrap()
        );
        assert!(score_bi(a, tape.vector(&[1.0])).is_err());
    }

    fn build_plain(d: usize, seed: u64) -> (ParamSet, PlainCrossWiring) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        match HeadWiring::build(&HeadConfig::plain_cross(), d, &mut ps, &mut rng).unwrap() {
            HeadWiring::PlainCross(w) => (ps, w),
            _ => unreachable!(),
        }
    }

    #[test]
    fn plain_cross_depends_only_on_cls_row() {
        let d = 4;
        let (ps, wiring) = build_plain(d, 7);
        let tape = Tape::new();
        let a = Encoded {
            rows: tape.matrix(2, d, &[0.2, -0.4, 0.6, 0.8, 1.0, 1.0, 1.0, 1.0]).unwrap(),
            valid_len: 2,
        };
        let b = Encoded {
            rows: tape.matrix(2, d, &[0.2, -0.4, 0.6, 0.8, -9.0, 3.0, 7.0, 2.0]).unwrap(),
            valid_len: 2,
        };
        let sa = score_plain_cross(&tape, &ps, &wiring, &a).unwrap().value().unwrap();
        let sb = score_plain_cross(&tape, &ps, &wiring, &b).unwrap().value().unwrap();
        assert_eq!(sa.to_bits(), sb.to_bits());
        assert!(sa.is_finite());
    }

    #[test]
    fn plain_cross_zero_output_weights_scores_zero() {
        let d = 4;
        let (mut ps, wiring) = build_plain(d, 8);
        ps.get_mut(wiring.w2).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let joint = Encoded {
            rows: tape.matrix(2, d, &[0.5; 8]).unwrap(),
            valid_len: 2,
        };
        let s = score_plain_cross(&tape, &ps, &wiring, &joint).unwrap();
        assert_eq!(s.value().unwrap(), 0.0);
    }

    #[test]
    fn batch_matrix_bi_equals_vector_products_and_scaling_keeps_argmax() {
        let d = 4;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let cfg = HeadConfig::bi();
        let wiring = HeadWiring::build(&cfg, d, &mut ps, &mut rng).unwrap();

        let tape = Tape::new();
        let mk = |vals: &[f64]| Encoded {
            rows: tape.matrix(2, d, vals).unwrap(),
            valid_len: 2,
        };
        let ctxs = vec![
            mk(&[0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0, 0.0]),
            mk(&[-0.5, 0.1, 0.9, -0.2, 0.0, 0.0, 0.0, 0.0]),
        ];
        let resps = vec![
            mk(&[1.0, 0.0, -1.0, 0.5, 0.0, 0.0, 0.0, 0.0]),
            mk(&[0.3, 0.3, 0.3, 0.3, 0.0, 0.0, 0.0, 0.0]),
        ];
        let m = batch_score_matrix(&tape, &ps, &cfg, &wiring, BiAggregation::Cls, &ctxs, &resps)
            .unwrap();
        assert_eq!(m.shape(), vec![2, 2]);

        // pairwise oracle
        for i in 0..2 {
            for j in 0..2 {
                let ci = bi_vector(&tape, &ctxs[i], BiAggregation::Cls).unwrap();
                let rj = bi_vector(&tape, &resps[j], BiAggregation::Cls).unwrap();
                let s = score_bi(ci, rj).unwrap().value().unwrap();
                assert!((m.data()[i * 2 + j] - s).abs() < 1e-9);
            }
        }

        // scaling all candidate vectors by λ > 0 scales rows uniformly
        let scaled: Vec<Encoded> = resps
            .iter()
            .map(|e| Encoded {
                rows: e.rows.scale(2.5),
                valid_len: e.valid_len,
            })
            .collect();
        let m2 = batch_score_matrix(&tape, &ps, &cfg, &wiring, BiAggregation::Cls, &ctxs, &scaled)
            .unwrap();
        for (a, b) in m.data().iter().zip(m2.data()) {
            assert!((b - 2.5 * a).abs() < 1e-9);
        }
        for i in 0..2 {
            let row = &m.data()[i * 2..(i + 1) * 2];
            let row2 = &m2.data()[i * 2..(i + 1) * 2];
            let argmax = |r: &[f64]| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(row), argmax(row2));
        }
    }

    #[test]
    fn batch_matrix_single_pair_matches_single_score() {
        let d = 4;
        let cfg = HeadConfig::enhanced_cross();
        let (ps, _) = build_enhanced(&cfg, d, 10);
        let mut ps2 = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let wiring = HeadWiring::build(&cfg, d, &mut ps2, &mut rng).unwrap();
        drop(ps);

        let tape = Tape::new();
        let c = Encoded {
            rows: tape.matrix(2, d, &[0.1, -0.2, 0.3, -0.4, 0.5, -0.6, 0.7, -0.8]).unwrap(),
            valid_len: 2,
        };
        let r = Encoded {
            rows: tape.matrix(2, d, &[0.9, 0.8, 0.7, 0.6, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            valid_len: 1,
        };
        let m = batch_score_matrix(
            &tape,
            &ps2,
            &cfg,
            &wiring,
            BiAggregation::Cls,
            &[c],
            &[r],
        )
        .unwrap();
        assert_eq!(m.shape(), vec![1, 1]);
        if let HeadWiring::Enhanced(ew) = &wiring {
            let single = score_enhanced(&tape, &ps2, &cfg, ew, &c, &r).unwrap();
            assert_eq!(m.data()[0].to_bits(), single.value().unwrap().to_bits());
        }
    }

    #[test]
    fn batch_matrix_enhanced_matches_pairwise_oracle() {
        let d = 4;
        let cfg = HeadConfig::enhanced_cross();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let wiring = HeadWiring::build(&cfg, d, &mut ps, &mut rng).unwrap();

        let tape = Tape::new();
        let mut mkrng = ChaCha12Rng::seed_from_u64(12);
        let mk = |rng: &mut ChaCha12Rng, rows: usize, valid: usize| {
            let vals: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Encoded {
                rows: tape.matrix(rows, d, &vals).unwrap(),
                valid_len: valid,
            }
        };
        let ctxs: Vec<Encoded> = (0..3).map(|_| mk(&mut mkrng, 3, 2)).collect();
        let resps: Vec<Encoded> = (0..3).map(|_| mk(&mut mkrng, 2, 2)).collect();

        let m = batch_score_matrix(&tape, &ps, &cfg, &wiring, BiAggregation::Cls, &ctxs, &resps)
            .unwrap();
        if let HeadWiring::Enhanced(ew) = &wiring {
            for i in 0..3 {
                for j in 0..3 {
                    let s = score_enhanced(&tape, &ps, &cfg, ew, &ctxs[i], &resps[j])
                        .unwrap()
                        .value()
                        .unwrap();
                    assert!((m.data()[i * 3 + j] - s).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn batch_matrix_rejects_plain_cross() {
        let d = 4;
        let (ps, _w) = build_plain(d, 13);
        let mut ps2 = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let cfg = HeadConfig::plain_cross();
        let wiring = HeadWiring::build(&cfg, d, &mut ps2, &mut rng).unwrap();
        drop(ps);

        let tape = Tape::new();
        let e = Encoded {
            rows: tape.matrix(1, d, &[0.0; 4]).unwrap(),
            valid_len: 1,
        };
        assert!(matches!(
            batch_score_matrix(&tape, &ps2, &cfg, &wiring, BiAggregation::Cls, &[e], &[e]),
            Err(HeadError::UnsupportedHead { .. })
        ));
    }

    #[test]
    fn ablation_flags_rejected_on_other_heads() {
        let mut cfg = HeadConfig::bi();
        cfg.use_submult = false;
        assert!(cfg.validate().is_err());
    }
}
