//! Shared oracles for the integration and acceptance suites: a central
//! finite-difference gradient checker and a straight-line (tape-free)
//! re-composition of the enhanced cross-encoder score.

use distilrank::heads::{EnhancedWiring, HeadConfig};
use distilrank::params::ParamSet;
use distilrank::tape::{Tape, Var};
use rand::Rng;

/// Central finite differences with the given step, compared against the
/// tape's analytic gradients over every coordinate of every parameter.
/// Returns the maximum scaled error `|a − fd| / max(1, |a|, |fd|)`.
pub fn max_grad_error<F>(params: &mut ParamSet, step: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Var<'t>,
{
    params.zero_grads();
    {
        let tape = Tape::new();
        let loss = f(&tape, params);
        tape.backward(loss).expect("loss must be scalar");
        tape.accumulate_grads(params);
    }
    let analytic: Vec<Vec<f64>> = params
        .ids()
        .map(|id| params.get(id).grad().expect("params carry grads").to_vec())
        .collect();

    let eval = |params: &ParamSet| -> f64 {
        let tape = Tape::new();
        f(&tape, params).value().expect("loss must be scalar")
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = params.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for k in 0..params.get(id).numel() {
            let orig = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(params);
            params.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(params);
            params.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic[pi][k];
            let err = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

/// Random tensor values in (-bound, bound).
pub fn random_values(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Straight-line evaluation of the enhanced cross-encoder score from raw
/// encoding rows, written in plain vector arithmetic with no tape. Used
/// as the independent oracle the autodiff implementation must match.
pub fn enhanced_score_oracle(
    ps: &ParamSet,
    cfg: &HeadConfig,
    wiring: &EnhancedWiring,
    c_rows: &[Vec<f64>],
    c_valid: usize,
    r_rows: &[Vec<f64>],
    r_valid: usize,
) -> f64 {
    let d = c_rows[0].len();

    let attention = |q: &[Vec<f64>], k: &[Vec<f64>], k_valid: usize| -> Vec<Vec<f64>> {
        q.iter()
            .map(|qr| {
                let logits: Vec<f64> = (0..k_valid)
                    .map(|j| {
                        let dot: f64 = qr.iter().zip(&k[j]).map(|(a, b)| a * b).sum();
                        dot / (d as f64).sqrt()
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut out = vec![0.0; d];
                for (j, e) in exps.iter().enumerate() {
                    for (o, kv) in out.iter_mut().zip(&k[j]) {
                        *o += (e / z) * kv;
                    }
                }
                out
            })
            .collect()
    };

    let submult = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * a.len());
        out.extend_from_slice(a);
        out.extend_from_slice(b);
        out.extend(a.iter().zip(b).map(|(x, y)| x - y));
        out.extend(a.iter().zip(b).map(|(x, y)| x * y));
        out
    };

    let matvec = |v: &[f64], w: &distilrank::tensor::Tensor| -> Vec<f64> {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        assert_eq!(v.len(), rows);
        (0..cols)
            .map(|j| (0..rows).map(|i| v[i] * w.data()[i * cols + j]).sum())
            .collect()
    };

    let project = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let w = ps.get(wiring.w_cross.expect("attention enabled"));
        rows.iter().map(|r| matvec(r, w)).collect()
    };

    let (c_hat, r_hat): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if cfg.use_cross_attention {
        let att_c = attention(c_rows, r_rows, r_valid);
        let c_hat: Vec<Vec<f64>> = c_rows
            .iter()
            .zip(&att_c)
            .map(|(cr, ar)| submult(cr, ar))
            .collect();
        let att_r = attention(r_rows, c_rows, c_valid);
        let r_hat: Vec<Vec<f64>> = r_rows
            .iter()
            .zip(&att_r)
            .map(|(rr, ar)| submult(rr, ar))
            .collect();
        (project(&c_hat), project(&r_hat))
    } else {
        (c_rows.to_vec(), r_rows.to_vec())
    };

    let aggregate = |rows: &[Vec<f64>], valid: usize| -> Vec<f64> {
        let width = rows[0].len();
        let mut out = Vec::with_capacity(3 * width);
        out.extend_from_slice(&rows[0]);
        for c in 0..width {
            out.push(
                (0..valid)
                    .map(|r| rows[r][c])
                    .fold(f64::NEG_INFINITY, f64::max),
            );
        }
        for c in 0..width {
            out.push((0..valid).map(|r| rows[r][c]).sum::<f64>() / valid as f64);
        }
        out
    };

    let c_bar = aggregate(&c_hat, c_valid);
    let r_bar = aggregate(&r_hat, r_valid);
    let features = if cfg.use_submult {
        submult(&c_bar, &r_bar)
    } else {
        let mut f = c_bar.clone();
        f.extend_from_slice(&r_bar);
        f
    };

    let mut hidden = matvec(&features, ps.get(wiring.w_hidden));
    if let Some(b) = wiring.b_hidden {
        for (h, bv) in hidden.iter_mut().zip(ps.get(b).data()) {
            *h += bv;
        }
    }
    for h in hidden.iter_mut() {
        *h = h.max(0.0);
    }
    let mut score = matvec(&hidden, ps.get(wiring.w_out))[0];
    if let Some(b) = wiring.b_out {
        score += ps.get(b).data()[0];
    }
    score
}
