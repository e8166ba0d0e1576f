//! Direct, unoptimized formulas used as references in tests.
//!
//! Nothing here shares code with the recurrent implementations: each
//! function evaluates the closed-form sum the recurrences are meant to
//! compute.

use crate::numerics::{sigmoid, Matrix2, Vector};
use crate::DENOM_EPS;

/// `W x` by explicit loops.
pub fn project(w: &Matrix2, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| (0..w.cols()).map(|j| w.get(i, j) * x[j]).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σᵢ vᵢ (kᵢ·q) / (Σⱼ kⱼ·q + ε)`.
pub fn kernel_attention(values: &[Vec<f64>], keys: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
    let weights: Vec<f64> = keys.iter().map(|k| dot(k, q)).collect();
    let den: f64 = weights.iter().sum::<f64>() + DENOM_EPS;
    (0..values[0].len())
        .map(|a| values.iter().zip(&weights).map(|(v, w)| v[a] * w).sum::<f64>() / den)
        .collect()
}

/// `Σᵢ lᵢ ⊗ mᵢ` with `lᵢ = Π_{j>i}(1−β_j) ⊙ βᵢ ⊙ vᵢ` and `mᵢ` likewise.
pub fn gated_state_unrolled(
    values: &[Vec<f64>],
    keys: &[Vec<f64>],
    betas: &[Vec<f64>],
    gammas: &[Vec<f64>],
) -> Matrix2 {
    let (dv, dk) = (values[0].len(), keys[0].len());
    let l = unrolled_terms(values, betas);
    let m = unrolled_terms(keys, gammas);
    Matrix2::from_fn(dv, dk, |a, b| l.iter().zip(&m).map(|(li, mi)| li[a] * mi[b]).sum())
}

/// `Σᵢ mᵢ`, the gated normalizer.
pub fn gated_normalizer_unrolled(keys: &[Vec<f64>], gammas: &[Vec<f64>]) -> Vec<f64> {
    let m = unrolled_terms(keys, gammas);
    (0..keys[0].len()).map(|b| m.iter().map(|mi| mi[b]).sum()).collect()
}

fn unrolled_terms(xs: &[Vec<f64>], gates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = xs.len();
    (0..t)
        .map(|i| {
            (0..xs[i].len())
                .map(|a| {
                    let decay: f64 = (i + 1..t).map(|j| 1.0 - gates[j][a]).product();
                    decay * gates[i][a] * xs[i][a]
                })
                .collect()
        })
        .collect()
}

/// Softmax attention of `q` over `keys`/`values` with scores scaled by `scale`.
pub fn softmax_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let scores: Vec<f64> = keys.iter().map(|k| dot(k, q) * scale).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    (0..values[0].len())
        .map(|a| values.iter().zip(&exps).map(|(v, e)| v[a] * e).sum::<f64>() / total)
        .collect()
}

/// `flatten(f(W_p x) ⊗ f(W_m x))` by explicit loops.
pub fn outer_feature(x: &[f64], w_p: &Matrix2, w_m: &Matrix2, f: fn(f64) -> f64) -> Vec<f64> {
    let p: Vec<f64> = project(w_p, x).into_iter().map(f).collect();
    let m: Vec<f64> = project(w_m, x).into_iter().map(f).collect();
    let mut out = Vec::with_capacity(p.len() * m.len());
    for pi in &p {
        for mj in &m {
            out.push(pi * mj);
        }
    }
    out
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

/// `Σ_{k≥0} γᵏ r_{t+k} + γ^{T−t} V_T − V_t` for a segment with no terminations.
pub fn discounted_advantages(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let t_len = rewards.len();
    (0..t_len)
        .map(|t| {
            let mut ret = 0.0;
            for (k, r) in rewards[t..].iter().enumerate() {
                ret += gamma.powi(k as i32) * r;
            }
            ret + gamma.powi((t_len - t) as i32) * bootstrap - values[t]
        })
        .collect()
}

pub fn to_vecs(v: &[Vector]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.as_slice().to_vec()).collect()
}
