//! Cosine approximation of the Kronecker delta and the low-rank state
//! reconstructions built on it.
//!
//! `δ̂(m, n) = (2/r) Σ_{i=0..r} cos(2πim/r) cos(2πin/r)`. Summing the gated
//! outer products `l_i ⊗ m_i` against `δ̂` is what lets `r + 1` vector
//! recurrences stand in for one matrix recurrence.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::numerics::{Matrix2, Vector};
use crate::rng::{self, label, Rng};

/// `cos(2π i t / r)`, with `i t` reduced modulo `r` first so the phase is
/// exactly periodic in `t` and costs the same at any stream position.
pub fn cosine_phase(i: u64, t: u64, r: u64) -> f64 {
    let k = (i as u128 * t as u128) % r as u128;
    (2.0 * PI * k as f64 / r as f64).cos()
}

pub fn delta_hat(m: u64, n: u64, r: u64) -> f64 {
    assert!(r >= 1, "r must be positive");
    let mut sum = 0.0;
    for i in 0..=r {
        sum += cosine_phase(i, m, r) * cosine_phase(i, n, r);
    }
    2.0 / r as f64 * sum
}

/// `(S(m−n) + S(m+n)) / r` with `S(k) = r + 1` when `r | k`, else 1.
pub fn delta_hat_closed_form(m: u64, n: u64, r: u64) -> f64 {
    assert!(r >= 1, "r must be positive");
    let s = |k: u64| if k.is_multiple_of(r) { (r + 1) as f64 } else { 1.0 };
    (s(m.abs_diff(n)) + s(m + n)) / r as f64
}

fn check_sequences(
    values: &[Vector],
    keys: &[Vector],
    betas: &[Vector],
    gammas: &[Vector],
) -> Result<(usize, usize)> {
    let t = values.len();
    if t == 0 || keys.len() != t || betas.len() != t || gammas.len() != t {
        return shape_err(format!(
            "sequence lengths values={} keys={} betas={} gammas={}",
            values.len(),
            keys.len(),
            betas.len(),
            gammas.len()
        ));
    }
    let (dv, dk) = (values[0].len(), keys[0].len());
    for i in 0..t {
        if values[i].len() != dv || betas[i].len() != dv {
            return shape_err(format!("value/beta length mismatch at step {i}"));
        }
        if keys[i].len() != dk || gammas[i].len() != dk {
            return shape_err(format!("key/gamma length mismatch at step {i}"));
        }
    }
    Ok((dv, dk))
}

/// `C_t = ((1−β_t) ⊗ (1−γ_t)) ⊙ C_{t−1} + (β_t ⊙ v_t) ⊗ (γ_t ⊙ k_t)` from zero.
pub fn exact_gated_state(
    values: &[Vector],
    keys: &[Vector],
    betas: &[Vector],
    gammas: &[Vector],
) -> Result<Matrix2> {
    let (dv, dk) = check_sequences(values, keys, betas, gammas)?;
    let mut c = vec![0.0; dv * dk];
    for t in 0..values.len() {
        let (v, k, b, g) = (
            values[t].as_slice(),
            keys[t].as_slice(),
            betas[t].as_slice(),
            gammas[t].as_slice(),
        );
        for i in 0..dv {
            let row = &mut c[i * dk..(i + 1) * dk];
            for j in 0..dk {
                row[j] = (1.0 - b[i]) * (1.0 - g[j]) * row[j] + (b[i] * v[i]) * (g[j] * k[j]);
            }
        }
    }
    Matrix2::from_vec(dv, dk, c)
}

/// Runs the `r + 1` phased vector recurrences from zero and returns
/// `(2/r) Σ_i ṽ^i ⊗ k̃^i`.
///
/// The first element takes phase index 1. Index 0 would pair it with
/// `δ̂(0, 0) = 2(r + 1)/r`, doubling its contribution for every `r`.
pub fn reconstruct_c(
    values: &[Vector],
    keys: &[Vector],
    betas: &[Vector],
    gammas: &[Vector],
    r: u64,
) -> Result<Matrix2> {
    if r == 0 {
        return Err(crate::Error::Range("r must be at least 1".into()));
    }
    let (dv, dk) = check_sequences(values, keys, betas, gammas)?;
    let n = r as usize + 1;
    let mut vt = vec![vec![0.0; dv]; n];
    let mut kt = vec![vec![0.0; dk]; n];
    for t in 0..values.len() {
        let (v, k, b, g) = (
            values[t].as_slice(),
            keys[t].as_slice(),
            betas[t].as_slice(),
            gammas[t].as_slice(),
        );
        for i in 0..n {
            let phase = cosine_phase(i as u64, t as u64 + 1, r);
            for (j, x) in vt[i].iter_mut().enumerate() {
                *x = (1.0 - b[j]) * *x + phase * (b[j] * v[j]);
            }
            for (j, x) in kt[i].iter_mut().enumerate() {
                *x = (1.0 - g[j]) * *x + phase * (g[j] * k[j]);
            }
        }
    }
    let scale = 2.0 / r as f64;
    let mut c = vec![0.0; dv * dk];
    for i in 0..n {
        for (a, &vi) in vt[i].iter().enumerate() {
            let row = &mut c[a * dk..(a + 1) * dk];
            for (x, &kj) in row.iter_mut().zip(&kt[i]) {
                *x += vi * kj;
            }
        }
    }
    for x in &mut c {
        *x *= scale;
    }
    Matrix2::from_vec(dv, dk, c)
}

/// Single rank-1 estimate: one vector pair updated with an independent
/// uniform ±1 sign per step in place of the cosine phases.
pub fn rank1_sign_reconstruct(
    values: &[Vector],
    keys: &[Vector],
    betas: &[Vector],
    gammas: &[Vector],
    rng: &mut Rng,
) -> Result<Matrix2> {
    let (dv, dk) = check_sequences(values, keys, betas, gammas)?;
    let mut vt = vec![0.0; dv];
    let mut kt = vec![0.0; dk];
    for t in 0..values.len() {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let (v, k, b, g) = (
            values[t].as_slice(),
            keys[t].as_slice(),
            betas[t].as_slice(),
            gammas[t].as_slice(),
        );
        for (j, x) in vt.iter_mut().enumerate() {
            *x = (1.0 - b[j]) * *x + sign * (b[j] * v[j]);
        }
        for (j, x) in kt.iter_mut().enumerate() {
            *x = (1.0 - g[j]) * *x + sign * (g[j] * k[j]);
        }
    }
    Ok(crate::numerics::outer(&Vector::new(vt), &Vector::new(kt)))
}

#[derive(Clone, Debug)]
pub struct ApproxErrorConfig {
    pub d: usize,
    pub t: usize,
    pub rs: Vec<u64>,
    pub cs: Vec<f64>,
    pub seeds: u64,
    pub base_seed: u64,
}

impl Default for ApproxErrorConfig {
    fn default() -> Self {
        Self {
            d: 128,
            t: 100,
            rs: vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 800],
            cs: vec![0.25, 0.5, 0.9, 1.0],
            seeds: 50,
            base_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApproxErrorRow {
    pub r: u64,
    pub c: f64,
    pub seed: u64,
    pub frobenius_error: f64,
    /// `‖C_T‖_F` of the exact state, for relative errors.
    pub exact_norm: f64,
}

/// Standard-normal values and keys for one seed. The data depends only on the
/// seed so every `(r, c)` cell is compared on the same inputs.
pub fn sample_sequence(d: usize, t: usize, base_seed: u64, seed: u64) -> (Vec<Vector>, Vec<Vector>) {
    let mut rng = rng::stream(base_seed, &[label::APPROX_DATA, seed]);
    let mut draw = |_| Vector::new((0..d).map(|_| rng.sample(StandardNormal)).collect());
    let values: Vec<Vector> = (0..t).map(&mut draw).collect();
    let keys: Vec<Vector> = (0..t).map(&mut draw).collect();
    (values, keys)
}

/// Frobenius error of the cosine reconstruction against the exact state,
/// with gates held at the constant `c`.
pub fn approx_error_cell(values: &[Vector], keys: &[Vector], r: u64, c: f64) -> Result<(f64, f64)> {
    let betas = vec![Vector::filled(values[0].len(), c); values.len()];
    let gammas = vec![Vector::filled(keys[0].len(), c); keys.len()];
    let exact = exact_gated_state(values, keys, &betas, &gammas)?;
    let approx = reconstruct_c(values, keys, &betas, &gammas, r)?;
    Ok((approx.sub(&exact)?.frobenius_norm(), exact.frobenius_norm()))
}

/// One row per `(r, c, seed)` in grid order; cells run in parallel but each
/// depends only on its own inputs.
pub fn approx_error_experiment(cfg: &ApproxErrorConfig) -> Result<Vec<ApproxErrorRow>> {
    let data: Vec<(Vec<Vector>, Vec<Vector>)> = (0..cfg.seeds)
        .into_par_iter()
        .map(|s| sample_sequence(cfg.d, cfg.t, cfg.base_seed, s))
        .collect();
    let cells: Vec<(u64, f64, u64)> = cfg
        .rs
        .iter()
        .flat_map(|&r| {
            cfg.cs
                .iter()
                .flat_map(move |&c| (0..cfg.seeds).map(move |s| (r, c, s)))
        })
        .collect();
    cells
        .into_par_iter()
        .map(|(r, c, seed)| {
            let (values, keys) = &data[seed as usize];
            let (err, norm) = approx_error_cell(values, keys, r, c)?;
            Ok(ApproxErrorRow { r, c, seed, frobenius_error: err, exact_norm: norm })
        })
        .collect()
}

/// Mean Frobenius error per `(r, c)`, in first-appearance order.
pub fn mean_errors(rows: &[ApproxErrorRow]) -> Vec<(u64, f64, f64)> {
    let mut out: Vec<(u64, f64, f64, usize)> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|e| e.0 == row.r && e.1 == row.c) {
            Some(e) => {
                e.2 += row.frobenius_error;
                e.3 += 1;
            }
            None => out.push((row.r, row.c, row.frobenius_error, 1)),
        }
    }
    out.into_iter().map(|(r, c, s, n)| (r, c, s / n as f64)).collect()
}

/// CSV with header `r,c,seed,frobenius_error`, floats in shortest round-trip form.
pub fn approx_error_csv(rows: &[ApproxErrorRow]) -> String {
    let mut out = String::from("r,c,seed,frobenius_error\n");
    for row in rows {
        let _ = writeln!(out, "{},{},{},{}", row.r, row.c, row.seed, row.frobenius_error);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_examples() {
        assert!((delta_hat(0, 0, 4) - 2.5).abs() < 1e-12);
        assert!((delta_hat(2, 5, 1000) - 0.002).abs() < 1e-12);
        assert!((delta_hat(1, 3, 4) - 1.5).abs() < 1e-12);
        assert!((delta_hat(7, 7, 1000) - 1.002).abs() < 1e-12);
        assert!((delta_hat_closed_form(1, 2, 3) - 5.0 / 3.0).abs() < 1e-15);
        for r in 1..20 {
            assert_eq!(delta_hat_closed_form(0, 0, r), 2.0 * (r + 1) as f64 / r as f64);
        }
    }

    #[test]
    fn direct_sum_matches_closed_form() {
        for r in [1, 2, 3, 4, 7, 16] {
            for m in 0..=50 {
                for n in 0..=50 {
                    let (a, b) = (delta_hat(m, n, r), delta_hat_closed_form(m, n, r));
                    assert!((a - b).abs() < 1e-10, "m={m} n={n} r={r}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn no_aliasing_values_are_exact() {
        for r in [8u64, 12, 20, 64] {
            for m in 1..r / 2 {
                for n in 1..r / 2 {
                    let want = if m == n { 1.0 + 2.0 / r as f64 } else { 2.0 / r as f64 };
                    assert_eq!(delta_hat_closed_form(m, n, r), want);
                }
            }
        }
    }

    #[test]
    fn phase_is_periodic() {
        for r in [1u64, 3, 8, 1000] {
            for i in 0..=r.min(20) {
                assert_eq!(cosine_phase(i, 5, r), cosine_phase(i, 5 + 7 * r, r));
            }
        }
        assert_eq!(cosine_phase(3, 0, 7), 1.0);
    }

    fn random_inputs(seed: u64, d: usize, t: usize) -> (Vec<Vector>, Vec<Vector>) {
        sample_sequence(d, t, 99, seed)
    }

    #[test]
    fn single_step_full_gates_r1() {
        let (v, k) = random_inputs(1, 3, 1);
        let ones_v = vec![Vector::filled(3, 1.0)];
        let ones_k = ones_v.clone();
        let c = reconstruct_c(&v, &k, &ones_v, &ones_k, 1).unwrap();
        let want = crate::numerics::outer(&v[0], &k[0]).scale(4.0);
        assert!(c.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn moderate_r_is_close() {
        let (v, k) = random_inputs(2, 8, 20);
        let (err, norm) = approx_error_cell(&v, &k, 200, 0.5).unwrap();
        assert!(err < 0.05 * norm, "{err} vs {norm}");
    }

    #[test]
    fn large_r_limit() {
        let t = 20;
        for (seed, c) in [(3u64, 0.25), (4, 0.5), (5, 0.9), (6, 1.0)] {
            let (v, k) = random_inputs(seed, 8, t);
            let (err, norm) = approx_error_cell(&v, &k, 4096, c).unwrap();
            assert!(err < 1e-2 * norm, "c={c}: {err} vs {norm}");
        }
    }

    #[test]
    fn rank1_single_step_is_exact() {
        let (v, k) = random_inputs(7, 4, 1);
        let b = vec![Vector::new(vec![0.3, 0.6, 0.9, 0.2])];
        let g = vec![Vector::new(vec![0.5, 0.1, 0.7, 0.4])];
        let mut rng = rng::stream(1, &[]);
        let c = rank1_sign_reconstruct(&v, &k, &b, &g, &mut rng).unwrap();
        let exact = exact_gated_state(&v, &k, &b, &g).unwrap();
        assert!(c.max_abs_diff(&exact) < 1e-15);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let (v, k) = random_inputs(8, 4, 3);
        let g = vec![Vector::filled(4, 0.5); 2];
        assert!(reconstruct_c(&v, &k, &g, &g, 4).is_err());
        assert!(exact_gated_state(&v, &k[..2], &g, &g).is_err());
    }

    #[test]
    fn csv_format() {
        let rows = vec![ApproxErrorRow { r: 4, c: 0.5, seed: 0, frobenius_error: 0.1, exact_norm: 1.0 }];
        assert_eq!(approx_error_csv(&rows), "r,c,seed,frobenius_error\n4,0.5,0,0.1\n");
    }
}
