//! Self-checks against the brute-force references in [`crate::oracle`],
//! grouped into suites. Each check reports a measured value, the tolerance
//! it is held to and whether it passed.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;

use crate::a2c::{rollout_loss, TrainConfig, Trainer};
use crate::attention::{canonical_attention, head_step};
use crate::bench::{self, LatencyMode, LatencySettings};
use crate::block::{gru_gate, model_step, GateParams, Model, ModelConfig, ModelState};
use crate::error::Result;
use crate::feature_maps::phi_elu;
use crate::kron::{self, ApproxErrorConfig};
use crate::numerics::{finite_diff_check_with_floor, Backend, Matrix2, Tape, Var, Vector};
use crate::rng;
use crate::tmaze::{gray_code, Action, Cue, Outcome, TMaze, TMazeConfig, N_ACTIONS, OBS_BITS};
use crate::{oracle, Gating, Head, HeadConfig, HeadParams, HeadState, MechanismKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value < tolerance`.
    pub fn below(suite: &'static str, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { suite, name: name.into(), value, tolerance, passed: value < tolerance }
    }

    /// Passes when `value > tolerance`.
    pub fn above(suite: &'static str, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { suite, name: name.into(), value, tolerance, passed: value > tolerance }
    }

    pub fn flag(suite: &'static str, name: impl Into<String>, ok: bool) -> Self {
        let v = if ok { 1.0 } else { 0.0 };
        Self { suite, name: name.into(), value: v, tolerance: 1.0, passed: ok }
    }
}

pub const CHECKS_HEADER: &str = "suite,check,value,tolerance,passed";

/// Name of the wall-clock check every suite ends with.
pub const RUNTIME: &str = "runtime seconds";

/// CSV of the checks. Runtime rows are left out so reruns with the same
/// seed produce identical files; they still show in [`checks_table`].
pub fn checks_csv(checks: &[Check]) -> String {
    let mut out = format!("{CHECKS_HEADER}\n");
    for c in checks.iter().filter(|c| c.name != RUNTIME) {
        let _ = writeln!(out, "{},{},{},{},{}", c.suite, c.name, c.value, c.tolerance, c.passed);
    }
    out
}

/// Fixed-width table for terminals.
pub fn checks_table(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        let _ = writeln!(
            out,
            "{:<4} {:<12} {:<48} {:>12.3e} (tol {:.1e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.suite,
            c.name,
            c.value,
            c.tolerance
        );
    }
    out
}

fn inputs(seed: u64, t: usize, d: usize) -> Matrix2 {
    let mut r = rng::stream(seed, &[rng::label::CHECK]);
    Matrix2::from_fn(t, d, |_, _| r.random_range(-1.0..1.0))
}

fn row(m: &Matrix2, t: usize) -> Vector {
    Vector::new(m.row(t).to_vec())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

// ---- Kronecker-delta approximation ----

pub const KRON_RS: [u64; 7] = [1, 2, 3, 4, 7, 16, 64];

pub fn kron_suite() -> Vec<Check> {
    const S: &str = "kron";
    let start = Instant::now();
    let mut closed = 0.0f64;
    let mut bound = 0.0f64;
    for r in KRON_RS {
        for m in 0..=50u64 {
            for n in 0..=50u64 {
                let d = kron::delta_hat(m, n, r);
                closed = closed.max((d - kron::delta_hat_closed_form(m, n, r)).abs());
                if r > 2 * (m + n).max(1) && (m, n) != (0, 0) {
                    let exact = if m == n { 1.0 } else { 0.0 };
                    bound = bound.max((d - exact).abs() * r as f64 / 4.0);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    vec![
        Check::below(S, "direct sum vs closed form (max abs)", closed, 1e-10),
        Check::flag(S, "limit within 4/r (max ratio <= 1)", bound <= 1.0),
        Check::below(S, RUNTIME, secs, 5.0),
    ]
}

/// Mean-error trend of the reconstruction experiment over `seeds` draws.
pub fn approx_error_suite(seeds: u64, base_seed: u64) -> Result<Vec<Check>> {
    const S: &str = "approx-error";
    let start = Instant::now();
    let cs = [0.25, 0.5, 0.9];
    let grid = ApproxErrorConfig { d: 128, t: 100, rs: vec![4, 64], cs: cs.to_vec(), seeds, base_seed };
    let means = kron::mean_errors(&kron::approx_error_experiment(&grid)?);
    let mut out = Vec::new();
    for c in cs {
        let at = |r| means.iter().find(|m| m.0 == r && m.1 == c).map(|m| m.2).unwrap_or(f64::NAN);
        let (lo, hi) = (at(64), at(4));
        out.push(Check::below(S, format!("c={c} mean error r=64 / r=4"), lo / hi, 1.0));
    }
    let full = ApproxErrorConfig { rs: vec![800], cs: vec![1.0], ..grid };
    let rows = kron::approx_error_experiment(&full)?;
    let worst = rows.iter().map(|r| r.frobenius_error / r.exact_norm).fold(0.0, f64::max);
    out.push(Check::below(S, "c=1 r=800 relative error (worst seed)", worst, 1e-2));
    out.push(Check::below(S, RUNTIME, start.elapsed().as_secs_f64(), 120.0));
    Ok(out)
}

// ---- Mechanism equivalences ----

fn beta_of(head: &Head, x: &Vector) -> Vec<f64> {
    oracle::project(&head.params.w_beta, x.as_slice()).into_iter().map(oracle::logistic).collect()
}

fn gated_overlap(head: &Head, x: &Vector) -> f64 {
    let p = &head.params;
    let k = oracle::outer_feature(x.as_slice(), &p.w_p1, &p.w_k, oracle::relu);
    let q = oracle::outer_feature(x.as_slice(), &p.w_p2, &p.w_q, oracle::relu);
    let g = oracle::outer_feature(x.as_slice(), &p.w_p3, &p.w_gamma, oracle::logistic);
    k.iter().zip(&q).zip(&g).map(|((k, q), g)| k * q * g).sum()
}

fn matrix_state(s: &HeadState<Matrix2>) -> Option<(&Matrix2, &Matrix2)> {
    match s {
        HeadState::Matrix(m) => Some((&m.c, &m.s)),
        _ => None,
    }
}

fn flat_state(s: &HeadState<Matrix2>) -> Vec<f64> {
    let mut v = Vec::new();
    let _ = s.map(|m| v.extend_from_slice(m.data()));
    v
}

/// Heads run through `forward_sequence` in the equivalence suite.
pub fn recurrent_configs() -> Vec<HeadConfig> {
    vec![
        HeadConfig::linear(),
        HeadConfig::galite(2),
        HeadConfig::galite(2).with_gating(Gating::Ungated),
        HeadConfig::agalite(2, 1),
        HeadConfig::agalite(2, 3),
        HeadConfig::agalite(2, 3).with_derivation_scaling(true),
        HeadConfig::random_sign(2),
    ]
}

pub fn equivalence_suite(seed: u64) -> Result<Vec<Check>> {
    const S: &str = "equivalence";
    let (d, d_h) = (6, 4);
    let start = Instant::now();
    let mut out = Vec::new();

    // Linear recurrence against the direct kernel sum.
    let head = Head::random(HeadConfig::linear(), d, d_h, seed)?;
    let xs = inputs(seed, 64, d);
    let (mut st, mut values, mut keys, mut worst) = (head.zero_state(), vec![], vec![], 0.0f64);
    for t in 0..64 {
        let x = row(&xs, t);
        values.push(oracle::project(&head.params.w_v, x.as_slice()));
        keys.push(phi_elu(&Vector::new(oracle::project(&head.params.w_k, x.as_slice()))).into_inner());
        let q = phi_elu(&Vector::new(oracle::project(&head.params.w_q, x.as_slice())));
        let (a, next) = head.step(&x, &st)?;
        worst = worst.max(max_diff(a.as_slice(), &oracle::kernel_attention(&values, &keys, q.as_slice())));
        st = next;
    }
    out.push(Check::below(S, "linear vs kernel attention T=64", worst, 1e-10));

    // GaLiTe state against the unrolled sum of gated outer products.
    let head = Head::random(HeadConfig::galite(2), d, d_h, seed + 1)?;
    let xs = inputs(seed + 1, 32, d);
    let p = &head.params;
    let (mut vs, mut ks, mut bs, mut gs) = (vec![], vec![], vec![], vec![]);
    let mut st = head.zero_state();
    let mut worst = 0.0f64;
    for t in 0..32 {
        let x = row(&xs, t);
        vs.push(oracle::project(&p.w_v, x.as_slice()));
        ks.push(oracle::outer_feature(x.as_slice(), &p.w_p1, &p.w_k, oracle::relu));
        bs.push(beta_of(&head, &x));
        gs.push(oracle::outer_feature(x.as_slice(), &p.w_p3, &p.w_gamma, oracle::logistic));
        st = head.step(&x, &st)?.1;
        let (c, s) = matrix_state(&st).expect("matrix state");
        let want_c = oracle::gated_state_unrolled(&vs, &ks, &bs, &gs);
        let want_s = oracle::gated_normalizer_unrolled(&ks, &gs);
        worst = worst.max(c.max_abs_diff(&want_c)).max(max_diff(s.data(), &want_s));
    }
    out.push(Check::below(S, "galite state vs unrolled sum T=32", worst, 1e-10));

    // AGaLiTe with many phases against GaLiTe.
    let t_len = 16;
    let r = 1u64 << 16;
    let mut worst = 0.0f64;
    for k in 0..5 {
        let galite = Head::random(HeadConfig::galite(2), d, d_h, seed + 10 + k)?;
        let cfg = HeadConfig::agalite(2, r).with_derivation_scaling(true);
        let agalite = Head::new(cfg, galite.params.clone())?;
        let xs = inputs(seed + 10 + k, t_len, d);
        let (ag, _) = agalite.forward_steps(&xs, &agalite.zero_state())?;
        let (ga, _) = galite.forward_steps(&xs, &galite.zero_state())?;
        // Frobenius over the whole output; single rows can be near zero.
        worst = worst.max(ag.sub(&ga)?.frobenius_norm() / ga.frobenius_norm());
    }
    out.push(Check::below(S, format!("agalite r={r} vs galite T=16 (relative frobenius)"), worst, 1e-2));

    // Scan evaluation against step iteration.
    let mut worst = 0.0f64;
    for (i, cfg) in recurrent_configs().into_iter().enumerate() {
        for t_len in [1, 64, 1024] {
            let head = Head::random(cfg, d, d_h, seed + 20 + i as u64)?;
            let xs = inputs(seed + 20 + t_len as u64, t_len, d);
            let (_, warm) = head.forward_steps(&inputs(seed + 30, 3, d), &head.zero_state())?;
            let (seq, s1) = head.forward_sequence(&xs, &warm)?;
            let (steps, s2) = head.forward_steps(&xs, &warm)?;
            worst = worst.max(seq.max_abs_diff(&steps)).max(max_diff(&flat_state(&s1), &flat_state(&s2)));
        }
    }
    out.push(Check::below(S, "scan vs steps T<=1024 (all recurrent)", worst, 1e-10));

    // Windowed attention with the whole history in memory.
    let mut worst = 0.0f64;
    for t_len in [1, 4, 16, 32] {
        let head = Head::random(HeadConfig::windowed(t_len), d, d_h, seed + 40)?;
        let xs = inputs(seed + 40 + t_len as u64, t_len, d);
        let (outp, _) = head.forward_steps(&xs, &head.zero_state())?;
        worst = worst.max(outp.max_abs_diff(&canonical_attention(&xs, &head.params)?));
    }
    out.push(Check::below(S, "windowed M>=T vs canonical attention", worst, 1e-12));
    out.push(Check::below(S, RUNTIME, start.elapsed().as_secs_f64(), 60.0));
    Ok(out)
}

/// An input whose gated key/query overlap is at least `min`. Inputs are
/// drawn at growing scale, since the learned features grow with |x|.
fn strong_input(head: &Head, seed: u64, min: f64) -> Vector {
    for i in 0..10_000u64 {
        let scale = 1.0 + (i / 100) as f64;
        let x = Vector::new(inputs(seed * 10_000 + i, 1, head.d()).row(0).iter().map(|v| v * scale).collect());
        if gated_overlap(head, &x) >= min {
            return x;
        }
    }
    panic!("no input with overlap {min}")
}

/// First-step outputs against the ideal values, without the denominator
/// guard. Inputs are chosen so the guard's share stays below tolerance.
pub fn first_step_suite(seed: u64) -> Result<Vec<Check>> {
    const S: &str = "first-step";
    let (d, d_h) = (6, 4);
    let mut out = Vec::new();

    let head = Head::random(HeadConfig::linear(), d, d_h, seed)?;
    let mut worst = 0.0f64;
    for i in 0..20 {
        let x = row(&inputs(seed + 100 + i, 1, d), 0);
        let v = oracle::project(&head.params.w_v, x.as_slice());
        let (a, _) = head.step(&x, &head.zero_state())?;
        worst = worst.max(rel_err(a.as_slice(), &v));
    }
    out.push(Check::below(S, "linear -> v", worst, 1e-6));

    for (name, cfg) in [
        ("galite -> beta*v", HeadConfig::galite(2)),
        ("agalite r=1 tick 0 -> beta*v", HeadConfig::agalite(2, 1)),
    ] {
        let head = Head::random(cfg, d, d_h, seed + 1)?;
        let mut worst = 0.0f64;
        for i in 0..5 {
            let x = strong_input(&head, seed + 200 + i, 1.0);
            let v = oracle::project(&head.params.w_v, x.as_slice());
            let bv: Vec<f64> = beta_of(&head, &x).iter().zip(&v).map(|(b, v)| b * v).collect();
            let (a, _) = head.step(&x, &head.zero_state())?;
            worst = worst.max(rel_err(a.as_slice(), &bv));
        }
        out.push(Check::below(S, name, worst, 1e-6));
    }
    Ok(out)
}

// ---- Gradients ----

/// Denominator floor of the pinned gradient metric.
pub const PINNED_FLOOR: f64 = 1e-8;
/// Floor above the central-difference round-off level at `h = 1e-5`.
pub const ROUNDOFF_FLOOR: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

fn head_vars(tape: &mut Tape, flat: Var, d: usize, d_h: usize, eta: usize) -> HeadParams<Var> {
    let mut offset = 0;
    HeadParams::from_array(HeadParams::<Matrix2>::shapes(d, d_h, eta).map(|(r, c)| {
        let v = tape.slice(&flat, offset, r, c);
        offset += r * c;
        v
    }))
}

/// Worst relative error for each floor, over the coordinates of `theta`.
fn fd_pair<F>(f: F, theta: &[f64]) -> (f64, f64)
where
    F: Fn(&mut Tape, Var) -> Var,
{
    (
        finite_diff_check_with_floor(&f, theta, FD_STEP, PINNED_FLOOR),
        finite_diff_check_with_floor(&f, theta, FD_STEP, ROUNDOFF_FLOOR),
    )
}

fn push_fd(out: &mut Vec<Check>, name: &str, (pinned, floored): (f64, f64)) {
    const S: &str = "gradient";
    out.push(Check::below(S, name.to_string(), pinned, 1e-5));
    out.push(Check::below(S, format!("{name} [floor {ROUNDOFF_FLOOR:e}]"), floored, 1e-5));
}

fn gradient_dims_model(obs_dim: usize, n_actions: usize) -> ModelConfig {
    ModelConfig {
        d: 6,
        heads: 2,
        d_h: 4,
        layers: 2,
        actor_width: 6,
        critic_width: 6,
        ..ModelConfig::new(obs_dim, n_actions, HeadConfig::agalite(2, 2))
    }
}

/// Finite-difference agreement at d=6, d_h=4, η=2, r=2, two heads, T=5,
/// reported under the pinned metric and under the round-off floor.
pub fn gradient_suite(seed: u64) -> Result<Vec<Check>> {
    let (d, d_h, t_len) = (6, 4, 5);
    let start = Instant::now();
    let xs = inputs(seed, t_len, d);
    let readout = Matrix2::column(vec![0.7, -0.4, 1.1, 0.25]);
    let mechanisms = [
        ("linear", HeadConfig::linear()),
        ("galite", HeadConfig::galite(2)),
        ("agalite", HeadConfig::agalite(2, 2)),
        ("random-sign", HeadConfig::random_sign(2)),
        ("windowed", HeadConfig::windowed(3)),
    ];
    let mut out = Vec::new();
    for (name, cfg) in mechanisms {
        let head = Head::random(cfg, d, d_h, seed + 1)?;
        let theta: Vec<f64> = head.params.iter().iter().flat_map(|m| m.data().to_vec()).collect();
        // Window caches hold constants; pin them at their unperturbed values.
        let mut states = Vec::new();
        let mut st = head.zero_state();
        for t in 0..t_len {
            states.push(st.clone());
            st = head.step(&row(&xs, t), &st)?.1;
        }
        let windowed = matches!(cfg.kind, MechanismKind::Windowed { .. });
        let f = |tape: &mut Tape, flat: Var| -> Var {
            let p = head_vars(tape, flat, d, d_h, cfg.eta());
            let w = tape.constant(readout.clone());
            let mut state = head.zero_state().map(|m| tape.constant(m.clone()));
            let mut total: Option<Var> = None;
            for (t, frozen) in states.iter().enumerate() {
                if windowed {
                    state = frozen.map(|m| tape.constant(m.clone()));
                }
                let x = tape.constant(Matrix2::column(xs.row(t).to_vec()));
                let (a, next) = head_step(tape, &cfg, &p, &x, state);
                state = next;
                let term = tape.dot(&a, &w);
                total = Some(match total {
                    None => term,
                    Some(s) => tape.add(&s, &term),
                });
            }
            total.expect("T > 0")
        };
        push_fd(&mut out, name, fd_pair(f, &theta));
    }

    // GRU gate.
    let mut r = rng::stream(seed, &[rng::label::CHECK, 1]);
    let theta: Vec<f64> = (0..6 * d * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let f = |tape: &mut Tape, flat: Var| -> Var {
        let mut m = (0..6).map(|i| tape.slice(&flat, i * d * d, d, d));
        let p = GateParams {
            w_r: m.next().unwrap(),
            u_r: m.next().unwrap(),
            w_z: m.next().unwrap(),
            u_z: m.next().unwrap(),
            w_g: m.next().unwrap(),
            u_g: m.next().unwrap(),
        };
        let mut total: Option<Var> = None;
        for t in 0..t_len - 1 {
            let x = tape.constant(Matrix2::column(xs.row(t).to_vec()));
            let y = tape.constant(Matrix2::column(xs.row(t + 1).to_vec()));
            let g = gru_gate(tape, &p, &x, &y, 2.0);
            let s = tape.sum(&g);
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(&acc, &s),
            });
        }
        total.expect("T > 1")
    };
    push_fd(&mut out, "gru-gate", fd_pair(f, &theta));

    // Two-block stack.
    let cfg = gradient_dims_model(d, 4);
    let model = Model::init(&cfg, seed + 2)?;
    let probe = Matrix2::column((0..d).map(|i| 0.3 - 0.1 * i as f64).collect());
    let f = |tape: &mut Tape, flat: Var| -> Var {
        let p = model.store.view(tape, &flat);
        let w = tape.constant(probe.clone());
        let mut state = ModelState::zeros(&cfg, 0).map(|m| tape.constant(m.clone()));
        let mut total: Option<Var> = None;
        for t in 0..t_len {
            let obs = tape.constant(Matrix2::column(xs.row(t).to_vec()));
            let (feat, next) = model_step(tape, &cfg, &p, &obs, state);
            state = next;
            let term = tape.dot(&feat, &w);
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(&acc, &term),
            });
        }
        total.expect("T > 0")
    };
    push_fd(&mut out, "2-block stack", fd_pair(f, model.store.data()));

    // Full A2C loss over one rollout of length T.
    let cfg = gradient_dims_model(OBS_BITS, N_ACTIONS);
    let train = TrainConfig { rollout_len: t_len, num_envs: 1, seed: seed + 3, ..Default::default() };
    let mut trainer = Trainer::new(&cfg, &train, &TMazeConfig::new(3, seed))?;
    trainer.rollout()?;
    let rollout = trainer.rollout()?;
    let model = trainer.model();
    let f = |tape: &mut Tape, flat: Var| -> Var {
        rollout_loss(tape, model, &flat, &rollout.segments, &train).expect("valid rollout")
    };
    push_fd(&mut out, "a2c loss", fd_pair(f, model.store.data()));

    out.push(Check::below("gradient", RUNTIME, start.elapsed().as_secs_f64(), 120.0));
    Ok(out)
}

// ---- Complexity ----

pub fn complexity_suite() -> Result<Vec<Check>> {
    const S: &str = "complexity";
    let reference = |head| ModelConfig { d: 64, heads: 1, d_h: 64, layers: 1, ..ModelConfig::new(8, 4, head) };
    let mut out = Vec::new();

    let ag = reference(HeadConfig::agalite(4, 1));
    let counts: Vec<(u64, u64)> = [1u64, 100, 10_000]
        .iter()
        .map(|&t| bench::count_ops(&ag, t).map(|c| (c.mul_adds, c.activations)))
        .collect::<Result<_>>()?;
    out.push(Check::flag(S, "agalite ops equal at t=1,1e2,1e4", counts.windows(2).all(|w| w[0] == w[1])));

    let ms: Vec<usize> = (1..=32).map(|i| 16 * i).collect();
    let ops: Vec<f64> = ms
        .iter()
        .map(|&m| {
            let cfg = ModelConfig { d: 32, heads: 2, d_h: 16, layers: 1, ..ModelConfig::new(8, 4, HeadConfig::windowed(m)) };
            bench::count_ops(&cfg, m as u64).map(|c| c.mul_adds as f64)
        })
        .collect::<Result<_>>()?;
    let x: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
    let fit = bench::linear_fit(&x, &ops)?;
    out.push(Check::above(S, "windowed ops vs M, R^2", fit.r_squared, 0.999));

    let mut all_match = true;
    for head in [
        HeadConfig::linear(),
        HeadConfig::galite(4),
        HeadConfig::agalite(4, 1),
        HeadConfig::agalite(2, 7),
        HeadConfig::random_sign(3),
        HeadConfig::windowed(16),
    ] {
        let cfg = ModelConfig { d: 16, heads: 2, d_h: 8, layers: 2, ..ModelConfig::new(8, 4, head) };
        let allocated: usize = (0..cfg.layers * cfg.heads)
            .map(|i| bench::warm_state(&cfg.head, cfg.d_h, 1 << 20, i as u64).scalars())
            .sum();
        all_match &= allocated == bench::state_size(&cfg);
    }
    out.push(Check::flag(S, "state_size equals allocation", all_match));

    let ratio = bench::state_size(&reference(HeadConfig::galite(4))) as f64
        / bench::state_size(&reference(HeadConfig::agalite(4, 1))) as f64;
    out.push(Check::above(S, "galite/agalite state ratio", ratio, 10.0));
    Ok(out)
}

// ---- Latency ----

pub const AGALITE_CONTEXTS: [u64; 5] = [1, 10, 100, 1_000, 10_000];
pub const WINDOW_SIZES: [u64; 4] = [64, 128, 256, 512];

/// Trend checks on step latency: flat in position for AGaLiTe, rising in
/// memory size for windowed attention.
pub fn latency_suite(settings: &LatencySettings) -> Result<(Vec<Check>, Vec<bench::LatencyReport>)> {
    const S: &str = "latency";
    let start = Instant::now();
    let ag = Head::random(HeadConfig::agalite(4, 1), 64, 64, 0)?;
    let ag_rows = bench::measure_latency(&ag, LatencyMode::Step, &AGALITE_CONTEXTS, settings)?;
    let fit = bench::latency_trend(&ag_rows)?;
    let win = Head::random(HeadConfig::windowed(64), 64, 64, 0)?;
    let win_rows = bench::measure_latency(&win, LatencyMode::Step, &WINDOW_SIZES, settings)?;
    let rising = win_rows.windows(2).all(|w| w[1].mean_ms - w[0].mean_ms > 2.0 * (w[0].stderr_ms + w[1].stderr_ms));
    // Whole repeated sweeps, each summarized by its mean over contexts.
    let sweep_mean = |rows: &[bench::LatencyReport]| rows.iter().map(|r| r.mean_ms).sum::<f64>() / rows.len() as f64;
    let mut repeats = vec![sweep_mean(&ag_rows)];
    for _ in 0..4 {
        repeats.push(sweep_mean(&bench::measure_latency(&ag, LatencyMode::Step, &AGALITE_CONTEXTS, settings)?));
    }
    let mean = repeats.iter().sum::<f64>() / repeats.len() as f64;
    let var = repeats.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (repeats.len() - 1) as f64;
    let out = vec![
        Check::below(S, "agalite |slope| / stderr", fit.slope.abs() / fit.slope_stderr, 2.0),
        Check::flag(S, "windowed strictly increasing in M", rising),
        Check::below(S, "repeat-run coefficient of variation", var.sqrt() / mean, 0.2),
        Check::below(S, RUNTIME, start.elapsed().as_secs_f64(), 180.0),
    ];
    Ok((out, ag_rows.into_iter().chain(win_rows).collect()))
}

// ---- Environment ----

/// Probability mass more than four standard errors from `p` is about 6e-5.
fn binomial_ok(successes: usize, trials: usize, p: f64) -> (f64, f64) {
    let rate = successes as f64 / trials as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    ((rate - p).abs(), 4.0 * se)
}

pub fn environment_suite(seed: u64) -> Result<Vec<Check>> {
    const S: &str = "environment";
    let start = Instant::now();
    let mut out = Vec::new();

    let one_bit = (0..=254).all(|n| {
        let (a, b) = (gray_code(n).expect("in range"), gray_code(n + 1).expect("in range"));
        a.iter().zip(&b).filter(|(x, y)| x != y).count() == 1
    });
    out.push(Check::flag(S, "gray code one-bit steps on [0,254]", one_bit));

    let mut exact = true;
    for length in [1, 2, 5, 10, 50, 120, 200, 255] {
        let mut env = TMaze::new(TMazeConfig::new(length, seed))?;
        for _ in 0..3 {
            env.reset();
            for _ in 0..length {
                env.step(Action::Right)?;
            }
            let s = env.step(env.cue().rewarded_action())?;
            exact &= s.outcome == Some(Outcome::Success) && env.episode_return_tenths() == 40 - length as i64;
        }
    }
    out.push(Check::flag(S, "optimal return = 4 - 0.1 L exactly", exact));

    let n = 10_000;
    let mut env = TMaze::new(TMazeConfig::new(3, seed))?;
    let ups = (0..n)
        .filter(|_| {
            env.reset();
            env.cue() == Cue::Up
        })
        .count();
    let (dev, bound) = binomial_ok(ups, n, 0.5);
    out.push(Check::below(S, "cue frequency |p-0.5|", dev, bound));

    let mut env = TMaze::new(TMazeConfig::new(2, seed + 1))?;
    let mut policy = rng::stream(seed, &[rng::label::POLICY]);
    let (mut decisions, mut wins) = (0, 0);
    while decisions < n {
        env.reset();
        loop {
            let s = env.step(Action::from_index(policy.random_range(0..N_ACTIONS))?)?;
            if s.done {
                match s.outcome {
                    Some(Outcome::Success) => {
                        decisions += 1;
                        wins += 1;
                    }
                    Some(Outcome::WrongTurn) => decisions += 1,
                    _ => {}
                }
                break;
            }
        }
    }
    let (dev, bound) = binomial_ok(wins, decisions, 0.5);
    out.push(Check::below(S, "random junction success |p-0.5|", dev, bound));
    out.push(Check::below(S, RUNTIME, start.elapsed().as_secs_f64(), 10.0));
    Ok(out)
}

/// The suites run by `equiv`.
pub fn oracle_suites(seed: u64) -> Result<Vec<Check>> {
    let suites: Vec<Result<Vec<Check>>> = (0..5usize)
        .into_par_iter()
        .map(|i| match i {
            0 => Ok(kron_suite()),
            1 => equivalence_suite(seed),
            2 => first_step_suite(seed),
            3 => complexity_suite(),
            _ => environment_suite(seed),
        })
        .collect();
    let mut out = Vec::new();
    for s in suites {
        out.extend(s?);
    }
    Ok(out)
}
