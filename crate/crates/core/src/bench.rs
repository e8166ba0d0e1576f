//! Operation counts, state sizes and step latency.
//!
//! An operation is one scalar multiply-add inside the attention heads of a
//! model (feature maps, gates, state update and readout). Activation
//! evaluations are tallied separately.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;

use crate::attention::{Head, HeadConfig, HeadState, MechanismKind};
use crate::block::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Eval, Matrix2, Vector};
use crate::rng;

/// State of one head as it stands after absorbing `t` elements. Only the
/// shape-relevant parts are filled in: the AGaLiTe tick and the windowed
/// buffer occupancy `min(t, M)`.
pub fn warm_state(cfg: &HeadConfig, d_h: usize, t: u64, seed: u64) -> HeadState<Matrix2> {
    let mut state = HeadState::zeros(cfg, d_h, seed);
    let mut r = rng::stream(seed, &[rng::label::BENCH]);
    match &mut state {
        HeadState::Agalite(s) => s.tick = t,
        HeadState::Window(w) => {
            let n = (t as usize).min(w.memory);
            for _ in 0..n {
                w.keys.push_back(Matrix2::from_fn(d_h, 1, |_, _| r.random_range(-1.0..1.0)));
                w.values.push_back(Matrix2::from_fn(d_h, 1, |_, _| r.random_range(-1.0..1.0)));
            }
        }
        _ => {}
    }
    state
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpCountReport {
    pub mechanism: &'static str,
    pub d: usize,
    pub d_h: usize,
    pub heads: usize,
    pub eta: usize,
    pub r: u64,
    pub memory: usize,
    pub t: u64,
    pub mul_adds: u64,
    pub activations: u64,
    pub state_scalars: usize,
}

pub fn mechanism_name(cfg: &HeadConfig) -> &'static str {
    match cfg.kind {
        MechanismKind::Linear => "linear",
        MechanismKind::Galite => "galite",
        MechanismKind::Agalite { .. } => "agalite",
        MechanismKind::RandomSign => "random-sign",
        MechanismKind::Windowed { .. } => "windowed",
    }
}

/// Recurrent state scalars over all layers of the model.
pub fn state_size(cfg: &ModelConfig) -> usize {
    cfg.layers * cfg.state_scalars_per_layer()
}

/// Exact tallies for one step of every attention head in the model, with
/// each head's state warmed to position `t`.
pub fn count_ops(cfg: &ModelConfig, t: u64) -> Result<OpCountReport> {
    cfg.validate()?;
    let model = Model::init(cfg, 0)?;
    let mut x_rng = rng::stream(0, &[rng::label::BENCH, t]);
    let x = Vector::new((0..cfg.d).map(|_| x_rng.random_range(-1.0..1.0)).collect());
    let mut eval = Eval::new();
    for (l, block) in model.params().blocks.iter().enumerate() {
        for (h, params) in block.heads.iter().enumerate() {
            let head = Head::new(cfg.head, params.clone())?;
            let state = warm_state(&cfg.head, cfg.d_h, t, rng::derive_seed(0, &[l as u64, h as u64]));
            head.step_counted(&mut eval, &x, &state)?;
        }
    }
    let (r, memory) = match cfg.head.kind {
        MechanismKind::Agalite { r } => (r, 0),
        MechanismKind::Windowed { memory } => (0, memory),
        _ => (0, 0),
    };
    Ok(OpCountReport {
        mechanism: mechanism_name(&cfg.head),
        d: cfg.d,
        d_h: cfg.d_h,
        heads: cfg.heads,
        eta: cfg.head.eta(),
        r,
        memory,
        t,
        mul_adds: eval.mul_adds,
        activations: eval.activations,
        state_scalars: state_size(cfg),
    })
}

pub const OPCOUNT_HEADER: &str = "mechanism,d,d_h,heads,eta,r,M,t,mul_adds,activations,state_scalars";

pub fn opcount_csv(rows: &[OpCountReport]) -> String {
    let mut out = format!("{OPCOUNT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.mechanism, r.d, r.d_h, r.heads, r.eta, r.r, r.memory, r.t, r.mul_adds, r.activations, r.state_scalars
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatencyMode {
    /// One recurrent step from a warmed state.
    Step,
    /// `forward_sequence` over a sequence whose length is the context.
    Sequence,
}

impl LatencyMode {
    pub fn name(self) -> &'static str {
        match self {
            LatencyMode::Step => "step",
            LatencyMode::Sequence => "sequence",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub mechanism: &'static str,
    pub mode: LatencyMode,
    /// Stream position for recurrent heads, memory size for windowed ones.
    pub context: u64,
    pub mean_ms: f64,
    pub stderr_ms: f64,
    pub reps: usize,
    /// Per-repetition milliseconds, in measurement order.
    pub samples: Vec<f64>,
}

pub const LATENCY_HEADER: &str = "mechanism,mode,context,mean_ms,stderr_ms,reps";

pub fn latency_csv(rows: &[LatencyReport]) -> String {
    let mut out = format!("{LATENCY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.mechanism,
            r.mode.name(),
            r.context,
            r.mean_ms,
            r.stderr_ms,
            r.reps
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencySettings {
    pub reps: usize,
    pub warmup: usize,
    /// Calls timed together in one repetition.
    pub inner: usize,
    /// Groups for the median of means.
    pub groups: usize,
}

impl Default for LatencySettings {
    fn default() -> Self {
        Self { reps: 30, warmup: 5, inner: 20, groups: 5 }
    }
}

/// Median of the group means of `samples`, split into `groups` contiguous
/// groups.
pub fn median_of_means(samples: &[f64], groups: usize) -> f64 {
    let groups = groups.clamp(1, samples.len().max(1));
    let size = samples.len() / groups;
    let mut means: Vec<f64> = (0..groups)
        .map(|g| {
            let end = if g + 1 == groups { samples.len() } else { (g + 1) * size };
            let chunk = &samples[g * size..end];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let n = means.len();
    if n % 2 == 1 {
        means[n / 2]
    } else {
        0.5 * (means[n / 2 - 1] + means[n / 2])
    }
}

/// Sample standard deviation over `sqrt(n)`.
pub fn standard_error(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Times `head` at each context. Repetitions cycle through the contexts so
/// that slow drift of the machine does not line up with the context axis.
pub fn measure_latency(
    head: &Head,
    mode: LatencyMode,
    contexts: &[u64],
    settings: &LatencySettings,
) -> Result<Vec<LatencyReport>> {
    if settings.reps < 30 {
        return Err(Error::Config(format!("latency needs at least 30 repetitions, got {}", settings.reps)));
    }
    if settings.inner == 0 || contexts.is_empty() {
        return Err(Error::Config("inner count and context list must be non-empty".into()));
    }
    let d = head.d();
    let d_h = head.d_h();
    let mut r = rng::stream(0, &[rng::label::BENCH]);
    let x = Vector::new((0..d).map(|_| r.random_range(-1.0..1.0)).collect());

    // For windowed heads the context is the memory size, so each context
    // gets its own head with a full buffer. Other heads are shared.
    let setups: Vec<(Option<Head>, HeadState<Matrix2>, Option<Matrix2>)> = contexts
        .iter()
        .map(|&c| {
            let mut cfg = head.config;
            let mut own = None;
            if let MechanismKind::Windowed { .. } = cfg.kind {
                cfg.kind = MechanismKind::Windowed { memory: c.max(1) as usize };
                own = Some(Head::new(cfg, head.params.clone())?);
            }
            let h = own.as_ref().unwrap_or(head);
            let (state, xs) = match mode {
                LatencyMode::Step => (warm_state(&cfg, d_h, c, 0), None),
                LatencyMode::Sequence => {
                    let xs = Matrix2::from_fn(c.max(1) as usize, d, |_, _| r.random_range(-1.0..1.0));
                    (h.zero_state(), Some(xs))
                }
            };
            Ok((own, state, xs))
        })
        .collect::<Result<_>>()?;

    let run = |h: &Head, state: &HeadState<Matrix2>, xs: &Option<Matrix2>| -> Result<f64> {
        let start = Instant::now();
        for _ in 0..settings.inner {
            match xs {
                None => {
                    std::hint::black_box(h.step(&x, state)?);
                }
                Some(xs) => {
                    std::hint::black_box(h.forward_sequence(xs, state)?);
                }
            }
        }
        Ok(start.elapsed().as_secs_f64() * 1e3 / settings.inner as f64)
    };

    for (h, state, xs) in &setups {
        for _ in 0..settings.warmup {
            run(h.as_ref().unwrap_or(head), state, xs)?;
        }
    }
    // The starting context rotates each repetition so no context is always
    // timed first or last.
    let n = setups.len();
    let mut samples = vec![Vec::with_capacity(settings.reps); n];
    for rep in 0..settings.reps {
        for j in 0..n {
            let i = (rep + j) % n;
            let (h, state, xs) = &setups[i];
            samples[i].push(run(h.as_ref().unwrap_or(head), state, xs)?);
        }
    }
    Ok(contexts
        .iter()
        .zip(samples)
        .map(|(&context, samples)| LatencyReport {
            mechanism: mechanism_name(&head.config),
            mode,
            context,
            mean_ms: median_of_means(&samples, settings.groups),
            stderr_ms: standard_error(&samples),
            reps: settings.reps,
            samples,
        })
        .collect())
}

/// Ordinary least squares fit of `y` on `x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n != y.len() || n < 3 {
        return Err(Error::Shape(format!("fit needs at least 3 aligned points, got {n} and {}", y.len())));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Range("fit needs at least two distinct x values".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_stderr = (sse / (nf - 2.0) / sxx).sqrt();
    Ok(LinearFit { slope, intercept, slope_stderr, r_squared })
}

/// Fit of per-repetition samples on context.
pub fn latency_trend(rows: &[LatencyReport]) -> Result<LinearFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .flat_map(|r| r.samples.iter().map(move |&s| (r.context as f64, s)))
        .unzip();
    linear_fit(&x, &y)
}
