//! Advantage actor-critic on the T-Maze with truncated backpropagation
//! through the recurrent attention states.
//!
//! Each environment records its rollout on its own tape, starting from the
//! carried (detached) model state. Recurrent states are reset to zeros when
//! an episode ends. Gradients are summed over environments in index order,
//! so results do not depend on the thread count.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;

use crate::block::{model_step, policy_value, Model, ModelConfig, ModelParams, ModelState};
use crate::error::{Error, Result};
use crate::numerics::{grad, Backend, Eval, Matrix2, Tape, Vector};
use crate::rng::{self, Rng};
use crate::tmaze::{Action, Observation, Outcome, TMaze, TMazeConfig, N_ACTIONS, OBS_BITS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub rollout_len: usize,
    pub num_envs: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Success rate and mean return are taken over episodes that ended in
    /// the last `eval_window` environment steps.
    pub eval_window: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            gamma: 0.99,
            lambda: 0.95,
            entropy_coef: 1e-2,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            rollout_len: 256,
            num_envs: 8,
            total_steps: 2_000_000,
            seed: 0,
            eval_window: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1]")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("lambda", self.lambda)?;
        if self.rollout_len == 0 || self.num_envs == 0 || self.eval_window == 0 {
            return Err(Error::Config("rollout_len, num_envs and eval_window must be positive".into()));
        }
        let finite = [self.lr, self.entropy_coef, self.value_coef, self.max_grad_norm];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.lr == 0.0 {
            return Err(Error::Config("learning rate and coefficients must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Environment steps per update.
    pub fn batch_steps(&self) -> u64 {
        (self.rollout_len * self.num_envs) as u64
    }
}

/// Generalized advantage estimates and returns.
///
/// `dones[t]` marks that the episode ended with step `t`, so nothing after
/// it is bootstrapped into `t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Shape(format!(
            "rewards {n}, values {}, dones {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap_value;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Adam with the usual moment constants.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Rescales `g` to norm at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

/// Policy logits, value and next state for one observation.
pub fn agent_step<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    p: &ModelParams<B::T>,
    obs: &B::T,
    state: ModelState<B::T>,
) -> (B::T, B::T, ModelState<B::T>) {
    let (features, next) = model_step(b, cfg, p, obs, state);
    let (logits, value) = policy_value(b, p, &features);
    (logits, value, next)
}

/// Means over the batch of the three loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    /// `−log π(a) · A`.
    pub policy: f64,
    /// `(V − R)²`.
    pub value: f64,
    pub entropy: f64,
    /// `policy + value_coef · value − entropy_coef · entropy`.
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.policy += o.policy;
        self.value += o.value;
        self.entropy += o.entropy;
        self.total += o.total;
    }
}

/// Loss over one environment's outputs, already divided by `batch` (the
/// step count of the whole update). Advantages and returns are constants.
pub fn a2c_loss<B: Backend>(
    b: &mut B,
    logits: &[B::T],
    values: &[B::T],
    actions: &[usize],
    advantages: &[f64],
    returns: &[f64],
    cfg: &TrainConfig,
    batch: usize,
) -> (B::T, LossParts) {
    let inv = 1.0 / batch as f64;
    let mut parts = LossParts::default();
    let mut total: Option<B::T> = None;
    for t in 0..logits.len() {
        let logp = b.log_softmax(&logits[t]);
        let lp_a = b.element(&logp, actions[t]);
        let p = b.exp(&logp);
        let plogp = b.mul(&p, &logp);
        let neg_entropy = b.sum(&plogp);
        let target = b.constant(Matrix2::scalar(returns[t]));
        let err = b.sub(&values[t], &target);
        let sq = b.mul(&err, &err);

        parts.policy -= b.value(&lp_a).item() * advantages[t] * inv;
        parts.value += b.value(&sq).item() * inv;
        parts.entropy -= b.value(&neg_entropy).item() * inv;

        let pg = b.scale(&lp_a, -advantages[t] * inv);
        let vl = b.scale(&sq, cfg.value_coef * inv);
        let en = b.scale(&neg_entropy, cfg.entropy_coef * inv);
        let term = b.add(&pg, &vl);
        let term = b.add(&term, &en);
        total = Some(match total {
            None => term,
            Some(acc) => b.add(&acc, &term),
        });
    }
    parts.total = parts.policy + cfg.value_coef * parts.value - cfg.entropy_coef * parts.entropy;
    (total.expect("non-empty rollout"), parts)
}

/// One environment's share of a rollout.
#[derive(Clone, Debug)]
pub struct Segment {
    pub env: usize,
    /// Model state before the first step (detached).
    pub initial_state: ModelState<Matrix2>,
    pub observations: Vec<Observation>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Seed of the zero state installed after step `t` when `dones[t]`.
    pub reset_seeds: Vec<u64>,
    pub bootstrap_value: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn advantages(&self, cfg: &TrainConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        compute_gae(&self.rewards, &self.values, &self.dones, self.bootstrap_value, cfg.gamma, cfg.lambda)
    }
}

fn obs_column(o: &Observation) -> Matrix2 {
    Matrix2::column(o.to_vector().into_inner())
}

/// Replays a segment through the model, resetting state after each done.
pub fn segment_forward<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    p: &ModelParams<B::T>,
    seg: &Segment,
) -> (Vec<B::T>, Vec<B::T>) {
    let mut state = seg.initial_state.map(|m| b.constant(m.clone()));
    let mut logits = Vec::with_capacity(seg.len());
    let mut values = Vec::with_capacity(seg.len());
    for t in 0..seg.len() {
        let obs = b.constant(obs_column(&seg.observations[t]));
        let (l, v, next) = agent_step(b, cfg, p, &obs, state);
        logits.push(l);
        values.push(v);
        state = if seg.dones[t] {
            ModelState::zeros(cfg, seg.reset_seeds[t]).map(|m| b.constant(m.clone()))
        } else {
            next
        };
    }
    (logits, values)
}

/// Total loss of a whole rollout as a function of the flat parameters, for
/// gradient checking.
pub fn rollout_loss<B: Backend>(
    b: &mut B,
    model: &Model,
    flat: &B::T,
    segments: &[Segment],
    cfg: &TrainConfig,
) -> Result<B::T> {
    let p = model.store.view(b, flat);
    let batch: usize = segments.iter().map(Segment::len).sum();
    let mut total: Option<B::T> = None;
    for seg in segments {
        let (adv, ret) = seg.advantages(cfg)?;
        let (logits, values) = segment_forward(b, model.config(), &p, seg);
        let (loss, _) = a2c_loss(b, &logits, &values, &seg.actions, &adv, &ret, cfg, batch);
        total = Some(match total {
            None => loss,
            Some(acc) => b.add(&acc, &loss),
        });
    }
    total.ok_or_else(|| Error::Contract("empty rollout".into()))
}

/// Numerically stable softmax of a logit vector.
pub fn softmax_probs(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Entropy `−Σ p ln p` of a distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

fn sample(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// A finished episode as seen by the success tracker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeEnd {
    /// Global environment step at which the episode ended.
    pub step: u64,
    pub success: bool,
    pub episode_return: f64,
}

/// Success rate and mean return over episodes ending within a trailing
/// window of environment steps. Timeouts count as failures.
#[derive(Clone, Debug)]
pub struct SuccessTracker {
    window: u64,
    episodes: VecDeque<EpisodeEnd>,
}

impl SuccessTracker {
    pub fn new(window: u64) -> Self {
        Self { window, episodes: VecDeque::new() }
    }

    pub fn record(&mut self, end: EpisodeEnd) {
        self.episodes.push_back(end);
    }

    fn trim(&mut self, now: u64) {
        while let Some(e) = self.episodes.front() {
            if e.step + self.window <= now {
                self.episodes.pop_front();
            } else {
                break;
            }
        }
    }

    /// Episodes in the window ending at `now`.
    pub fn count(&mut self, now: u64) -> usize {
        self.trim(now);
        self.episodes.len()
    }

    /// `None` when no episode ended inside the window.
    pub fn success_rate(&mut self, now: u64) -> Option<f64> {
        self.trim(now);
        let n = self.episodes.len();
        (n > 0).then(|| self.episodes.iter().filter(|e| e.success).count() as f64 / n as f64)
    }

    pub fn mean_return(&mut self, now: u64) -> Option<f64> {
        self.trim(now);
        let n = self.episodes.len();
        (n > 0).then(|| self.episodes.iter().map(|e| e.episode_return).sum::<f64>() / n as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub episodes: u64,
    pub success_rate: f64,
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub const LOG_HEADER: &str = "step,episodes,success_rate,mean_return,policy_loss,value_loss,entropy";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.episodes, r.success_rate, r.mean_return, r.policy_loss, r.value_loss, r.entropy
        );
    }
    out
}

#[derive(Clone, Debug)]
struct Worker {
    index: usize,
    env: TMaze,
    policy_rng: Rng,
    obs: Observation,
    state: ModelState<Matrix2>,
    /// Episodes this worker has started.
    started: u64,
}

/// Rollout results for one worker: segment, gradient, loss parts and the
/// episodes that ended, as `(local step, outcome, return)`.
struct WorkerRollout {
    segment: Segment,
    grad: Vec<f64>,
    parts: LossParts,
    ends: Vec<(usize, Outcome, f64)>,
}

/// Everything gathered in one rollout across environments.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub segments: Vec<Segment>,
    /// Gradient of the total loss before clipping.
    pub grad: Vec<f64>,
    pub parts: LossParts,
}

pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    workers: Vec<Worker>,
    adam: Adam,
    tracker: SuccessTracker,
    steps: u64,
    episodes: u64,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, env_cfg: &TMazeConfig) -> Result<Self> {
        cfg.validate()?;
        env_cfg.validate()?;
        if model_cfg.obs_dim != OBS_BITS || model_cfg.n_actions != N_ACTIONS {
            return Err(Error::Config(format!(
                "T-Maze needs obs_dim {OBS_BITS} and {N_ACTIONS} actions"
            )));
        }
        let model = Model::init(model_cfg, cfg.seed)?;
        let workers = (0..cfg.num_envs)
            .map(|e| {
                let mut env = TMaze::with_rng(*env_cfg, rng::stream(cfg.seed, &[rng::label::ENV, env_cfg.seed, e as u64]))?;
                let obs = env.reset();
                Ok(Worker {
                    index: e,
                    env,
                    policy_rng: rng::stream(cfg.seed, &[rng::label::POLICY, e as u64]),
                    obs,
                    state: ModelState::zeros(model_cfg, reset_seed(cfg.seed, e, 0)),
                    started: 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            adam: Adam::new(model.store.len(), cfg.lr),
            model,
            cfg: *cfg,
            workers,
            tracker: SuccessTracker::new(cfg.eval_window),
            steps: 0,
            episodes: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    /// Acts for `rollout_len` steps in every environment with the current
    /// parameters and returns the segments and the loss gradient. Does not
    /// change the parameters.
    pub fn rollout(&mut self) -> Result<Rollout> {
        let batch = self.cfg.batch_steps() as usize;
        let (model, cfg) = (&self.model, &self.cfg);
        let results: Vec<Result<WorkerRollout>> = self
            .workers
            .par_iter_mut()
            .map(|w| run_worker(w, model, cfg, batch))
            .collect();
        let mut grad = vec![0.0; self.model.store.len()];
        let mut parts = LossParts::default();
        let mut segments = Vec::with_capacity(results.len());
        let mut ends = Vec::new();
        for r in results {
            let r = r?;
            grad.iter_mut().zip(&r.grad).for_each(|(g, x)| *g += x);
            parts.add(&r.parts);
            ends.extend(r.ends);
            segments.push(r.segment);
        }
        // Episodes are credited in (step, env) order.
        ends.sort_by_key(|&(t, _, _)| t);
        for (t, outcome, ret) in ends {
            self.episodes += 1;
            self.tracker.record(EpisodeEnd {
                step: self.steps + ((t + 1) * self.cfg.num_envs) as u64,
                success: outcome == Outcome::Success,
                episode_return: ret,
            });
        }
        self.steps += self.cfg.batch_steps();
        if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss {:?} at step {}",
                parts, self.steps
            )));
        }
        Ok(Rollout { segments, grad, parts })
    }

    /// One rollout and one clipped Adam step.
    pub fn update(&mut self) -> Result<LogRow> {
        let mut r = self.rollout()?;
        clip_global_norm(&mut r.grad, self.cfg.max_grad_norm);
        let mut data = self.model.store.data().to_vec();
        self.adam.step(&mut data, &r.grad);
        self.model.set_data(&data)?;
        let now = self.steps;
        Ok(LogRow {
            step: now,
            episodes: self.episodes,
            success_rate: self.tracker.success_rate(now).unwrap_or(0.0),
            mean_return: self.tracker.mean_return(now).unwrap_or(0.0),
            policy_loss: r.parts.policy,
            value_loss: r.parts.value,
            entropy: r.parts.entropy,
        })
    }
}

fn reset_seed(seed: u64, env: usize, episode: u64) -> u64 {
    rng::derive_seed(seed, &[rng::label::SIGNS, env as u64, episode])
}

fn run_worker(w: &mut Worker, model: &Model, cfg: &TrainConfig, batch: usize) -> Result<WorkerRollout> {
    let mcfg = *model.config();
    let mut tape = Tape::new();
    let flat = tape.leaf(Matrix2::column(model.store.data().to_vec()));
    let p = model.store.view(&mut tape, &flat);
    let mut seg = Segment {
        env: w.index,
        initial_state: w.state.clone(),
        observations: Vec::with_capacity(cfg.rollout_len),
        actions: Vec::with_capacity(cfg.rollout_len),
        rewards: Vec::with_capacity(cfg.rollout_len),
        dones: Vec::with_capacity(cfg.rollout_len),
        values: Vec::with_capacity(cfg.rollout_len),
        log_probs: Vec::with_capacity(cfg.rollout_len),
        reset_seeds: Vec::with_capacity(cfg.rollout_len),
        bootstrap_value: 0.0,
    };
    let mut logits_vars = Vec::with_capacity(cfg.rollout_len);
    let mut value_vars = Vec::with_capacity(cfg.rollout_len);
    let mut ends = Vec::new();
    let mut state = w.state.map(|m| tape.constant(m.clone()));
    for t in 0..cfg.rollout_len {
        let obs = tape.constant(obs_column(&w.obs));
        let (logits, value, next) = agent_step(&mut tape, &mcfg, &p, &obs, state);
        let probs = softmax_probs(tape.get(logits).data());
        let a = sample(&probs, &mut w.policy_rng);
        let step = w.env.step(Action::from_index(a)?)?;

        seg.observations.push(w.obs);
        seg.actions.push(a);
        seg.rewards.push(step.reward);
        seg.dones.push(step.done);
        seg.values.push(tape.get(value).item());
        seg.log_probs.push(probs[a].ln());
        logits_vars.push(logits);
        value_vars.push(value);

        let seed = reset_seed(cfg.seed, w.index, w.started);
        seg.reset_seeds.push(seed);
        if step.done {
            ends.push((t, step.outcome.expect("finished episodes have an outcome"), w.env.episode_return()));
            w.obs = w.env.reset();
            w.started += 1;
            state = ModelState::zeros(&mcfg, seed).map(|m| tape.constant(m.clone()));
        } else {
            w.obs = step.observation;
            state = next;
        }
    }
    w.state = state.map(|v| tape.get(*v).clone());

    let mut eval = Eval::new();
    let params = model.params();
    let (_, bootstrap, _) = agent_step(&mut eval, &mcfg, params, &obs_column(&w.obs), w.state.clone());
    seg.bootstrap_value = bootstrap.item();

    let (adv, ret) = seg.advantages(cfg)?;
    let (loss, parts) = a2c_loss(&mut tape, &logits_vars, &value_vars, &seg.actions, &adv, &ret, cfg, batch);
    let grads = grad(&tape, loss)?;
    Ok(WorkerRollout { segment: seg, grad: grads.wrt(flat).into_data(), parts, ends })
}

/// Output of [`train_tmaze`].
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub log: Vec<LogRow>,
    pub model: Model,
}

/// Trains until `total_steps` environment steps, calling `on_update` with
/// every log row.
pub fn train_tmaze_with(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    env_cfg: &TMazeConfig,
    mut on_update: impl FnMut(&LogRow),
) -> Result<TrainResult> {
    let mut trainer = Trainer::new(model_cfg, cfg, env_cfg)?;
    let mut log = Vec::new();
    while trainer.steps() < cfg.total_steps {
        let row = trainer.update()?;
        on_update(&row);
        log.push(row);
    }
    Ok(TrainResult { log, model: trainer.model })
}

pub fn train_tmaze(model_cfg: &ModelConfig, cfg: &TrainConfig, env_cfg: &TMazeConfig) -> Result<TrainResult> {
    train_tmaze_with(model_cfg, cfg, env_cfg, |_| {})
}

/// Model settings for T-Maze agents around a head configuration.
pub fn tmaze_model(head: crate::attention::HeadConfig) -> ModelConfig {
    ModelConfig::new(OBS_BITS, N_ACTIONS, head)
}

/// Greedy success rate of `model` over `episodes` fresh episodes.
pub fn evaluate_greedy(model: &Model, env_cfg: &TMazeConfig, episodes: usize, seed: u64) -> Result<f64> {
    let mut env = TMaze::with_rng(*env_cfg, rng::stream(seed, &[rng::label::ENV, u64::MAX]))?;
    let mut wins = 0;
    for ep in 0..episodes {
        let mut obs = env.reset();
        let mut state = model.zero_state(reset_seed(seed, usize::MAX, ep as u64));
        loop {
            let (f, next) = model.step(&Vector::new(obs.to_vector().into_inner()), &state)?;
            let (logits, _) = model.policy(&f)?;
            let a = logits
                .as_slice()
                .iter()
                .enumerate()
                .fold(0, |best, (i, &l)| if l > logits.as_slice()[best] { i } else { best });
            let s = env.step(Action::from_index(a)?)?;
            if s.done {
                wins += (s.outcome == Some(Outcome::Success)) as usize;
                break;
            }
            obs = s.observation;
            state = next;
        }
    }
    Ok(wins as f64 / episodes as f64)
}
