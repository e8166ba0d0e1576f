use rayon::prelude::*;

use super::step::{
    head_step, project, readout_agalite, readout_matrix, readout_rank1, writes, Projected, Writes,
};
use super::{AgaliteState, HeadConfig, HeadParams, HeadState, MatrixState, WindowState};
use crate::error::{Error, Result};
use crate::feature_maps::FeatureMapKind;
use crate::kron::cosine_phase;
use crate::numerics::{softmax_rows, Eval, Matrix2, Vector};
use crate::rng;
use crate::scan::{scan_parallel, ScanElement};

/// One attention head with plain `f64` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    pub params: HeadParams<Matrix2>,
}

impl Head {
    pub fn new(config: HeadConfig, params: HeadParams<Matrix2>) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        if let FeatureMapKind::LearnedOuterRelu { eta } = config.feature_map {
            if params.w_p1.rows() != eta {
                return Err(Error::Shape(format!(
                    "projection weights have {} rows but eta is {eta}",
                    params.w_p1.rows()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Orthogonally initialized head with weights drawn from `seed`.
    pub fn random(config: HeadConfig, d: usize, d_h: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[rng::label::INIT]);
        Self::new(config, HeadParams::orthogonal(d, d_h, config.eta(), &mut r))
    }

    pub fn d(&self) -> usize {
        self.params.w_q.cols()
    }

    pub fn d_h(&self) -> usize {
        self.params.w_q.rows()
    }

    pub fn zero_state(&self) -> HeadState<Matrix2> {
        HeadState::zeros(&self.config, self.d_h(), 0)
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.d() {
            return Err(Error::Shape(format!("input of length {len}, head expects {}", self.d())));
        }
        Ok(())
    }

    pub fn step(&self, x: &Vector, state: &HeadState<Matrix2>) -> Result<(Vector, HeadState<Matrix2>)> {
        self.step_counted(&mut Eval::new(), x, state)
    }

    /// As [`Head::step`], tallying operations into `eval`.
    pub fn step_counted(
        &self,
        eval: &mut Eval,
        x: &Vector,
        state: &HeadState<Matrix2>,
    ) -> Result<(Vector, HeadState<Matrix2>)> {
        self.check_input(x.len())?;
        state.check(&self.config, self.d_h())?;
        let (a, next) = head_step(eval, &self.config, &self.params, &x.to_column(), state.clone());
        Ok((a.into_vector(), next))
    }

    /// Step iteration over the rows of `xs`.
    pub fn forward_steps(
        &self,
        xs: &Matrix2,
        state0: &HeadState<Matrix2>,
    ) -> Result<(Matrix2, HeadState<Matrix2>)> {
        let mut state = state0.clone();
        let mut out = Vec::with_capacity(xs.rows() * self.d_h());
        for t in 0..xs.rows() {
            let (a, next) = self.step(&Vector::new(xs.row(t).to_vec()), &state)?;
            out.extend_from_slice(a.as_slice());
            state = next;
        }
        Ok((Matrix2::from_vec(xs.rows(), self.d_h(), out)?, state))
    }

    /// Whole-sequence evaluation. Recurrent mechanisms compute all
    /// projections independently, run the state recurrence as one parallel
    /// scan over the flattened state and then read out every step; the
    /// windowed head iterates its step.
    pub fn forward_sequence(
        &self,
        xs: &Matrix2,
        state0: &HeadState<Matrix2>,
    ) -> Result<(Matrix2, HeadState<Matrix2>)> {
        if xs.rows() == 0 {
            return Err(Error::Shape("empty input sequence".into()));
        }
        self.check_input(xs.cols())?;
        state0.check(&self.config, self.d_h())?;
        if let HeadState::Window(_) = state0 {
            return self.forward_steps(xs, state0);
        }
        let t_len = xs.rows();
        let projected: Vec<(Projected<Matrix2>, Writes<Matrix2>)> = (0..t_len)
            .into_par_iter()
            .map(|t| {
                let mut b = Eval::new();
                let x = Matrix2::column(xs.row(t).to_vec());
                let pr = project(&mut b, &self.config, &self.params, &x);
                let w = writes(&mut b, &pr);
                (pr, w)
            })
            .collect();

        let mut rank1_rng = match state0 {
            HeadState::Rank1(s) => Some(s.rng.clone()),
            _ => None,
        };
        let signs: Vec<f64> = match &mut rank1_rng {
            Some(r) => (0..t_len)
                .map(|_| if rand::Rng::random::<bool>(r) { 1.0 } else { -1.0 })
                .collect(),
            None => Vec::new(),
        };
        let tick0 = match state0 {
            HeadState::Agalite(s) => s.tick,
            _ => 0,
        };

        let elems: Vec<ScanElement> = projected
            .par_iter()
            .enumerate()
            .map(|(t, (_, w))| scan_element(state0, w, tick0 + t as u64, signs.get(t).copied()))
            .collect();
        let h0 = flatten(state0);
        let hs = scan_parallel(&elems, &h0)?;

        let outputs: Vec<Vec<f64>> = hs
            .par_iter()
            .zip(&projected)
            .enumerate()
            .map(|(t, (h, (pr, _)))| {
                let st = unflatten(state0, h.as_slice(), tick0 + t as u64 + 1, None);
                let mut b = Eval::new();
                let a = match &st {
                    HeadState::Matrix(m) => readout_matrix(&mut b, &pr.q, m),
                    HeadState::Agalite(a) => readout_agalite(&mut b, &self.config, &pr.q, a),
                    HeadState::Rank1(r) => readout_rank1(&mut b, &pr.q, r),
                    HeadState::Window(_) => unreachable!(),
                };
                a.into_data()
            })
            .collect();
        let last = hs.last().expect("nonempty sequence");
        let final_state = unflatten(state0, last.as_slice(), tick0 + t_len as u64, rank1_rng);
        let data: Vec<f64> = outputs.into_iter().flatten().collect();
        Ok((Matrix2::from_vec(t_len, self.d_h(), data)?, final_state))
    }
}

fn ones_or(keep: &Option<Matrix2>, len: usize) -> Vec<f64> {
    match keep {
        Some(k) => k.data().to_vec(),
        None => vec![1.0; len],
    }
}

fn scan_element(state0: &HeadState<Matrix2>, w: &Writes<Matrix2>, tick: u64, sign: Option<f64>) -> ScanElement {
    let (dv, dk) = (w.v.len(), w.k.len());
    let keep_v = ones_or(&w.keep_v, dv);
    let keep_k = ones_or(&w.keep_k, dk);
    let mut a = Vec::new();
    let mut b = Vec::new();
    let phased = |keep: &[f64], write: &[f64], phase: f64, a: &mut Vec<f64>, b: &mut Vec<f64>| {
        a.extend_from_slice(keep);
        b.extend(write.iter().map(|x| x * phase));
    };
    match state0 {
        HeadState::Matrix(_) => {
            for i in 0..dv {
                a.extend(keep_k.iter().map(|g| keep_v[i] * g));
                b.extend(w.k.data().iter().map(|k| w.v.data()[i] * k));
            }
        }
        HeadState::Agalite(s) => {
            let r = (s.v_tilde.len() - 1) as u64;
            let phases: Vec<f64> = (0..=r).map(|i| cosine_phase(i, tick + 1, r)).collect();
            for &p in &phases {
                phased(&keep_v, w.v.data(), p, &mut a, &mut b);
            }
            for &p in &phases {
                phased(&keep_k, w.k.data(), p, &mut a, &mut b);
            }
        }
        HeadState::Rank1(_) => {
            let p = sign.expect("sign per step");
            phased(&keep_v, w.v.data(), p, &mut a, &mut b);
            phased(&keep_k, w.k.data(), p, &mut a, &mut b);
        }
        HeadState::Window(_) => unreachable!("windowed heads are not scanned"),
    }
    a.extend_from_slice(&keep_k);
    b.extend_from_slice(w.k.data());
    ScanElement { a: Vector::new(a), b: Vector::new(b) }
}

fn flatten(state: &HeadState<Matrix2>) -> Vector {
    let mut out = Vec::new();
    let _ = state.map(|m| out.extend_from_slice(m.data()));
    Vector::new(out)
}

/// Rebuilds a state shaped like `template` from flat data.
fn unflatten(template: &HeadState<Matrix2>, data: &[f64], tick: u64, rng: Option<rng::Rng>) -> HeadState<Matrix2> {
    let mut offset = 0;
    let mut st = template.map(|m| {
        let part = Matrix2::from_vec(m.rows(), m.cols(), data[offset..offset + m.len()].to_vec())
            .expect("template shape");
        offset += m.len();
        part
    });
    match &mut st {
        HeadState::Agalite(a) => a.tick = tick,
        HeadState::Rank1(r) => {
            if let Some(rng) = rng {
                r.rng = rng;
            }
        }
        _ => {}
    }
    st
}

fn rows_of(x: &Matrix2, w: &Matrix2) -> Result<Matrix2> {
    x.matmul(&w.transpose())
}

/// Causal `softmax(Q Kᵀ / √d) V` over the rows of `x` (`N x d`).
pub fn canonical_attention(x: &Matrix2, params: &HeadParams<Matrix2>) -> Result<Matrix2> {
    params.validate()?;
    let (d, _, _) = params.dims();
    if x.rows() == 0 || x.cols() != d {
        return Err(Error::Shape(format!("input {:?} for weights of width {d}", x.shape())));
    }
    let q = rows_of(x, &params.w_q)?;
    let k = rows_of(x, &params.w_k)?;
    let v = rows_of(x, &params.w_v)?;
    let mut scores = q.matmul(&k.transpose())?.scale(1.0 / (d as f64).sqrt());
    for i in 0..scores.rows() {
        for j in i + 1..scores.cols() {
            scores.set(i, j, f64::NEG_INFINITY);
        }
    }
    softmax_rows(&scores).matmul(&v)
}

fn head_for(cfg: HeadConfig, params: &HeadParams<Matrix2>) -> Result<Head> {
    Head::new(cfg, params.clone())
}

/// Linear transformer step with feature map `phi`.
pub fn linear_attention_step(
    x: &Vector,
    state: &MatrixState<Matrix2>,
    params: &HeadParams<Matrix2>,
    phi: FeatureMapKind,
) -> Result<(Vector, MatrixState<Matrix2>)> {
    let head = head_for(HeadConfig::linear().with_feature_map(phi), params)?;
    match head.step(x, &HeadState::Matrix(state.clone()))? {
        (a, HeadState::Matrix(s)) => Ok((a, s)),
        _ => unreachable!(),
    }
}

/// GaLiTe step with learned gates; `eta` is read from the projection weights.
pub fn galite_step(
    x: &Vector,
    state: &MatrixState<Matrix2>,
    params: &HeadParams<Matrix2>,
) -> Result<(Vector, MatrixState<Matrix2>)> {
    let head = head_for(HeadConfig::galite(params.dims().2), params)?;
    match head.step(x, &HeadState::Matrix(state.clone()))? {
        (a, HeadState::Matrix(s)) => Ok((a, s)),
        _ => unreachable!(),
    }
}

/// AGaLiTe step with learned gates; `r` is one less than the number of
/// vector pairs in `state`.
pub fn agalite_step(
    x: &Vector,
    state: &AgaliteState<Matrix2>,
    params: &HeadParams<Matrix2>,
) -> Result<(Vector, AgaliteState<Matrix2>)> {
    if state.v_tilde.len() < 2 {
        return Err(Error::Shape("AGaLiTe state needs at least two vector pairs".into()));
    }
    let r = state.v_tilde.len() as u64 - 1;
    let head = head_for(HeadConfig::agalite(params.dims().2, r), params)?;
    match head.step(x, &HeadState::Agalite(state.clone()))? {
        (a, HeadState::Agalite(s)) => Ok((a, s)),
        _ => unreachable!(),
    }
}

pub fn windowed_attention_step(
    x: &Vector,
    state: &WindowState<Matrix2>,
    params: &HeadParams<Matrix2>,
) -> Result<(Vector, WindowState<Matrix2>)> {
    let head = head_for(HeadConfig::windowed(state.memory), params)?;
    match head.step(x, &HeadState::Window(state.clone()))? {
        (a, HeadState::Window(s)) => Ok((a, s)),
        _ => unreachable!(),
    }
}
