//! Attention heads: canonical and windowed softmax attention, the linear
//! transformer, GaLiTe, AGaLiTe and a rank-1 random-sign variant.
//!
//! Every recurrent mechanism is one step function written against
//! [`Backend`](crate::numerics::Backend) ([`head_step`]); [`Head`] wraps it
//! with shape validation for plain `f64` use and adds the scan-based
//! whole-sequence path.

mod head;
mod step;

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::feature_maps::FeatureMapKind;
use crate::numerics::{orthogonal, Matrix2};
use crate::rng::Rng;

pub use head::{
    agalite_step, canonical_attention, galite_step, linear_attention_step,
    windowed_attention_step, Head,
};
pub use step::head_step;

/// Which recurrence (and state layout) a head runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MechanismKind {
    /// Softmax attention over the last `memory` keys and values.
    Windowed { memory: usize },
    /// Matrix state `C`, normalizer `s`, no gating by default.
    Linear,
    /// Matrix state with outer-product gating.
    Galite,
    /// `r + 1` cosine-phased vector pairs in place of the matrix state.
    Agalite { r: u64 },
    /// One vector pair driven by random ±1 signs.
    RandomSign,
}

/// How `β` and `γ` are produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gating {
    /// `β = σ(W_β x)`, `γ` from the learned gate map.
    Learned,
    /// No decay: the state accumulates `v ⊗ k` and `k` unweighted.
    Ungated,
    /// Constant gates, for tests and ablations.
    Fixed { beta: f64, gamma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub kind: MechanismKind,
    pub feature_map: FeatureMapKind,
    pub gating: Gating,
    /// AGaLiTe readout as `(2/r) Σ ṽ (k̃·q) / (s·q + ε)` instead of
    /// `Σ ṽ (k̃·q) / (2r (s·q) + ε)`.
    pub derivation_scaling: bool,
}

impl HeadConfig {
    pub fn linear() -> Self {
        Self {
            kind: MechanismKind::Linear,
            feature_map: FeatureMapKind::EluPlusOne,
            gating: Gating::Ungated,
            derivation_scaling: false,
        }
    }

    pub fn galite(eta: usize) -> Self {
        Self {
            kind: MechanismKind::Galite,
            feature_map: FeatureMapKind::LearnedOuterRelu { eta },
            gating: Gating::Learned,
            derivation_scaling: false,
        }
    }

    pub fn agalite(eta: usize, r: u64) -> Self {
        Self { kind: MechanismKind::Agalite { r }, ..Self::galite(eta) }
    }

    pub fn random_sign(eta: usize) -> Self {
        Self { kind: MechanismKind::RandomSign, ..Self::galite(eta) }
    }

    pub fn windowed(memory: usize) -> Self {
        Self {
            kind: MechanismKind::Windowed { memory },
            feature_map: FeatureMapKind::EluPlusOne,
            gating: Gating::Ungated,
            derivation_scaling: false,
        }
    }

    pub fn with_gating(self, gating: Gating) -> Self {
        Self { gating, ..self }
    }

    pub fn with_feature_map(self, feature_map: FeatureMapKind) -> Self {
        Self { feature_map, ..self }
    }

    pub fn with_derivation_scaling(self, on: bool) -> Self {
        Self { derivation_scaling: on, ..self }
    }

    /// Rows of `W_p1`, `W_p2`, `W_p3`.
    pub fn eta(&self) -> usize {
        match self.feature_map {
            FeatureMapKind::EluPlusOne => 1,
            FeatureMapKind::LearnedOuterRelu { eta } => eta,
        }
    }

    /// Length of keys, queries and `γ`.
    pub fn key_dim(&self, d_h: usize) -> usize {
        match self.kind {
            MechanismKind::Windowed { .. } => d_h,
            _ => self.feature_map.key_dim(d_h),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MechanismKind::Windowed { memory: 0 } => {
                return Err(Error::Config("window memory must be at least 1".into()))
            }
            MechanismKind::Agalite { r: 0 } => {
                return Err(Error::Config("r must be at least 1".into()))
            }
            _ => {}
        }
        if let FeatureMapKind::LearnedOuterRelu { eta: 0 } = self.feature_map {
            return Err(Error::Config("eta must be at least 1".into()));
        }
        Ok(())
    }

    /// Recurrent state scalars for head width `d_h`.
    pub fn state_scalars(&self, d_h: usize) -> usize {
        let dk = self.key_dim(d_h);
        match self.kind {
            MechanismKind::Windowed { memory } => memory * 2 * d_h,
            MechanismKind::Linear | MechanismKind::Galite => d_h * dk + dk,
            MechanismKind::Agalite { r } => (r as usize + 1) * (d_h + dk) + dk,
            MechanismKind::RandomSign => d_h + 2 * dk,
        }
    }
}

/// Per-head weights. `w_q`..`w_gamma` are `d_h x d`, `w_p1`..`w_p3` are
/// `eta x d`. All eight are always present; mechanisms ignore what they do
/// not use.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_beta: T,
    pub w_gamma: T,
    pub w_p1: T,
    pub w_p2: T,
    pub w_p3: T,
}

impl<T> HeadParams<T> {
    pub const NAMES: [&'static str; 8] =
        ["w_q", "w_k", "w_v", "w_beta", "w_gamma", "w_p1", "w_p2", "w_p3"];

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_beta: f(&self.w_beta),
            w_gamma: f(&self.w_gamma),
            w_p1: f(&self.w_p1),
            w_p2: f(&self.w_p2),
            w_p3: f(&self.w_p3),
        }
    }

    pub fn iter(&self) -> [&T; 8] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_beta,
            &self.w_gamma,
            &self.w_p1,
            &self.w_p2,
            &self.w_p3,
        ]
    }

    pub fn from_array(a: [T; 8]) -> Self {
        let [w_q, w_k, w_v, w_beta, w_gamma, w_p1, w_p2, w_p3] = a;
        Self { w_q, w_k, w_v, w_beta, w_gamma, w_p1, w_p2, w_p3 }
    }
}

impl HeadParams<Matrix2> {
    /// Shapes in [`HeadParams::NAMES`] order.
    pub fn shapes(d: usize, d_h: usize, eta: usize) -> [(usize, usize); 8] {
        let (m, p) = ((d_h, d), (eta, d));
        [m, m, m, m, m, p, p, p]
    }

    pub fn zeros(d: usize, d_h: usize, eta: usize) -> Self {
        Self::from_array(Self::shapes(d, d_h, eta).map(|(r, c)| Matrix2::zeros(r, c)))
    }

    pub fn orthogonal(d: usize, d_h: usize, eta: usize, rng: &mut Rng) -> Self {
        Self::from_array(Self::shapes(d, d_h, eta).map(|(r, c)| orthogonal(r, c, 1.0, rng)))
    }

    /// Input width, head width and `eta`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.w_q.cols(), self.w_q.rows(), self.w_p1.rows())
    }

    pub fn validate(&self) -> Result<()> {
        let (d, d_h, eta) = self.dims();
        for ((name, m), want) in Self::NAMES.iter().zip(self.iter()).zip(Self::shapes(d, d_h, eta)) {
            if m.shape() != want {
                return Err(Error::Shape(format!("{name} is {:?}, expected {want:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// `C` (`d_h x d_k`) and `s` (`d_k x 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixState<T> {
    pub c: T,
    pub s: T,
}

pub type LinearState<T> = MatrixState<T>;
pub type GaliteState<T> = MatrixState<T>;

/// `r + 1` value and key vectors, the normalizer, and the number of elements
/// absorbed so far. The element written at `tick` uses phase index `tick + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AgaliteState<T> {
    pub v_tilde: Vec<T>,
    pub k_tilde: Vec<T>,
    pub s: T,
    pub tick: u64,
}

#[derive(Clone, Debug)]
pub struct Rank1State<T> {
    pub v_tilde: T,
    pub k_tilde: T,
    pub s: T,
    pub rng: Rng,
}

/// The most recent keys and values, oldest first. Entries are stored
/// detached from any gradient record.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowState<T> {
    pub keys: VecDeque<T>,
    pub values: VecDeque<T>,
    pub memory: usize,
}

#[derive(Clone, Debug)]
pub enum HeadState<T> {
    Matrix(MatrixState<T>),
    Agalite(AgaliteState<T>),
    Rank1(Rank1State<T>),
    Window(WindowState<T>),
}

impl<T> HeadState<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HeadState<U> {
        match self {
            HeadState::Matrix(m) => HeadState::Matrix(MatrixState { c: f(&m.c), s: f(&m.s) }),
            HeadState::Agalite(a) => HeadState::Agalite(AgaliteState {
                v_tilde: a.v_tilde.iter().map(&mut f).collect(),
                k_tilde: a.k_tilde.iter().map(&mut f).collect(),
                s: f(&a.s),
                tick: a.tick,
            }),
            HeadState::Rank1(r) => HeadState::Rank1(Rank1State {
                v_tilde: f(&r.v_tilde),
                k_tilde: f(&r.k_tilde),
                s: f(&r.s),
                rng: r.rng.clone(),
            }),
            HeadState::Window(w) => HeadState::Window(WindowState {
                keys: w.keys.iter().map(&mut f).collect(),
                values: w.values.iter().map(&mut f).collect(),
                memory: w.memory,
            }),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            HeadState::Matrix(_) => "matrix",
            HeadState::Agalite(_) => "agalite",
            HeadState::Rank1(_) => "rank1",
            HeadState::Window(_) => "window",
        }
    }
}

impl HeadState<Matrix2> {
    /// Zero state; the rank-1 variant's sign stream is seeded with `seed`.
    pub fn zeros(cfg: &HeadConfig, d_h: usize, seed: u64) -> Self {
        let dk = cfg.key_dim(d_h);
        let col = |n| Matrix2::zeros(n, 1);
        match cfg.kind {
            MechanismKind::Linear | MechanismKind::Galite => {
                HeadState::Matrix(MatrixState { c: Matrix2::zeros(d_h, dk), s: col(dk) })
            }
            MechanismKind::Agalite { r } => HeadState::Agalite(AgaliteState {
                v_tilde: vec![col(d_h); r as usize + 1],
                k_tilde: vec![col(dk); r as usize + 1],
                s: col(dk),
                tick: 0,
            }),
            MechanismKind::RandomSign => HeadState::Rank1(Rank1State {
                v_tilde: col(d_h),
                k_tilde: col(dk),
                s: col(dk),
                rng: crate::rng::stream(seed, &[crate::rng::label::SIGNS]),
            }),
            MechanismKind::Windowed { memory } => HeadState::Window(WindowState {
                keys: VecDeque::new(),
                values: VecDeque::new(),
                memory,
            }),
        }
    }

    /// Scalars currently held.
    pub fn scalars(&self) -> usize {
        let mut n = 0;
        let _ = self.map(|m| n += m.len());
        n
    }

    /// Shape and kind check against a head configuration.
    pub fn check(&self, cfg: &HeadConfig, d_h: usize) -> Result<()> {
        let dk = cfg.key_dim(d_h);
        let col_ok = |m: &Matrix2, n| m.shape() == (n, 1);
        let ok = match (self, cfg.kind) {
            (HeadState::Matrix(m), MechanismKind::Linear | MechanismKind::Galite) => {
                m.c.shape() == (d_h, dk) && col_ok(&m.s, dk)
            }
            (HeadState::Agalite(a), MechanismKind::Agalite { r }) => {
                a.v_tilde.len() == r as usize + 1
                    && a.k_tilde.len() == r as usize + 1
                    && a.v_tilde.iter().all(|v| col_ok(v, d_h))
                    && a.k_tilde.iter().all(|k| col_ok(k, dk))
                    && col_ok(&a.s, dk)
            }
            (HeadState::Rank1(s), MechanismKind::RandomSign) => {
                col_ok(&s.v_tilde, d_h) && col_ok(&s.k_tilde, dk) && col_ok(&s.s, dk)
            }
            (HeadState::Window(w), MechanismKind::Windowed { memory }) => {
                w.memory == memory
                    && w.keys.len() == w.values.len()
                    && w.keys.len() <= memory
                    && w.keys.iter().chain(&w.values).all(|k| col_ok(k, d_h))
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{} state does not match {:?} with d_h={d_h}",
                self.kind_name(),
                cfg.kind
            )))
        }
    }
}
