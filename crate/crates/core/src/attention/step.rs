use rand::Rng as _;

use super::{
    AgaliteState, Gating, HeadConfig, HeadParams, HeadState, MatrixState, MechanismKind,
    Rank1State, WindowState,
};
use crate::feature_maps::{elu_plus_one, learned_outer, FeatureMapKind};
use crate::kron::cosine_phase;
use crate::numerics::{Backend, Matrix2};
use crate::DENOM_EPS;

/// Query, key, value and gates for one input.
pub(crate) struct Projected<T> {
    pub q: T,
    pub k: T,
    pub v: T,
    /// `(β, γ)`; `None` when ungated.
    pub gates: Option<(T, T)>,
}

pub(crate) fn project<B: Backend>(
    b: &mut B,
    cfg: &HeadConfig,
    p: &HeadParams<B::T>,
    x: &B::T,
) -> Projected<B::T> {
    let v = b.matvec(&p.w_v, x);
    if let MechanismKind::Windowed { .. } = cfg.kind {
        let q = b.matvec(&p.w_q, x);
        let k = b.matvec(&p.w_k, x);
        return Projected { q, k, v, gates: None };
    }
    let (q, k) = match cfg.feature_map {
        FeatureMapKind::EluPlusOne => {
            let q = b.matvec(&p.w_q, x);
            let k = b.matvec(&p.w_k, x);
            (elu_plus_one(b, &q), elu_plus_one(b, &k))
        }
        FeatureMapKind::LearnedOuterRelu { .. } => (
            learned_outer(b, x, &p.w_p2, &p.w_q, false),
            learned_outer(b, x, &p.w_p1, &p.w_k, false),
        ),
    };
    let gates = match cfg.gating {
        Gating::Ungated => None,
        Gating::Learned => {
            let beta = b.matvec(&p.w_beta, x);
            let beta = b.sigmoid(&beta);
            let gamma = match cfg.feature_map {
                FeatureMapKind::EluPlusOne => {
                    let g = b.matvec(&p.w_gamma, x);
                    b.sigmoid(&g)
                }
                FeatureMapKind::LearnedOuterRelu { .. } => {
                    learned_outer(b, x, &p.w_p3, &p.w_gamma, true)
                }
            };
            Some((beta, gamma))
        }
        Gating::Fixed { beta, gamma } => {
            let (dv, dk) = (b.value(&v).len(), b.value(&k).len());
            Some((b.constant(Matrix2::filled(dv, 1, beta)), b.constant(Matrix2::filled(dk, 1, gamma))))
        }
    };
    Projected { q, k, v, gates }
}

/// Gated write terms: `(1−β, 1−γ, β⊙v, γ⊙k)`, or `None` decays when ungated.
pub(crate) struct Writes<T> {
    pub keep_v: Option<T>,
    pub keep_k: Option<T>,
    pub v: T,
    pub k: T,
}

pub(crate) fn writes<B: Backend>(b: &mut B, pr: &Projected<B::T>) -> Writes<B::T> {
    match &pr.gates {
        None => Writes { keep_v: None, keep_k: None, v: pr.v.clone(), k: pr.k.clone() },
        Some((beta, gamma)) => Writes {
            keep_v: Some(b.one_minus(beta)),
            keep_k: Some(b.one_minus(gamma)),
            v: b.mul(beta, &pr.v),
            k: b.mul(gamma, &pr.k),
        },
    }
}

fn decay<B: Backend>(b: &mut B, keep: &Option<B::T>, x: &B::T) -> B::T {
    match keep {
        Some(g) => b.mul(g, x),
        None => x.clone(),
    }
}

fn normalizer<B: Backend>(b: &mut B, w: &Writes<B::T>, s: &B::T) -> B::T {
    let kept = decay(b, &w.keep_k, s);
    b.add(&kept, &w.k)
}

pub(crate) fn readout_matrix<B: Backend>(b: &mut B, q: &B::T, st: &MatrixState<B::T>) -> B::T {
    let num = b.matvec(&st.c, q);
    let den = b.dot(&st.s, q);
    let den = b.offset(&den, DENOM_EPS);
    b.div_scalar(&num, &den)
}

pub(crate) fn readout_agalite<B: Backend>(
    b: &mut B,
    cfg: &HeadConfig,
    q: &B::T,
    st: &AgaliteState<B::T>,
) -> B::T {
    let r = (st.v_tilde.len() - 1) as f64;
    let mut num: Option<B::T> = None;
    for (v, k) in st.v_tilde.iter().zip(&st.k_tilde) {
        let w = b.dot(k, q);
        let term = b.mul_scalar(v, &w);
        num = Some(match num {
            None => term,
            Some(acc) => b.add(&acc, &term),
        });
    }
    let num = num.expect("at least one component");
    let sq = b.dot(&st.s, q);
    let (num, den) = if cfg.derivation_scaling {
        (b.scale(&num, 2.0 / r), b.offset(&sq, DENOM_EPS))
    } else {
        let scaled = b.scale(&sq, 2.0 * r);
        (num, b.offset(&scaled, DENOM_EPS))
    };
    b.div_scalar(&num, &den)
}

pub(crate) fn readout_rank1<B: Backend>(b: &mut B, q: &B::T, st: &Rank1State<B::T>) -> B::T {
    let w = b.dot(&st.k_tilde, q);
    let num = b.mul_scalar(&st.v_tilde, &w);
    let den = b.dot(&st.s, q);
    let den = b.offset(&den, DENOM_EPS);
    b.div_scalar(&num, &den)
}

/// `keep ⊙ x + phase · write`.
fn phased<B: Backend>(b: &mut B, keep: &Option<B::T>, x: &B::T, write: &B::T, phase: f64) -> B::T {
    let kept = decay(b, keep, x);
    let w = b.scale(write, phase);
    b.add(&kept, &w)
}

/// One streaming step: returns the head output and the next state.
///
/// Panics if the state variant does not match `cfg.kind`; [`super::Head`]
/// checks this before calling.
pub fn head_step<B: Backend>(
    b: &mut B,
    cfg: &HeadConfig,
    p: &HeadParams<B::T>,
    x: &B::T,
    state: HeadState<B::T>,
) -> (B::T, HeadState<B::T>) {
    let pr = project(b, cfg, p, x);
    match state {
        HeadState::Matrix(st) => {
            let w = writes(b, &pr);
            let write = b.outer(&w.v, &w.k);
            let c = match (&w.keep_v, &w.keep_k) {
                (Some(kv), Some(kk)) => {
                    let keep = b.outer(kv, kk);
                    let kept = b.mul(&keep, &st.c);
                    b.add(&kept, &write)
                }
                _ => b.add(&st.c, &write),
            };
            let s = normalizer(b, &w, &st.s);
            let next = MatrixState { c, s };
            let a = readout_matrix(b, &pr.q, &next);
            (a, HeadState::Matrix(next))
        }
        HeadState::Agalite(st) => {
            let w = writes(b, &pr);
            let r = (st.v_tilde.len() - 1) as u64;
            let mut v_tilde = Vec::with_capacity(st.v_tilde.len());
            let mut k_tilde = Vec::with_capacity(st.k_tilde.len());
            for (i, (v, k)) in st.v_tilde.iter().zip(&st.k_tilde).enumerate() {
                let phase = cosine_phase(i as u64, st.tick + 1, r);
                b.note_activations(1);
                v_tilde.push(phased(b, &w.keep_v, v, &w.v, phase));
                k_tilde.push(phased(b, &w.keep_k, k, &w.k, phase));
            }
            let s = normalizer(b, &w, &st.s);
            let next = AgaliteState { v_tilde, k_tilde, s, tick: st.tick + 1 };
            let a = readout_agalite(b, cfg, &pr.q, &next);
            (a, HeadState::Agalite(next))
        }
        HeadState::Rank1(mut st) => {
            let w = writes(b, &pr);
            let sign = if st.rng.random::<bool>() { 1.0 } else { -1.0 };
            b.note_activations(1);
            let v_tilde = phased(b, &w.keep_v, &st.v_tilde, &w.v, sign);
            let k_tilde = phased(b, &w.keep_k, &st.k_tilde, &w.k, sign);
            let s = normalizer(b, &w, &st.s);
            st.v_tilde = v_tilde;
            st.k_tilde = k_tilde;
            st.s = s;
            let a = readout_rank1(b, &pr.q, &st);
            (a, HeadState::Rank1(st))
        }
        HeadState::Window(st) => window_step(b, pr, x, st),
    }
}

fn window_step<B: Backend>(
    b: &mut B,
    pr: Projected<B::T>,
    x: &B::T,
    mut st: WindowState<B::T>,
) -> (B::T, HeadState<B::T>) {
    if st.keys.len() == st.memory {
        st.keys.pop_front();
        st.values.pop_front();
    }
    let keys: Vec<B::T> = st.keys.iter().cloned().chain([pr.k.clone()]).collect();
    let values: Vec<B::T> = st.values.iter().cloned().chain([pr.v.clone()]).collect();
    let km = b.stack(&keys);
    let vm = b.stack(&values);
    let scores = b.matvec(&km, &pr.q);
    let d = b.value(x).len() as f64;
    let scores = b.scale(&scores, 1.0 / d.sqrt());
    let weights = b.softmax(&scores);
    let a = b.matvec_t(&vm, &weights);
    let k = b.detach(&pr.k);
    let v = b.detach(&pr.v);
    st.keys.push_back(k);
    st.values.push_back(v);
    (a, HeadState::Window(st))
}
