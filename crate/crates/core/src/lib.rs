//! Recurrent linear attention for partially observable control.
//!
//! The crate provides the linear transformer, GaLiTe and AGaLiTe attention
//! mechanisms together with canonical and windowed softmax attention, all
//! written once against the [`numerics::Backend`] trait so the same code runs
//! on plain `f64` values, under operation counting, and on the reverse-mode
//! [`numerics::Tape`].
//!
//! Around the mechanisms sit the pieces needed to validate them: the cosine
//! Kronecker-delta approximation ([`kron`]), associative scans ([`scan`]),
//! a GTrXL-style block stack ([`block`]), the T-Maze environment
//! ([`tmaze`]), an A2C trainer ([`a2c`]), op counting and latency
//! measurement ([`bench`]) and brute-force reference implementations
//! ([`oracle`]).

pub mod a2c;
pub mod attention;
pub mod bench;
pub mod checks;
pub mod block;
pub mod error;
pub mod feature_maps;
pub mod kron;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod scan;
pub mod tmaze;

pub use attention::{
    AgaliteState, Gating, Head, HeadConfig, HeadParams, HeadState, MatrixState, MechanismKind,
    Rank1State, WindowState,
};
pub use block::{Model, ModelConfig, ModelState, ParamStore};
pub use error::{Error, Result};
pub use feature_maps::FeatureMapKind;
pub use numerics::{Backend, Eval, Matrix2, Tape, Var, Vector};

/// Guard added to every attention readout denominator.
pub const DENOM_EPS: f64 = 1e-6;
