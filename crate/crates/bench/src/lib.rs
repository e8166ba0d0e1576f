//! Fixtures shared by the criterion benches.

use galite_core::bench::warm_state;
use galite_core::scan::ScanElement;
use galite_core::{Head, HeadConfig, HeadState, Matrix2, Vector};

pub const D: usize = 64;
pub const D_H: usize = 64;

/// A head of width [`D`]/[`D_H`] with a state as if `t` steps had passed,
/// plus one input to step with.
pub fn warmed(cfg: HeadConfig, t: u64) -> (Head, HeadState<Matrix2>, Vector) {
    let head = Head::random(cfg, D, D_H, 0).expect("valid bench config");
    let state = warm_state(&cfg, D_H, t, 1);
    let x = Vector::new((0..D).map(|i| ((i as f64) * 0.37).sin()).collect());
    (head, state, x)
}

pub fn inputs(t: usize) -> Matrix2 {
    Matrix2::from_fn(t, D, |i, j| ((i * D + j) as f64 * 0.13).cos())
}

/// `len` decaying affine maps of width `n`.
pub fn scan_elements(len: usize, n: usize) -> Vec<ScanElement> {
    (0..len)
        .map(|t| {
            let a = Vector::new((0..n).map(|i| 0.5 + 0.49 * ((t + i) as f64).sin()).collect());
            let b = Vector::new((0..n).map(|i| ((t * n + i) as f64 * 0.7).cos()).collect());
            ScanElement::new(a, b).expect("equal lengths")
        })
        .collect()
}
