use super::backend::Backend;
use super::tape::{grad, Tape, Var};
use super::tensor::Matrix2;

/// Largest relative disagreement between the tape gradient of `f` at `theta`
/// and a central difference with step `h`.
///
/// `f` receives the parameters as a single `n x 1` leaf and must return a
/// scalar. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, theta: &[f64], h: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    finite_diff_check_with_floor(f, theta, h, 1e-8)
}

/// As [`finite_diff_check`] with `floor` in place of `1e-8` in the
/// denominator. Useful when some coordinates have gradients near the
/// round-off level of the objective.
pub fn finite_diff_check_with_floor<F>(f: F, theta: &[f64], h: f64, floor: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let eval = |values: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let p = tape.leaf(Matrix2::column(values.to_vec()));
        let out = f(&mut tape, p);
        tape.value(&out).item()
    };
    let mut tape = Tape::new();
    let p = tape.leaf(Matrix2::column(theta.to_vec()));
    let out = f(&mut tape, p);
    let analytic = grad(&tape, out).expect("scalar objective").wrt(p);

    let mut worst: f64 = 0.0;
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = eval(&probe);
        probe[i] = theta[i] - h;
        let down = eval(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
