//! Kernel feature maps for keys and queries.
//!
//! Learned maps flatten `p ⊗ m` row-major, so the `W_p`-projected factor
//! indexes rows: entry `i * d_h + j` is `p[i] * m[j]`.

use crate::error::{shape_err, Result};
use crate::numerics::{elu, relu, sigmoid, Backend, Matrix2, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMapKind {
    /// `ELU(z) + 1`, output length `d_h`.
    EluPlusOne,
    /// `flatten(relu(W_p x) ⊗ relu(W_m x))`, output length `eta * d_h`.
    LearnedOuterRelu { eta: usize },
}

impl FeatureMapKind {
    /// Key/query dimension produced for head width `d_h`.
    pub fn key_dim(self, d_h: usize) -> usize {
        match self {
            FeatureMapKind::EluPlusOne => d_h,
            FeatureMapKind::LearnedOuterRelu { eta } => eta * d_h,
        }
    }
}

pub fn phi_elu(z: &Vector) -> Vector {
    Vector::new(z.as_slice().iter().map(|&v| elu(v) + 1.0).collect())
}

fn check_learned(x: &Vector, w_p: &Matrix2, w_m: &Matrix2) -> Result<()> {
    if w_p.cols() != x.len() || w_m.cols() != x.len() {
        return shape_err(format!(
            "feature map weights {:?} and {:?} against input of length {}",
            w_p.shape(),
            w_m.shape(),
            x.len()
        ));
    }
    Ok(())
}

fn outer_flat(x: &Vector, w_p: &Matrix2, w_m: &Matrix2, f: fn(f64) -> f64) -> Vec<f64> {
    let project = |w: &Matrix2| -> Vec<f64> {
        (0..w.rows())
            .map(|i| f(w.row(i).iter().zip(x.as_slice()).map(|(a, b)| a * b).sum()))
            .collect()
    };
    let p = project(w_p);
    let m = project(w_m);
    p.iter().flat_map(|pi| m.iter().map(move |mj| pi * mj)).collect()
}

/// `flatten(relu(W_p x) ⊗ relu(W_m x))`.
pub fn phi_learned(x: &Vector, w_p: &Matrix2, w_m: &Matrix2) -> Result<Vector> {
    check_learned(x, w_p, w_m)?;
    Ok(Vector::new(outer_flat(x, w_p, w_m, relu)))
}

/// `flatten(σ(W_p3 x) ⊗ σ(W_γ x))`.
pub fn gamma_learned(x: &Vector, w_p3: &Matrix2, w_gamma: &Matrix2) -> Result<Vector> {
    check_learned(x, w_p3, w_gamma)?;
    Ok(Vector::new(outer_flat(x, w_p3, w_gamma, sigmoid)))
}

pub(crate) fn elu_plus_one<B: Backend>(b: &mut B, z: &B::T) -> B::T {
    let e = b.elu(z);
    b.offset(&e, 1.0)
}

/// Backend form of the learned maps; `sigmoid_gate` selects the gate variant.
pub(crate) fn learned_outer<B: Backend>(
    b: &mut B,
    x: &B::T,
    w_p: &B::T,
    w_m: &B::T,
    sigmoid_gate: bool,
) -> B::T {
    let p = b.matvec(w_p, x);
    let m = b.matvec(w_m, x);
    let (p, m) = if sigmoid_gate {
        (b.sigmoid(&p), b.sigmoid(&m))
    } else {
        (b.relu(&p), b.relu(&m))
    };
    let o = b.outer(&p, &m);
    let n = b.value(&o).len();
    b.reshape(&o, n, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Eval;
    use proptest::prelude::*;

    #[test]
    fn elu_examples() {
        assert_eq!(phi_elu(&Vector::zeros(3)).as_slice(), &[1.0, 1.0, 1.0]);
        assert_eq!(phi_elu(&Vector::new(vec![1.0])).as_slice(), &[2.0]);
        let got = phi_elu(&Vector::new(vec![-1.0]))[0];
        assert!((got - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn learned_zero_input() {
        let w = Matrix2::filled(2, 3, 0.7);
        let w_m = Matrix2::filled(4, 3, -0.3);
        let out = phi_learned(&Vector::zeros(3), &w, &w_m).unwrap();
        assert_eq!(out.as_slice(), &[0.0; 8]);
    }

    #[test]
    fn learned_unit_projection_passes_through() {
        let w_p = Matrix2::from_rows(&[&[1.0, 0.0]]).unwrap();
        let w_m = Matrix2::from_rows(&[&[2.0, -1.0], &[-3.0, 0.5], &[0.0, 1.0]]).unwrap();
        let x = Vector::new(vec![1.0, 0.4]);
        let out = phi_learned(&x, &w_p, &w_m).unwrap();
        assert_eq!(out.as_slice(), &[1.6, 0.0, 0.4]);
    }

    #[test]
    fn learned_hand_case() {
        let id = Matrix2::identity(2);
        let x = Vector::new(vec![1.0, -1.0]);
        let out = phi_learned(&x, &id, &id).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn learned_shape_mismatch() {
        let w = Matrix2::zeros(2, 3);
        assert!(phi_learned(&Vector::zeros(2), &w, &w).is_err());
        assert!(gamma_learned(&Vector::zeros(2), &w, &w).is_err());
    }

    #[test]
    fn gamma_examples() {
        let w = Matrix2::filled(2, 3, 1.3);
        let out = gamma_learned(&Vector::zeros(3), &w, &w).unwrap();
        assert!(out.as_slice().iter().all(|&g| g == 0.25));

        let big = Matrix2::filled(2, 1, 50.0);
        let out = gamma_learned(&Vector::new(vec![1.0]), &big, &big).unwrap();
        assert!(out.as_slice().iter().all(|&g| g > 0.999));

        let out = gamma_learned(
            &Vector::new(vec![1.0]),
            &Matrix2::scalar(2.0),
            &Matrix2::scalar(-2.0),
        )
        .unwrap();
        let expected = (1.0 / (1.0 + (-2.0f64).exp())) * (1.0 / (1.0 + 2.0f64.exp()));
        assert!((out[0] - expected).abs() < 1e-15);
        assert!((out[0] - 0.1050).abs() < 1e-4);
    }

    #[test]
    fn backend_form_matches_plain() {
        let w_p = Matrix2::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let w_m = Matrix2::from_fn(2, 4, |i, j| ((i * 4 + j) as f64).sin());
        let x = Vector::new(vec![0.5, -1.0, 2.0, 0.1]);
        let mut b = Eval::new();
        let got = learned_outer(&mut b, &x.to_column(), &w_p, &w_m, false);
        assert_eq!(got.data(), phi_learned(&x, &w_p, &w_m).unwrap().as_slice());
        let got = learned_outer(&mut b, &x.to_column(), &w_p, &w_m, true);
        assert_eq!(got.data(), gamma_learned(&x, &w_p, &w_m).unwrap().as_slice());
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix2> {
        prop::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Matrix2::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn map_properties(
            (eta, d_h, _d, w_p, w_m, x) in (1usize..=4, 1usize..=5, 1usize..=5).prop_flat_map(
                |(eta, d_h, d)| (
                    Just(eta), Just(d_h), Just(d),
                    mat(eta, d), mat(d_h, d),
                    prop::collection::vec(-3.0f64..3.0, d),
                )
            )
        ) {
            let x = Vector::new(x);
            let k = phi_learned(&x, &w_p, &w_m).unwrap();
            let g = gamma_learned(&x, &w_p, &w_m).unwrap();
            prop_assert_eq!(k.len(), eta * d_h);
            prop_assert_eq!(g.len(), eta * d_h);
            for i in 0..eta {
                let p: f64 = w_p.row(i).iter().zip(x.as_slice()).map(|(a, b)| a * b).sum();
                for j in 0..d_h {
                    let m: f64 = w_m.row(j).iter().zip(x.as_slice()).map(|(a, b)| a * b).sum();
                    let e = k[i * d_h + j];
                    prop_assert!(e >= 0.0);
                    if p <= 0.0 || m <= 0.0 {
                        prop_assert_eq!(e, 0.0);
                    }
                    prop_assert!(g[i * d_h + j] > 0.0 && g[i * d_h + j] < 1.0);
                }
            }
            prop_assert!(phi_elu(&x).as_slice().iter().all(|&v| v > 0.0));
        }
    }
}
