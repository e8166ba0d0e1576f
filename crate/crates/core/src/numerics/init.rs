use rand_distr::{Distribution, StandardNormal};

use super::tensor::Matrix2;
use crate::rng::Rng;

/// `rows x cols` matrix with orthonormal rows or columns (whichever is the
/// shorter side), scaled by `gain`. Gaussian draws are orthonormalized with
/// modified Gram-Schmidt.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Matrix2 {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    if rows >= cols {
        Matrix2::from_fn(rows, cols, |i, j| gain * basis[j][i])
    } else {
        Matrix2::from_fn(rows, cols, |i, j| gain * basis[i][j])
    }
}
