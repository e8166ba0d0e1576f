//! First-order elementwise recurrences `h_t = a_t ⊙ h_{t−1} + b_t`.
//!
//! Each step is an affine map; composing maps is associative, so the whole
//! sequence can be evaluated with a work-efficient two-pass prefix scan.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::numerics::Vector;

/// The affine map `h ↦ a ⊙ h + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement {
    pub a: Vector,
    pub b: Vector,
}

impl ScanElement {
    pub fn new(a: Vector, b: Vector) -> Result<Self> {
        if a.len() != b.len() {
            return shape_err(format!("scan element lengths {} and {}", a.len(), b.len()));
        }
        Ok(Self { a, b })
    }

    pub fn identity(n: usize) -> Self {
        Self { a: Vector::filled(n, 1.0), b: Vector::zeros(n) }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn apply(&self, h: &Vector) -> Vector {
        let data = self
            .a
            .as_slice()
            .iter()
            .zip(self.b.as_slice())
            .zip(h.as_slice())
            .map(|((a, b), h)| a * h + b)
            .collect();
        Vector::new(data)
    }
}

/// `e1` followed by `e2`: `(a₂⊙a₁, a₂⊙b₁ + b₂)`.
pub fn combine(e1: &ScanElement, e2: &ScanElement) -> Result<ScanElement> {
    if e1.len() != e2.len() {
        return shape_err(format!("combine of lengths {} and {}", e1.len(), e2.len()));
    }
    Ok(combine_unchecked(e1, e2))
}

fn combine_unchecked(e1: &ScanElement, e2: &ScanElement) -> ScanElement {
    let (a1, b1) = (e1.a.as_slice(), e1.b.as_slice());
    let (a2, b2) = (e2.a.as_slice(), e2.b.as_slice());
    let mut a = Vec::with_capacity(a1.len());
    let mut b = Vec::with_capacity(a1.len());
    for i in 0..a1.len() {
        a.push(a2[i] * a1[i]);
        b.push(a2[i] * b1[i] + b2[i]);
    }
    ScanElement { a: Vector::new(a), b: Vector::new(b) }
}

fn check(elems: &[ScanElement], h0: &Vector) -> Result<()> {
    if elems.is_empty() {
        return shape_err("scan over an empty sequence");
    }
    if let Some((i, _)) = elems.iter().enumerate().find(|(_, e)| e.len() != h0.len() || e.b.len() != h0.len()) {
        return shape_err(format!("scan element {i} does not match state length {}", h0.len()));
    }
    Ok(())
}

pub fn scan_sequential(elems: &[ScanElement], h0: &Vector) -> Result<Vec<Vector>> {
    check(elems, h0)?;
    let mut out = Vec::with_capacity(elems.len());
    let mut h = h0.clone();
    for e in elems {
        h = e.apply(&h);
        out.push(h.clone());
    }
    Ok(out)
}

/// Combine count and combine depth of one parallel scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub combines: usize,
    pub depth: usize,
}

pub fn scan_parallel(elems: &[ScanElement], h0: &Vector) -> Result<Vec<Vector>> {
    scan_parallel_with_stats(elems, h0).map(|(h, _)| h)
}

// `None` is the identity map; combining with it is free and not counted.
fn join(left: &Option<ScanElement>, right: &Option<ScanElement>, count: &AtomicUsize) -> Option<ScanElement> {
    match (left, right) {
        (None, x) | (x, None) => x.clone(),
        (Some(l), Some(r)) => {
            count.fetch_add(1, Ordering::Relaxed);
            Some(combine_unchecked(l, r))
        }
    }
}

/// Two-pass (up-sweep, down-sweep) scan over a tree padded to a power of two.
/// The tree shape depends only on the sequence length, so results do not
/// depend on the number of workers.
pub fn scan_parallel_with_stats(elems: &[ScanElement], h0: &Vector) -> Result<(Vec<Vector>, ScanStats)> {
    check(elems, h0)?;
    let t = elems.len();
    let n = t.next_power_of_two();
    let mut tree: Vec<Option<ScanElement>> = elems.iter().cloned().map(Some).collect();
    tree.resize(n, None);
    let count = AtomicUsize::new(0);
    let mut depth = 0;

    let mut stride = 1;
    while stride < n {
        let before = count.load(Ordering::Relaxed);
        tree.par_chunks_mut(2 * stride).for_each(|chunk| {
            let joined = join(&chunk[stride - 1], &chunk[2 * stride - 1], &count);
            chunk[2 * stride - 1] = joined;
        });
        if count.load(Ordering::Relaxed) > before {
            depth += 1;
        }
        stride *= 2;
    }

    let total = tree[n - 1].take();
    let mut stride = n / 2;
    while stride >= 1 {
        let before = count.load(Ordering::Relaxed);
        tree.par_chunks_mut(2 * stride).for_each(|chunk| {
            let prefix = chunk[2 * stride - 1].take();
            let left = chunk[stride - 1].take();
            chunk[2 * stride - 1] = join(&prefix, &left, &count);
            chunk[stride - 1] = prefix;
        });
        if count.load(Ordering::Relaxed) > before {
            depth += 1;
        }
        stride /= 2;
    }

    // Inclusive prefix i is the exclusive prefix of i + 1; the last is the total.
    let apply = |p: &Option<ScanElement>| match p {
        Some(e) => e.apply(h0),
        None => h0.clone(),
    };
    let mut out: Vec<Vector> = (1..t).into_par_iter().map(|i| apply(&tree[i])).collect();
    out.push(apply(&total));
    Ok((out, ScanStats { combines: count.into_inner(), depth }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_elems(seed: u64, t: usize, dim: usize) -> Vec<ScanElement> {
        let mut rng = rng::stream(seed, &[]);
        (0..t)
            .map(|_| ScanElement {
                a: Vector::new((0..dim).map(|_| rng.random_range(0.0..1.0)).collect()),
                b: Vector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            })
            .collect()
    }

    fn max_dev(x: &[Vector], y: &[Vector]) -> f64 {
        x.iter().zip(y).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
    }

    #[test]
    fn identity_is_neutral() {
        let e = random_elems(1, 1, 5).pop().unwrap();
        let id = ScanElement::identity(5);
        assert_eq!(combine(&id, &e).unwrap(), e);
        assert_eq!(combine(&e, &id).unwrap(), e);
    }

    #[test]
    fn sequential_examples() {
        let b: Vec<Vector> = (0..4).map(|i| Vector::filled(2, i as f64)).collect();
        let elems: Vec<ScanElement> =
            b.iter().map(|b| ScanElement { a: Vector::zeros(2), b: b.clone() }).collect();
        assert_eq!(scan_sequential(&elems, &Vector::filled(2, 9.0)).unwrap(), b);

        let elems = vec![ScanElement { a: Vector::filled(2, 1.0), b: Vector::filled(2, 0.5) }; 6];
        let out = scan_sequential(&elems, &Vector::filled(2, 1.0)).unwrap();
        for (t, h) in out.iter().enumerate() {
            assert_eq!(h.as_slice(), &[1.0 + (t + 1) as f64 * 0.5; 2]);
        }
    }

    #[test]
    fn sequential_matches_unrolled_formula() {
        let elems = random_elems(2, 17, 3);
        let h0 = Vector::new(vec![0.3, -0.2, 1.0]);
        let out = scan_sequential(&elems, &h0).unwrap();
        for t in 0..17 {
            for j in 0..3 {
                let mut want = h0[j] * (0..=t).map(|i| elems[i].a[j]).product::<f64>();
                for i in 0..=t {
                    let decay: f64 = (i + 1..=t).map(|k| elems[k].a[j]).product();
                    want += decay * elems[i].b[j];
                }
                assert!((out[t][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        for t in [1, 2, 3, 7, 64, 1000, 1024] {
            let elems = random_elems(t as u64, t, 4);
            let h0 = Vector::new(vec![0.5, -0.5, 0.25, 2.0]);
            let seq = scan_sequential(&elems, &h0).unwrap();
            let (par, stats) = scan_parallel_with_stats(&elems, &h0).unwrap();
            assert_eq!(par.len(), t);
            assert!(max_dev(&seq, &par) < 1e-12, "t={t}");
            assert!(stats.combines <= 2 * t, "t={t} combines={}", stats.combines);
            let log = (t as f64).log2().ceil() as usize;
            assert!(stats.depth <= 2 * log, "t={t} depth={}", stats.depth);
        }
    }

    #[test]
    fn parallel_is_independent_of_pool_size() {
        let elems = random_elems(5, 300, 6);
        let h0 = Vector::zeros(6);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| scan_parallel(&elems, &h0).unwrap());
        let b = four.install(|| scan_parallel(&elems, &h0).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(scan_parallel(&[], &Vector::zeros(2)).is_err());
        let elems = random_elems(6, 3, 2);
        assert!(scan_sequential(&elems, &Vector::zeros(3)).is_err());
        assert!(combine(&elems[0], &ScanElement::identity(3)).is_err());
    }

    fn element(dim: usize) -> impl Strategy<Value = ScanElement> {
        (prop::collection::vec(-1.5f64..1.5, dim), prop::collection::vec(-1.5f64..1.5, dim))
            .prop_map(|(a, b)| ScanElement { a: Vector::new(a), b: Vector::new(b) })
    }

    proptest! {
        #[test]
        fn combine_is_associative(
            (x, y, z) in (1usize..=16).prop_flat_map(|d| (element(d), element(d), element(d)))
        ) {
            let left = combine(&combine(&x, &y).unwrap(), &z).unwrap();
            let right = combine(&x, &combine(&y, &z).unwrap()).unwrap();
            prop_assert!(left.a.max_abs_diff(&right.a) < 1e-12);
            prop_assert!(left.b.max_abs_diff(&right.b) < 1e-12);
        }

        #[test]
        fn parallel_equals_sequential(t in 1usize..=300, dim in 1usize..=8, seed in 0u64..1000) {
            let elems = random_elems(seed, t, dim);
            let h0 = Vector::filled(dim, 0.7);
            let seq = scan_sequential(&elems, &h0).unwrap();
            let par = scan_parallel(&elems, &h0).unwrap();
            prop_assert!(max_dev(&seq, &par) < 1e-12);
        }
    }
}
