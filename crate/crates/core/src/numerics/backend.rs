use super::tensor::{elu, kernels, relu, sigmoid, Matrix2};

/// The primitive operation set every mechanism is written against.
///
/// Vectors are `n x 1` column matrices. Elementwise operations require equal
/// shapes; `matvec` and `outer` read their vector operands as flat data.
/// Implementations panic on shape violations: public entry points validate
/// shapes before calling into generic code.
pub trait Backend {
    type T: Clone;

    /// A value that carries no gradient.
    fn constant(&mut self, value: Matrix2) -> Self::T;
    fn value<'a>(&'a self, x: &'a Self::T) -> &'a Matrix2;

    /// Cuts gradient flow through `x`.
    fn detach(&mut self, x: &Self::T) -> Self::T {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn matvec(&mut self, w: &Self::T, x: &Self::T) -> Self::T;
    fn matvec_t(&mut self, w: &Self::T, x: &Self::T) -> Self::T;
    fn outer(&mut self, u: &Self::T, v: &Self::T) -> Self::T;
    fn reshape(&mut self, x: &Self::T, rows: usize, cols: usize) -> Self::T;

    fn add(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn div(&mut self, a: &Self::T, b: &Self::T) -> Self::T;
    fn scale(&mut self, x: &Self::T, c: f64) -> Self::T;
    /// `x + c` elementwise.
    fn offset(&mut self, x: &Self::T, c: f64) -> Self::T;

    fn dot(&mut self, u: &Self::T, v: &Self::T) -> Self::T;
    /// `x * s` for a `1 x 1` node `s`.
    fn mul_scalar(&mut self, x: &Self::T, s: &Self::T) -> Self::T;
    /// `x / s` for a `1 x 1` node `s`.
    fn div_scalar(&mut self, x: &Self::T, s: &Self::T) -> Self::T;
    fn sum(&mut self, x: &Self::T) -> Self::T;

    fn relu(&mut self, x: &Self::T) -> Self::T;
    fn elu(&mut self, x: &Self::T) -> Self::T;
    fn sigmoid(&mut self, x: &Self::T) -> Self::T;
    fn tanh(&mut self, x: &Self::T) -> Self::T;
    fn exp(&mut self, x: &Self::T) -> Self::T;
    fn ln(&mut self, x: &Self::T) -> Self::T;
    fn softmax(&mut self, x: &Self::T) -> Self::T;
    fn log_softmax(&mut self, x: &Self::T) -> Self::T;
    fn layer_norm(&mut self, x: &Self::T, gain: &Self::T, bias: &Self::T) -> Self::T;

    /// Stacks equal-length parts as the rows of a matrix.
    fn stack(&mut self, parts: &[Self::T]) -> Self::T;
    /// Concatenates parts into one column vector.
    fn concat(&mut self, parts: &[Self::T]) -> Self::T;
    fn slice(&mut self, x: &Self::T, offset: usize, rows: usize, cols: usize) -> Self::T;

    /// Records scalar nonlinearity evaluations done outside the primitive set
    /// (cosine phases, random signs).
    fn note_activations(&mut self, _n: u64) {}

    fn one_minus(&mut self, x: &Self::T) -> Self::T {
        let neg = self.scale(x, -1.0);
        self.offset(&neg, 1.0)
    }

    fn element(&mut self, x: &Self::T, i: usize) -> Self::T {
        self.slice(x, i, 1, 1)
    }
}

/// Plain evaluation on owned matrices, with a running tally of scalar
/// multiply-adds and activation evaluations.
#[derive(Debug, Default, Clone)]
pub struct Eval {
    pub mul_adds: u64,
    pub activations: u64,
}

impl Eval {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset_counts(&mut self) {
        self.mul_adds = 0;
        self.activations = 0;
    }

    fn ew(&mut self, a: &Matrix2, b: &Matrix2, f: impl Fn(f64, f64) -> f64) -> Matrix2 {
        self.mul_adds += a.len() as u64;
        kernels::zip(a, b, f)
    }

    fn act(&mut self, x: &Matrix2, f: impl Fn(f64) -> f64) -> Matrix2 {
        self.activations += x.len() as u64;
        kernels::map(x, f)
    }
}

impl Backend for Eval {
    type T = Matrix2;

    fn constant(&mut self, value: Matrix2) -> Matrix2 {
        value
    }

    fn value<'a>(&'a self, x: &'a Matrix2) -> &'a Matrix2 {
        x
    }

    fn detach(&mut self, x: &Matrix2) -> Matrix2 {
        x.clone()
    }

    fn matmul(&mut self, a: &Matrix2, b: &Matrix2) -> Matrix2 {
        assert_eq!(a.cols(), b.rows(), "matmul shape");
        self.mul_adds += (a.rows() * a.cols() * b.cols()) as u64;
        kernels::matmul(a, b)
    }

    fn matvec(&mut self, w: &Matrix2, x: &Matrix2) -> Matrix2 {
        self.mul_adds += w.len() as u64;
        kernels::matvec(w, x.data())
    }

    fn matvec_t(&mut self, w: &Matrix2, x: &Matrix2) -> Matrix2 {
        self.mul_adds += w.len() as u64;
        kernels::matvec_t(w, x.data())
    }

    fn outer(&mut self, u: &Matrix2, v: &Matrix2) -> Matrix2 {
        self.mul_adds += (u.len() * v.len()) as u64;
        kernels::outer(u.data(), v.data())
    }

    fn reshape(&mut self, x: &Matrix2, rows: usize, cols: usize) -> Matrix2 {
        kernels::reshape(x, rows, cols)
    }

    fn add(&mut self, a: &Matrix2, b: &Matrix2) -> Matrix2 {
        self.ew(a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Matrix2, b: &Matrix2) -> Matrix2 {
        self.ew(a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Matrix2, b: &Matrix2) -> Matrix2 {
        self.ew(a, b, |x, y| x * y)
    }

    fn div(&mut self, a: &Matrix2, b: &Matrix2) -> Matrix2 {
        self.ew(a, b, |x, y| x / y)
    }

    fn scale(&mut self, x: &Matrix2, c: f64) -> Matrix2 {
        self.mul_adds += x.len() as u64;
        kernels::map(x, |v| v * c)
    }

    fn offset(&mut self, x: &Matrix2, c: f64) -> Matrix2 {
        self.mul_adds += x.len() as u64;
        kernels::map(x, |v| v + c)
    }

    fn dot(&mut self, u: &Matrix2, v: &Matrix2) -> Matrix2 {
        assert_eq!(u.len(), v.len(), "dot length");
        self.mul_adds += u.len() as u64;
        Matrix2::scalar(kernels::dot(u.data(), v.data()))
    }

    fn mul_scalar(&mut self, x: &Matrix2, s: &Matrix2) -> Matrix2 {
        let c = s.item();
        self.mul_adds += x.len() as u64;
        kernels::map(x, |v| v * c)
    }

    fn div_scalar(&mut self, x: &Matrix2, s: &Matrix2) -> Matrix2 {
        let c = s.item();
        self.mul_adds += x.len() as u64;
        kernels::map(x, |v| v / c)
    }

    fn sum(&mut self, x: &Matrix2) -> Matrix2 {
        self.mul_adds += x.len() as u64;
        Matrix2::scalar(x.data().iter().sum())
    }

    fn relu(&mut self, x: &Matrix2) -> Matrix2 {
        self.act(x, relu)
    }

    fn elu(&mut self, x: &Matrix2) -> Matrix2 {
        self.act(x, elu)
    }

    fn sigmoid(&mut self, x: &Matrix2) -> Matrix2 {
        self.act(x, sigmoid)
    }

    fn tanh(&mut self, x: &Matrix2) -> Matrix2 {
        self.act(x, f64::tanh)
    }

    fn exp(&mut self, x: &Matrix2) -> Matrix2 {
        self.act(x, f64::exp)
    }

    fn ln(&mut self, x: &Matrix2) -> Matrix2 {
        self.act(x, f64::ln)
    }

    fn softmax(&mut self, x: &Matrix2) -> Matrix2 {
        self.activations += x.len() as u64;
        self.mul_adds += 2 * x.len() as u64;
        kernels::softmax(x)
    }

    fn log_softmax(&mut self, x: &Matrix2) -> Matrix2 {
        self.activations += x.len() as u64;
        self.mul_adds += 2 * x.len() as u64;
        kernels::log_softmax(x)
    }

    fn layer_norm(&mut self, x: &Matrix2, gain: &Matrix2, bias: &Matrix2) -> Matrix2 {
        self.mul_adds += 5 * x.len() as u64;
        kernels::layer_norm(x, gain, bias)
    }

    fn stack(&mut self, parts: &[Matrix2]) -> Matrix2 {
        let refs: Vec<&Matrix2> = parts.iter().collect();
        kernels::stack(&refs)
    }

    fn concat(&mut self, parts: &[Matrix2]) -> Matrix2 {
        let refs: Vec<&Matrix2> = parts.iter().collect();
        kernels::concat(&refs)
    }

    fn slice(&mut self, x: &Matrix2, offset: usize, rows: usize, cols: usize) -> Matrix2 {
        kernels::slice(x, offset, rows, cols)
    }

    fn note_activations(&mut self, n: u64) {
        self.activations += n;
    }
}
