//! Reverse-mode differentiation over the [`Backend`] primitive set.
//!
//! Every operation appends a node holding its inputs and computed value.
//! Inputs always refer to earlier nodes, so the record is acyclic and a single
//! reverse sweep produces all adjoints.

use super::backend::Backend;
use super::tensor::{elu, kernels, relu, sigmoid, Matrix2};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Matmul(Var, Var),
    MatVec(Var, Var),
    MatVecT(Var, Var),
    Outer(Var, Var),
    Reshape(Var, usize, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Dot(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Sum(Var),
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Var, Var),
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    Slice(Var, usize, usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix2,
    needs_grad: bool,
}

/// Append-only record of primitive operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn compute<'a>(op: &Op, v: impl Fn(Var) -> &'a Matrix2) -> Matrix2 {
    match op {
        Op::Leaf | Op::Const => unreachable!("leaves carry their own values"),
        Op::Matmul(a, b) => kernels::matmul(v(*a), v(*b)),
        Op::MatVec(w, x) => kernels::matvec(v(*w), v(*x).data()),
        Op::MatVecT(w, x) => kernels::matvec_t(v(*w), v(*x).data()),
        Op::Outer(a, b) => kernels::outer(v(*a).data(), v(*b).data()),
        Op::Reshape(x, r, c) => kernels::reshape(v(*x), *r, *c),
        Op::Add(a, b) => kernels::zip(v(*a), v(*b), |x, y| x + y),
        Op::Sub(a, b) => kernels::zip(v(*a), v(*b), |x, y| x - y),
        Op::Mul(a, b) => kernels::zip(v(*a), v(*b), |x, y| x * y),
        Op::Div(a, b) => kernels::zip(v(*a), v(*b), |x, y| x / y),
        Op::Scale(x, c) => kernels::map(v(*x), |t| t * c),
        Op::Offset(x, c) => kernels::map(v(*x), |t| t + c),
        Op::Dot(a, b) => {
            let (a, b) = (v(*a), v(*b));
            assert_eq!(a.len(), b.len(), "dot length");
            Matrix2::scalar(kernels::dot(a.data(), b.data()))
        }
        Op::MulScalar(x, s) => {
            let c = v(*s).item();
            kernels::map(v(*x), |t| t * c)
        }
        Op::DivScalar(x, s) => {
            let c = v(*s).item();
            kernels::map(v(*x), |t| t / c)
        }
        Op::Sum(x) => Matrix2::scalar(v(*x).data().iter().sum()),
        Op::Relu(x) => kernels::map(v(*x), relu),
        Op::Elu(x) => kernels::map(v(*x), elu),
        Op::Sigmoid(x) => kernels::map(v(*x), sigmoid),
        Op::Tanh(x) => kernels::map(v(*x), f64::tanh),
        Op::Exp(x) => kernels::map(v(*x), f64::exp),
        Op::Ln(x) => kernels::map(v(*x), f64::ln),
        Op::Softmax(x) => kernels::softmax(v(*x)),
        Op::LogSoftmax(x) => kernels::log_softmax(v(*x)),
        Op::LayerNorm(x, g, b) => kernels::layer_norm(v(*x), v(*g), v(*b)),
        Op::Stack(parts) => {
            let refs: Vec<&Matrix2> = parts.iter().map(|p| v(*p)).collect();
            kernels::stack(&refs)
        }
        Op::Concat(parts) => {
            let refs: Vec<&Matrix2> = parts.iter().map(|p| v(*p)).collect();
            kernels::concat(&refs)
        }
        Op::Slice(x, off, r, c) => kernels::slice(v(*x), *off, *r, *c),
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Const => vec![],
        Op::Matmul(a, b)
        | Op::MatVec(a, b)
        | Op::MatVecT(a, b)
        | Op::Outer(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Dot(a, b)
        | Op::MulScalar(a, b)
        | Op::DivScalar(a, b) => vec![*a, *b],
        Op::Reshape(x, ..)
        | Op::Scale(x, _)
        | Op::Offset(x, _)
        | Op::Sum(x)
        | Op::Relu(x)
        | Op::Elu(x)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Exp(x)
        | Op::Ln(x)
        | Op::Softmax(x)
        | Op::LogSoftmax(x)
        | Op::Slice(x, ..) => vec![*x],
        Op::LayerNorm(x, g, b) => vec![*x, *g, *b],
        Op::Stack(parts) | Op::Concat(parts) => parts.clone(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix2) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn get(&self, v: Var) -> &Matrix2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op) -> Var {
        let needs_grad = inputs(&op).iter().any(|i| self.nodes[i.0].needs_grad);
        let value = compute(&op, |i| &self.nodes[i.0].value);
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Recomputes every derived node from the recorded leaves and constants.
    pub fn replay(&self) -> Vec<Matrix2> {
        let mut values: Vec<Matrix2> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf | Op::Const => node.value.clone(),
                ref op => compute(op, |i| &values[i.0]),
            };
            values.push(value);
        }
        values
    }

    /// True when a forward replay reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> bool {
        self.replay().iter().zip(&self.nodes).all(|(r, n)| {
            r.shape() == n.value.shape()
                && r.data().iter().zip(n.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }
}

/// Adjoints of every node that influences the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Matrix2> {
        let (r, c) = self.shapes[v.0];
        self.adjoints[v.0]
            .as_ref()
            .map(|d| Matrix2::from_vec(r, c, d.clone()).expect("adjoint shape"))
    }

    /// Adjoint of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix2 {
        let (r, c) = self.shapes[v.0];
        self.get(v).unwrap_or_else(|| Matrix2::zeros(r, c))
    }

    pub fn wrt_slice(&self, v: Var) -> Option<&[f64]> {
        self.adjoints[v.0].as_deref()
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Reverse sweep from a scalar `loss`.
pub fn grad(tape: &Tape, loss: Var) -> Result<Gradients> {
    let nodes = &tape.nodes;
    if nodes[loss.0].value.len() != 1 {
        return Err(Error::Contract(format!(
            "loss must be scalar, got {:?}",
            nodes[loss.0].value.shape()
        )));
    }
    let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
    adj[loss.0] = Some(vec![1.0]);
    for i in (0..=loss.0).rev() {
        let node = &nodes[i];
        if !node.needs_grad {
            continue;
        }
        if matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(dy) = adj[i].take() else { continue };
        let ng = |v: &Var| nodes[v.0].needs_grad;
        let val = |v: &Var| &nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Matmul(a, b) => {
                let (am, bm) = (val(a), val(b));
                let (n, k, m) = (am.rows(), am.cols(), bm.cols());
                if ng(a) {
                    let da = acc(&mut adj, *a, n * k);
                    for r in 0..n {
                        for l in 0..k {
                            let mut s = 0.0;
                            for c in 0..m {
                                s += dy[r * m + c] * bm.data()[l * m + c];
                            }
                            da[r * k + l] += s;
                        }
                    }
                }
                if ng(b) {
                    let db = acc(&mut adj, *b, k * m);
                    for l in 0..k {
                        for c in 0..m {
                            let mut s = 0.0;
                            for r in 0..n {
                                s += am.data()[r * k + l] * dy[r * m + c];
                            }
                            db[l * m + c] += s;
                        }
                    }
                }
            }
            Op::MatVec(w, x) => {
                let (wm, xv) = (val(w), val(x));
                let cols = wm.cols();
                if ng(w) {
                    let dw = acc(&mut adj, *w, wm.len());
                    for (r, &g) in dy.iter().enumerate() {
                        if g != 0.0 {
                            for (d, &xj) in dw[r * cols..(r + 1) * cols].iter_mut().zip(xv.data()) {
                                *d += g * xj;
                            }
                        }
                    }
                }
                if ng(x) {
                    let dx = acc(&mut adj, *x, xv.len());
                    for (r, &g) in dy.iter().enumerate() {
                        if g != 0.0 {
                            for (d, &wij) in dx.iter_mut().zip(wm.row(r)) {
                                *d += g * wij;
                            }
                        }
                    }
                }
            }
            Op::MatVecT(w, x) => {
                let (wm, xv) = (val(w), val(x));
                let cols = wm.cols();
                if ng(w) {
                    let dw = acc(&mut adj, *w, wm.len());
                    for (r, &xr) in xv.data().iter().enumerate() {
                        for (d, &g) in dw[r * cols..(r + 1) * cols].iter_mut().zip(&dy) {
                            *d += xr * g;
                        }
                    }
                }
                if ng(x) {
                    let dx = acc(&mut adj, *x, xv.len());
                    for (r, d) in dx.iter_mut().enumerate() {
                        *d += kernels::dot(wm.row(r), &dy);
                    }
                }
            }
            Op::Outer(u, v) => {
                let (uv, vv) = (val(u), val(v));
                let m = vv.len();
                if ng(u) {
                    let du = acc(&mut adj, *u, uv.len());
                    for (i, d) in du.iter_mut().enumerate() {
                        *d += kernels::dot(&dy[i * m..(i + 1) * m], vv.data());
                    }
                }
                if ng(v) {
                    let dv = acc(&mut adj, *v, m);
                    for (i, &ui) in uv.data().iter().enumerate() {
                        for (d, &g) in dv.iter_mut().zip(&dy[i * m..(i + 1) * m]) {
                            *d += ui * g;
                        }
                    }
                }
            }
            Op::Reshape(x, ..) => add_into(acc(&mut adj, *x, dy.len()), &dy, 1.0),
            Op::Add(a, b) => {
                if ng(a) {
                    add_into(acc(&mut adj, *a, dy.len()), &dy, 1.0);
                }
                if ng(b) {
                    add_into(acc(&mut adj, *b, dy.len()), &dy, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if ng(a) {
                    add_into(acc(&mut adj, *a, dy.len()), &dy, 1.0);
                }
                if ng(b) {
                    add_into(acc(&mut adj, *b, dy.len()), &dy, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if ng(a) {
                    let da = acc(&mut adj, *a, dy.len());
                    for ((d, g), bj) in da.iter_mut().zip(&dy).zip(bv.data()) {
                        *d += g * bj;
                    }
                }
                if ng(b) {
                    let db = acc(&mut adj, *b, dy.len());
                    for ((d, g), aj) in db.iter_mut().zip(&dy).zip(av.data()) {
                        *d += g * aj;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                if ng(a) {
                    let da = acc(&mut adj, *a, dy.len());
                    for ((d, g), bj) in da.iter_mut().zip(&dy).zip(bv.data()) {
                        *d += g / bj;
                    }
                }
                if ng(b) {
                    let db = acc(&mut adj, *b, dy.len());
                    for (j, d) in db.iter_mut().enumerate() {
                        let bj = bv.data()[j];
                        *d -= dy[j] * av.data()[j] / (bj * bj);
                    }
                }
            }
            Op::Scale(x, c) => add_into(acc(&mut adj, *x, dy.len()), &dy, *c),
            Op::Offset(x, _) => add_into(acc(&mut adj, *x, dy.len()), &dy, 1.0),
            Op::Dot(u, v) => {
                let g = dy[0];
                if ng(u) {
                    add_into(acc(&mut adj, *u, dy_len(val(v))), val(v).data(), g);
                }
                if ng(v) {
                    add_into(acc(&mut adj, *v, dy_len(val(u))), val(u).data(), g);
                }
            }
            Op::MulScalar(x, s) => {
                let c = val(s).item();
                if ng(x) {
                    add_into(acc(&mut adj, *x, dy.len()), &dy, c);
                }
                if ng(s) {
                    acc(&mut adj, *s, 1)[0] += kernels::dot(&dy, val(x).data());
                }
            }
            Op::DivScalar(x, s) => {
                let c = val(s).item();
                if ng(x) {
                    add_into(acc(&mut adj, *x, dy.len()), &dy, 1.0 / c);
                }
                if ng(s) {
                    acc(&mut adj, *s, 1)[0] -= kernels::dot(&dy, val(x).data()) / (c * c);
                }
            }
            Op::Sum(x) => {
                let g = dy[0];
                let dx = acc(&mut adj, *x, val(x).len());
                for d in dx.iter_mut() {
                    *d += g;
                }
            }
            Op::Relu(x) => {
                let xv = val(x);
                let dx = acc(&mut adj, *x, dy.len());
                for ((d, g), &xi) in dx.iter_mut().zip(&dy).zip(xv.data()) {
                    if xi > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Elu(x) => {
                let xv = val(x);
                let dx = acc(&mut adj, *x, dy.len());
                for (j, d) in dx.iter_mut().enumerate() {
                    let xi = xv.data()[j];
                    *d += if xi > 0.0 { dy[j] } else { dy[j] * xi.exp() };
                }
            }
            Op::Sigmoid(x) => {
                let dx = acc(&mut adj, *x, dy.len());
                for ((d, g), &s) in dx.iter_mut().zip(&dy).zip(y.data()) {
                    *d += g * s * (1.0 - s);
                }
            }
            Op::Tanh(x) => {
                let dx = acc(&mut adj, *x, dy.len());
                for ((d, g), &t) in dx.iter_mut().zip(&dy).zip(y.data()) {
                    *d += g * (1.0 - t * t);
                }
            }
            Op::Exp(x) => {
                let dx = acc(&mut adj, *x, dy.len());
                for ((d, g), &e) in dx.iter_mut().zip(&dy).zip(y.data()) {
                    *d += g * e;
                }
            }
            Op::Ln(x) => {
                let xv = val(x);
                let dx = acc(&mut adj, *x, dy.len());
                for ((d, g), &xi) in dx.iter_mut().zip(&dy).zip(xv.data()) {
                    *d += g / xi;
                }
            }
            Op::Softmax(x) => {
                let inner = kernels::dot(&dy, y.data());
                let dx = acc(&mut adj, *x, dy.len());
                for ((d, g), &p) in dx.iter_mut().zip(&dy).zip(y.data()) {
                    *d += p * (g - inner);
                }
            }
            Op::LogSoftmax(x) => {
                let total: f64 = dy.iter().sum();
                let dx = acc(&mut adj, *x, dy.len());
                for ((d, g), &ly) in dx.iter_mut().zip(&dy).zip(y.data()) {
                    *d += g - ly.exp() * total;
                }
            }
            Op::LayerNorm(x, gn, bn) => {
                let (xv, gv) = (val(x), val(gn));
                let (xhat, inv_std) = kernels::layer_norm_parts(xv.data());
                if ng(gn) {
                    let dg = acc(&mut adj, *gn, dy.len());
                    for ((d, g), h) in dg.iter_mut().zip(&dy).zip(&xhat) {
                        *d += g * h;
                    }
                }
                if ng(bn) {
                    add_into(acc(&mut adj, *bn, dy.len()), &dy, 1.0);
                }
                if ng(x) {
                    let n = dy.len() as f64;
                    let dxhat: Vec<f64> = dy.iter().zip(gv.data()).map(|(g, w)| g * w).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = kernels::dot(&dxhat, &xhat) / n;
                    let dx = acc(&mut adj, *x, dy.len());
                    for j in 0..dx.len() {
                        dx[j] += inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
            }
            Op::Stack(parts) | Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(p).len();
                    if ng(p) {
                        add_into(acc(&mut adj, *p, len), &dy[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::Slice(x, off, ..) => {
                let dx = acc(&mut adj, *x, val(x).len());
                add_into(&mut dx[*off..off + dy.len()], &dy, 1.0);
            }
        }
    }
    let mut shapes: Vec<(usize, usize)> = nodes.iter().map(|n| n.value.shape()).collect();
    shapes.truncate(adj.len());
    // Keep only leaf adjoints and the loss-path values that callers may inspect.
    Ok(Gradients { adjoints: adj, shapes })
}

fn dy_len(m: &Matrix2) -> usize {
    m.len()
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

impl Backend for Tape {
    type T = Var;

    fn constant(&mut self, value: Matrix2) -> Var {
        self.nodes.push(Node { op: Op::Const, value, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn value<'a>(&'a self, x: &'a Var) -> &'a Matrix2 {
        &self.nodes[x.0].value
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        assert_eq!(self.get(*a).cols(), self.get(*b).rows(), "matmul shape");
        self.push(Op::Matmul(*a, *b))
    }

    fn matvec(&mut self, w: &Var, x: &Var) -> Var {
        self.push(Op::MatVec(*w, *x))
    }

    fn matvec_t(&mut self, w: &Var, x: &Var) -> Var {
        self.push(Op::MatVecT(*w, *x))
    }

    fn outer(&mut self, u: &Var, v: &Var) -> Var {
        self.push(Op::Outer(*u, *v))
    }

    fn reshape(&mut self, x: &Var, rows: usize, cols: usize) -> Var {
        self.push(Op::Reshape(*x, rows, cols))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        self.push(Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        self.push(Op::Sub(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        self.push(Op::Mul(*a, *b))
    }

    fn div(&mut self, a: &Var, b: &Var) -> Var {
        self.push(Op::Div(*a, *b))
    }

    fn scale(&mut self, x: &Var, c: f64) -> Var {
        self.push(Op::Scale(*x, c))
    }

    fn offset(&mut self, x: &Var, c: f64) -> Var {
        self.push(Op::Offset(*x, c))
    }

    fn dot(&mut self, u: &Var, v: &Var) -> Var {
        self.push(Op::Dot(*u, *v))
    }

    fn mul_scalar(&mut self, x: &Var, s: &Var) -> Var {
        self.push(Op::MulScalar(*x, *s))
    }

    fn div_scalar(&mut self, x: &Var, s: &Var) -> Var {
        self.push(Op::DivScalar(*x, *s))
    }

    fn sum(&mut self, x: &Var) -> Var {
        self.push(Op::Sum(*x))
    }

    fn relu(&mut self, x: &Var) -> Var {
        self.push(Op::Relu(*x))
    }

    fn elu(&mut self, x: &Var) -> Var {
        self.push(Op::Elu(*x))
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        self.push(Op::Sigmoid(*x))
    }

    fn tanh(&mut self, x: &Var) -> Var {
        self.push(Op::Tanh(*x))
    }

    fn exp(&mut self, x: &Var) -> Var {
        self.push(Op::Exp(*x))
    }

    fn ln(&mut self, x: &Var) -> Var {
        self.push(Op::Ln(*x))
    }

    fn softmax(&mut self, x: &Var) -> Var {
        self.push(Op::Softmax(*x))
    }

    fn log_softmax(&mut self, x: &Var) -> Var {
        self.push(Op::LogSoftmax(*x))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Var {
        self.push(Op::LayerNorm(*x, *gain, *bias))
    }

    fn stack(&mut self, parts: &[Var]) -> Var {
        self.push(Op::Stack(parts.to_vec()))
    }

    fn concat(&mut self, parts: &[Var]) -> Var {
        self.push(Op::Concat(parts.to_vec()))
    }

    fn slice(&mut self, x: &Var, offset: usize, rows: usize, cols: usize) -> Var {
        self.push(Op::Slice(*x, offset, rows, cols))
    }
}
