//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] records every operation in evaluation order, which is a
//! topological order by construction. [`Tape::backward`] walks it once in
//! reverse and accumulates adjoints. Scalars are 1x1 matrices.
//!
//! Binary elementwise ops (`add`, `sub`, `mul`) accept a 1 x cols row
//! vector on the right-hand side and broadcast it over the rows of the
//! left-hand side; no other broadcasting is supported.
//!
//! ```
//! use lrvd::autodiff::Tape;
//! use lrvd::numerics::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

use crate::error::{shape_err, LrvdError, Result};
use crate::numerics::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SoftmaxRows(usize),
    /// Stores the row-softmax probabilities and labels for the backward pass.
    CrossEntropy(usize, Matrix, Vec<usize>),
    Clamp(usize, f64, f64),
    Relu(usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node of a tape after a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; all zeros when `v` did not influence
    /// the loss.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    a == b || (b.0 == 1 && b.1 == a.1)
}

fn sum_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// Applies `f(a_ij, b_.j)` with `b` either the same shape or a broadcast row.
fn zip_broadcast(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        Matrix::from_fn(a.rows(), a.cols(), |i, j| f(a[(i, j)], b[(i, j)]))
    } else {
        Matrix::from_fn(a.rows(), a.cols(), |i, j| f(a[(i, j)], b[(0, j)]))
    }
}

fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        let (rows, cols) = value.shape();
        self.nodes.push(Node { op, value });
        Var {
            id: self.nodes.len() - 1,
            rows,
            cols,
        }
    }

    /// Records an input. Whether it is a trainable parameter or a constant
    /// is up to the caller; every leaf gets a gradient slot.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.id].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !broadcast_ok(a.shape(), b.shape()) {
            return shape_err("add", format!("{:?} + {:?}", a.shape(), b.shape()));
        }
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a.id, b.id), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if !broadcast_ok(a.shape(), b.shape()) {
            return shape_err("sub", format!("{:?} - {:?}", a.shape(), b.shape()));
        }
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a.id, b.id), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if !broadcast_ok(a.shape(), b.shape()) {
            return shape_err("mul", format!("{:?} * {:?}", a.shape(), b.shape()));
        }
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a.id, b.id), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a.id, b.id), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a.id), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a.id, s), v)
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::Offset(a.id), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a.id), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a.id), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a.id), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a.id), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a.id), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a.id), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::scalar(m.sum() / m.len() as f64);
        self.push(Op::Mean(a.id), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = row_softmax(self.value(a));
        self.push(Op::SoftmaxRows(a.id), v)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = logits.shape();
        if labels.len() != rows {
            return shape_err(
                "cross_entropy",
                format!("{} labels for {rows} rows of logits", labels.len()),
            );
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return shape_err("cross_entropy", format!("label {bad} with {cols} classes"));
        }
        let z = self.value(logits);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        let probs = row_softmax(z);
        let v = Matrix::scalar(loss / rows as f64);
        Ok(self.push(Op::CrossEntropy(logits.id, probs, labels.to_vec()), v))
    }

    /// Clamps entries to `[lo, hi]`. The gradient passes through where the
    /// input lies inside the closed interval and is zero outside it.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(LrvdError::InvalidArgument(format!("clamp: empty interval [{lo}, {hi}]")));
        }
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        Ok(self.push(Op::Clamp(a.id, lo, hi), v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a.id), v)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(LrvdError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", loss.shape()),
            });
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
            match &mut grads[id] {
                Some(existing) => existing
                    .add_assign(&g)
                    .expect("adjoint shape matches node shape"),
                slot @ None => *slot = Some(g),
            }
        }
        // Reduces a gradient to a broadcast operand's shape.
        fn fit(g: Matrix, shape: (usize, usize)) -> Matrix {
            if g.shape() == shape {
                g
            } else {
                sum_rows(&g)
            }
        }

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let bs = self.nodes[*b].value.shape();
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, fit(g.clone(), bs));
                }
                Op::Sub(a, b) => {
                    let bs = self.nodes[*b].value.shape();
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, fit(g.scale(-1.0), bs));
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let ga = zip_broadcast(&g, bv, |x, y| x * y);
                    let gb = fit(g.hadamard(av).expect("same shape"), bv.shape());
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let ga = g.matmul_t(bv).expect("matmul backward");
                    let gb = av.transpose().matmul(&g).expect("matmul backward");
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Offset(a) => acc(&mut grads, *a, g.clone()),
                Op::Exp(a) => acc(&mut grads, *a, g.hadamard(out).expect("same shape")),
                Op::Log(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut grads, *a, zip_broadcast(&g, av, |x, y| x / y));
                }
                Op::Sigmoid(a) => {
                    acc(&mut grads, *a, zip_broadcast(&g, out, |x, s| x * s * (1.0 - s)));
                }
                Op::Sqrt(a) => {
                    acc(&mut grads, *a, zip_broadcast(&g, out, |x, s| 0.5 * x / s));
                }
                Op::Square(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut grads, *a, zip_broadcast(&g, av, |x, y| 2.0 * x * y));
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    acc(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    acc(&mut grads, *a, Matrix::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Matrix::zeros(out.rows(), out.cols());
                    for i in 0..out.rows() {
                        let s = out.row(i);
                        let gi = g.row(i);
                        let inner: f64 = s.iter().zip(gi).map(|(p, q)| p * q).sum();
                        for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                            *o = s[j] * (gi[j] - inner);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(a, probs, labels) => {
                    let scale = g.item() / labels.len() as f64;
                    let mut ga = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        ga[(i, l)] -= 1.0;
                    }
                    acc(&mut grads, *a, ga.scale(scale));
                }
                Op::Clamp(a, lo, hi) => {
                    let av = &self.nodes[*a].value;
                    let ga = zip_broadcast(&g, av, |x, y| if y >= *lo && y <= *hi { x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut grads, *a, zip_broadcast(&g, av, |x, y| if y > 0.0 { x } else { 0.0 }));
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}
