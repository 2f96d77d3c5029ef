//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; node
//! ids grow monotonically, so the insertion order is already a topological
//! order and [`Tape::backward`] is a single reverse sweep. Vectors are
//! represented as `1 x n` (or `n x 1`) matrices so every op works on
//! [`Array2<f64>`].
//!
//! The op set is exactly what the regression model needs: affine maps,
//! softmax rows, row-wise layer norm, GELU, concatenation/slicing and a
//! handful of scalar broadcasts. Each backward rule is checked against
//! central finite differences in the unit tests below.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddElem(Var, Var),
    /// `(m x n) + (1 x n)` broadcast over rows.
    AddRow(Var, Var),
    SubElem(Var, Var),
    /// `(m x n) - s` where `s` is `1 x 1`.
    SubScalarBcast(Var, Var),
    ScaleConst(Var, f64),
    MulElem(Var, Var),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalized input, cached for the backward pass.
        xhat: Array2<f64>,
        /// Per-row 1/sqrt(var + eps).
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    SumAll(Var),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Records a forward computation for later reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    /// Gradient of the loss with respect to `v`. Zero-shaped `None` means
    /// the node did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-1x1 node");
        val[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::AddElem(a, b), value)
    }

    /// Broadcast-add a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x n row");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols());
        let value = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(Op::SubElem(a, b), value)
    }

    /// Subtract the scalar node `s` (`1 x 1`) from every entry of `a`.
    pub fn sub_scalar(&mut self, a: Var, scalar: Var) -> Var {
        let c = self.scalar(scalar);
        let value = self.value(a).mapv(|x| x - c);
        self.push(Op::SubScalarBcast(a, scalar), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(Op::ScaleConst(a, c), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(Op::MulElem(a, b), value)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu_scalar);
        self.push(Op::Gelu(a), value)
    }

    /// Row-wise layer normalization with affine parameters (`1 x n` each).
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert_eq!(self.value(gamma).dim(), (1, cols));
        assert_eq!(self.value(beta).dim(), (1, cols));
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                xhat[[r, c]] = (xv[[r, c]] - mean) * is;
            }
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = Array2::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                out[[r, c]] = xhat[[r, c]] * gv[[0, c]] + bv[[0, c]];
            }
        }
        self.push(
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut out = Array2::zeros((total, cols));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            out.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            at += v.nrows();
        }
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            out.slice_mut(s![.., at..at + v.ncols()]).assign(v);
            at += v.ncols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_rows(&mut self, a: Var, from: usize, to: usize) -> Var {
        let value = self.value(a).slice(s![from..to, ..]).to_owned();
        self.push(Op::SliceRows(a, from, to), value)
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let value = self.value(a).slice(s![.., from..to]).to_owned();
        self.push(Op::SliceCols(a, from, to), value)
    }

    /// Row-major reshape; element count must match.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape element count mismatch");
        let value = Array2::from_shape_vec((rows, cols), v.iter().cloned().collect()).unwrap();
        self.push(Op::Reshape(a), value)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let value = Array2::from_elem((1, 1), total);
        self.push(Op::SumAll(a), value)
    }

    /// Mean of all entries as a `1 x 1` node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let total = self.sum_all(a);
        self.scale(total, 1.0 / n)
    }

    /// Reverse sweep from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..self.nodes.len()).rev() {
            let g = match grads[id].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().to_owned());
                }
                Op::AddElem(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, dr);
                }
                Op::SubElem(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.mapv(|v| -v));
                }
                Op::SubScalarBcast(a, scalar) => {
                    let ds = Array2::from_elem((1, 1), -g.sum());
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *scalar, ds);
                }
                Op::ScaleConst(a, c) => {
                    accumulate(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::MulElem(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut da = Array2::zeros(p.dim());
                    for r in 0..p.nrows() {
                        let dot: f64 = (0..p.ncols()).map(|c| g[[r, c]] * p[[r, c]]).sum();
                        for c in 0..p.ncols() {
                            da[[r, c]] = p[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let da = &g * &self.value(*a).mapv(gelu_deriv);
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNormRows {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let (rows, cols) = xhat.dim();
                    let mut dx = Array2::zeros((rows, cols));
                    let mut dgamma = Array2::zeros((1, cols));
                    let mut dbeta = Array2::zeros((1, cols));
                    for r in 0..rows {
                        let mut mean_gh = 0.0;
                        let mut mean_gh_xhat = 0.0;
                        for c in 0..cols {
                            let gh = g[[r, c]] * gv[[0, c]];
                            mean_gh += gh;
                            mean_gh_xhat += gh * xhat[[r, c]];
                        }
                        mean_gh /= cols as f64;
                        mean_gh_xhat /= cols as f64;
                        for c in 0..cols {
                            let gh = g[[r, c]] * gv[[0, c]];
                            dx[[r, c]] =
                                inv_std[r] * (gh - mean_gh - xhat[[r, c]] * mean_gh_xhat);
                            dgamma[[0, c]] += g[[r, c]] * xhat[[r, c]];
                            dbeta[[0, c]] += g[[r, c]];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        let dp = g.slice(s![at..at + n, ..]).to_owned();
                        accumulate(&mut grads, p, dp);
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        let dp = g.slice(s![.., at..at + n]).to_owned();
                        accumulate(&mut grads, p, dp);
                        at += n;
                    }
                }
                Op::SliceRows(a, from, to) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(s![*from..*to, ..]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, from, to) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(s![.., *from..*to]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let da = Array2::from_shape_vec(dim, g.iter().cloned().collect()).unwrap();
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, da);
                }
            }
        }
        Grads(grads)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}
