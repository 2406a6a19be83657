//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node after all of its consumers. Parameters enter the tape as
//! borrowed leaves; nothing is copied until an operation produces a new value.
//!
//! Shape errors inside tape operations are programming errors and panic. The
//! public model entry points validate user-facing shapes before recording.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    RepeatRows(Var),
    Sum(Var),
    WeightedSqErr {
        pred: Var,
        target: Tensor,
        row_weights: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Computation tape. Borrowed leaves live for `'a`.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or parameter by reference.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be a matrix");
        assert_eq!(bv.rows(), k, "matmul inner dimension");
        let n = bv.cols();
        let out = matmul(av.data(), bv.data(), m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// `a[m × n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        let n = av.cols();
        assert_eq!(bv.len(), n, "add_row bias length");
        let mut out = av.as_matrix();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    /// `x·w + b`, the affine layer used throughout the networks.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(Tensor::matrix(rows, len, out), Op::SliceCols(a, start))
    }

    /// Broadcasts a single row to `n` rows.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let out = self.value(a).repeat_rows(n);
        self.push(out, Op::RepeatRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ_r w_r Σ_c (pred[r,c] − target[r,c])²` as a scalar.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Tensor, row_weights: Vec<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "weighted_sq_err shape");
        assert_eq!(row_weights.len(), pv.rows(), "weighted_sq_err weights");
        let mut total = 0.0;
        for (r, &w) in row_weights.iter().enumerate() {
            let row_sum: f64 = pv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            total += w * row_sum;
        }
        self.push(
            Tensor::scalar(total),
            Op::WeightedSqErr {
                pred,
                target,
                row_weights,
            },
        )
    }

    /// Adjoints of `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("gradient source must be scalar"));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let da = matmul_nt(g.data(), bv.data(), m, n, k);
                    accumulate(&mut adj, *a, av.shape(), da);
                    let db = matmul_tn(av.data(), g.data(), m, k, n);
                    accumulate(&mut adj, *b, bv.shape(), db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, self.value(*a).shape(), g.data().to_vec());
                    accumulate(&mut adj, *b, self.value(*b).shape(), g.into_data());
                }
                Op::Sub(a, b) => {
                    let neg = g.data().iter().map(|v| -v).collect();
                    accumulate(&mut adj, *a, self.value(*a).shape(), g.into_data());
                    accumulate(&mut adj, *b, self.value(*b).shape(), neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut adj, *a, av.shape(), da);
                    accumulate(&mut adj, *b, bv.shape(), db);
                }
                Op::AddRow(a, bias) => {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *bias, self.value(*bias).shape(), db);
                    accumulate(&mut adj, *a, self.value(*a).shape(), g.into_data());
                }
                Op::Scale(a, c) => {
                    let da = g.data().iter().map(|v| v * c).collect();
                    accumulate(&mut adj, *a, self.value(*a).shape(), da);
                }
                Op::AddScalar(a) => {
                    accumulate(&mut adj, *a, self.value(*a).shape(), g.into_data());
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let da = g.data().iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut adj, *a, self.value(*a).shape(), da);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let da = g.data().iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut adj, *a, self.value(*a).shape(), da);
                }
                Op::Silu(a) => {
                    let x = self.value(*a).data();
                    let da = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut adj, *a, self.value(*a).shape(), da);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = (g.rows(), g.cols());
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let w = pv.cols();
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut adj, *p, pv.shape(), dp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.len();
                        accumulate(&mut adj, *p, pv.shape(), g.data()[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let (rows, cols, len) = (av.rows(), av.cols(), g.cols());
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *a, av.shape(), da);
                }
                Op::RepeatRows(a) => {
                    let av = self.value(*a);
                    let mut da = vec![0.0; av.len()];
                    for r in 0..g.rows() {
                        for (d, v) in da.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *a, av.shape(), da);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let s = g.data()[0];
                    accumulate(&mut adj, *a, av.shape(), vec![s; av.len()]);
                }
                Op::WeightedSqErr {
                    pred,
                    target,
                    row_weights,
                } => {
                    let pv = self.value(*pred);
                    let s = g.data()[0];
                    let cols = pv.cols();
                    let mut dp = Vec::with_capacity(pv.len());
                    for (r, &w) in row_weights.iter().enumerate() {
                        for c in 0..cols {
                            let i = r * cols + c;
                            dp.push(2.0 * s * w * (pv.data()[i] - target.data()[i]));
                        }
                    }
                    accumulate(&mut adj, *pred, pv.shape(), dp);
                }
            }
        }
        Ok(Gradients { adj })
    }

    /// `∂loss/∂param` for each named parameter; unreachable parameters get
    /// zero tensors of their own shape.
    pub fn grad(&self, loss: Var, params: &[(String, Var)]) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(loss)?;
        Ok(params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape, delta).expect("adjoint shape"));
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints produced by [`Tape::backward`]. Only leaves keep their adjoint.
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|a| a.as_ref())
    }
}
