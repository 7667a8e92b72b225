//! Minimal reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records a define-by-run graph of matrix operations; calling
//! [`Tape::backward`] on a scalar root returns the gradient with respect to
//! every recorded node. Everything is double precision so analytic gradients
//! can be validated against central finite differences at tight tolerances.

use std::sync::Arc;

use crate::energy::energy_relaxed_grad;
use crate::problem::ProblemInstance;
use crate::state::RelaxedAssignment;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Gelu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleByScalar(Var, Var),
    /// Relaxed Eq.-1 energy of a row-stochastic input; backward uses the
    /// analytic gradient from the energy module.
    RelaxedEnergy(Var, Arc<ProblemInstance>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of a scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient tensor for `v`; zero tensor if the root does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let t = tape.value(v);
                Tensor::zeros(t.rows, t.cols)
            }
        }
    }
}

/// Define-by-run reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records an input tensor (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.same_shape(tb), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.same_shape(tb), "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(ta.same_shape(tb), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| c * x).collect());
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| c + x).collect());
        self.push(t, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.cols, tb.rows, "matmul inner dimension mismatch");
        let t = matmul_raw(ta, tb);
        self.push(t, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = transpose_raw(ta);
        self.push(t, Op::Transpose(a))
    }

    /// Numerically stabilized softmax across each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let mut t = Tensor::zeros(ta.rows, ta.cols);
        for i in 0..ta.rows {
            let row = &ta.data[i * ta.cols..(i + 1) * ta.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - max).exp();
                t.set(i, j, e);
                sum += e;
            }
            for j in 0..ta.cols {
                let v = t.get(i, j) / sum;
                t.set(i, j, v);
            }
        }
        self.push(t, Op::SoftmaxRows(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let d = ta.cols as f64;
        let mut t = Tensor::zeros(ta.rows, ta.cols);
        for i in 0..ta.rows {
            let row = &ta.data[i * ta.cols..(i + 1) * ta.cols];
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &x) in row.iter().enumerate() {
                t.set(i, j, (x - mean) * inv);
            }
        }
        self.push(t, Op::LayerNormRows(a, eps))
    }

    /// Tanh-form GELU activation (smooth everywhere, which keeps central
    /// finite differences clean).
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|&x| gelu_fn(x)).collect());
        self.push(t, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| x.exp()).collect());
        self.push(t, Op::Exp(a))
    }

    /// Clamps entries to `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor::from_vec(
            ta.rows,
            ta.cols,
            ta.data.iter().map(|x| x.clamp(lo, hi)).collect(),
        );
        self.push(t, Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.rows, tb.rows, "concat_cols row mismatch");
        let cols = ta.cols + tb.cols;
        let mut t = Tensor::zeros(ta.rows, cols);
        for i in 0..ta.rows {
            for j in 0..ta.cols {
                t.set(i, j, ta.get(i, j));
            }
            for j in 0..tb.cols {
                t.set(i, ta.cols + j, tb.get(i, j));
            }
        }
        self.push(t, Op::ConcatCols(a, b))
    }

    /// Column slice `[from, to)`.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        assert!(from < to && to <= ta.cols, "slice_cols out of range");
        let mut t = Tensor::zeros(ta.rows, to - from);
        for i in 0..ta.rows {
            for j in from..to {
                t.set(i, j - from, ta.get(i, j));
            }
        }
        self.push(t, Op::SliceCols(a, from, to))
    }

    /// Adds a `1 x n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert!(tr.rows == 1 && tr.cols == ta.cols, "add_row shape mismatch");
        let mut t = ta.clone();
        for i in 0..t.rows {
            for j in 0..t.cols {
                let v = t.get(i, j) + tr.data[j];
                t.set(i, j, v);
            }
        }
        self.push(t, Op::AddRow(a, row))
    }

    /// Multiplies every row of an `m x n` matrix by a `1 x n` row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert!(tr.rows == 1 && tr.cols == ta.cols, "mul_row shape mismatch");
        let mut t = ta.clone();
        for i in 0..t.rows {
            for j in 0..t.cols {
                let v = t.get(i, j) * tr.data[j];
                t.set(i, j, v);
            }
        }
        self.push(t, Op::MulRow(a, row))
    }

    /// Multiplies a tensor by a 1x1 scalar node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        assert_eq!(ts.data.len(), 1, "scale_by needs a scalar");
        let sv = ts.data[0];
        let t = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| sv * x).collect());
        self.push(t, Op::ScaleByScalar(a, s))
    }

    /// Relaxed energy of a row-stochastic `n x K` input (1x1 output).
    pub fn relaxed_energy(&mut self, x: Var, instance: Arc<ProblemInstance>) -> Var {
        let tx = &self.nodes[x.0].value;
        let relaxed = RelaxedAssignment { n: tx.rows, k: tx.cols, x: tx.data.clone() };
        let rep = crate::energy::energy_relaxed(&relaxed, &instance)
            .expect("relaxed energy on tape input");
        self.push(Tensor::scalar(rep.total), Op::RelaxedEnergy(x, instance))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.data.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| {
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data.iter_mut().zip(&delta.data) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                let neg = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|x| -x).collect());
                add_to(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ga = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
                );
                let gb = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect(),
                );
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let ga = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|x| c * x).collect());
                add_to(grads, *a, ga);
            }
            Op::AddScalar(a) => add_to(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let bt = transpose_raw(tb);
                let at = transpose_raw(ta);
                add_to(grads, *a, matmul_raw(g, &bt));
                add_to(grads, *b, matmul_raw(&at, g));
            }
            Op::Transpose(a) => add_to(grads, *a, transpose_raw(g)),
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut ga = Tensor::zeros(y.rows, y.cols);
                for i in 0..y.rows {
                    let mut dot = 0.0;
                    for j in 0..y.cols {
                        dot += g.get(i, j) * y.get(i, j);
                    }
                    for j in 0..y.cols {
                        ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                add_to(grads, *a, ga);
            }
            Op::LayerNormRows(a, eps) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[idx].value;
                let d = x.cols as f64;
                let mut ga = Tensor::zeros(x.rows, x.cols);
                for i in 0..x.rows {
                    let row = &x.data[i * x.cols..(i + 1) * x.cols];
                    let mean = row.iter().sum::<f64>() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut gmean = 0.0;
                    let mut gydoty = 0.0;
                    for j in 0..x.cols {
                        gmean += g.get(i, j);
                        gydoty += g.get(i, j) * y.get(i, j);
                    }
                    gmean /= d;
                    gydoty /= d;
                    for j in 0..x.cols {
                        let v = inv * (g.get(i, j) - gmean - y.get(i, j) * gydoty);
                        ga.set(i, j, v);
                    }
                }
                add_to(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let x = &self.nodes[a.0].value;
                let ga = Tensor::from_vec(
                    x.rows,
                    x.cols,
                    x.data.iter().zip(&g.data).map(|(&xv, gv)| gv * gelu_grad(xv)).collect(),
                );
                add_to(grads, *a, ga);
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                let ga = Tensor::from_vec(
                    y.rows,
                    y.cols,
                    y.data.iter().zip(&g.data).map(|(yv, gv)| yv * gv).collect(),
                );
                add_to(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value;
                let ga = Tensor::from_vec(
                    x.rows,
                    x.cols,
                    x.data
                        .iter()
                        .zip(&g.data)
                        .map(|(&xv, gv)| if xv > *lo && xv < *hi { *gv } else { 0.0 })
                        .collect(),
                );
                add_to(grads, *a, ga);
            }
            Op::Sum(a) => {
                let ta = &self.nodes[a.0].value;
                let ga = Tensor::from_vec(ta.rows, ta.cols, vec![g.item(); ta.rows * ta.cols]);
                add_to(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.nodes[a.0].value.cols, self.nodes[b.0].value.cols);
                let mut ga = Tensor::zeros(g.rows, ca);
                let mut gb = Tensor::zeros(g.rows, cb);
                for i in 0..g.rows {
                    for j in 0..ca {
                        ga.set(i, j, g.get(i, j));
                    }
                    for j in 0..cb {
                        gb.set(i, j, g.get(i, ca + j));
                    }
                }
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::SliceCols(a, from, _to) => {
                let ta = &self.nodes[a.0].value;
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        ga.set(i, from + j, g.get(i, j));
                    }
                }
                add_to(grads, *a, ga);
            }
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                let mut gr = Tensor::zeros(1, g.cols);
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        gr.data[j] += g.get(i, j);
                    }
                }
                add_to(grads, *row, gr);
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                let mut gr = Tensor::zeros(1, ta.cols);
                for i in 0..ta.rows {
                    for j in 0..ta.cols {
                        ga.set(i, j, g.get(i, j) * tr.data[j]);
                        gr.data[j] += g.get(i, j) * ta.get(i, j);
                    }
                }
                add_to(grads, *a, ga);
                add_to(grads, *row, gr);
            }
            Op::ScaleByScalar(a, s) => {
                let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
                let sv = ts.data[0];
                let ga = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|x| sv * x).collect());
                let gs = Tensor::scalar(
                    g.data.iter().zip(&ta.data).map(|(gv, av)| gv * av).sum::<f64>(),
                );
                add_to(grads, *a, ga);
                add_to(grads, *s, gs);
            }
            Op::RelaxedEnergy(x, instance) => {
                let tx = &self.nodes[x.0].value;
                let relaxed = RelaxedAssignment { n: tx.rows, k: tx.cols, x: tx.data.clone() };
                let egrad =
                    energy_relaxed_grad(&relaxed, instance).expect("energy gradient on tape input");
                let s = g.item();
                let ga = Tensor::from_vec(tx.rows, tx.cols, egrad.iter().map(|d| s * d).collect());
                add_to(grads, *x, ga);
            }
        }
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for kk in 0..a.cols {
            let av = a.get(i, kk);
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * b.cols..(kk + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.set(j, i, a.get(i, j));
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fn(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
