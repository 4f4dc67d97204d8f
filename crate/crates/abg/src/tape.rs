//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! A forward pass records one `Node` per operation; `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products into each
//! node's gradient buffer. Parents always precede children, so the sweep
//! is a single reverse scan.

use std::rc::Rc;

use crate::error::{AbgError, Result};
use crate::mat::Mat;
use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    // the shift is forward-only; backward passes the gradient through
    AddScalar(Var, #[allow(dead_code)] f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Sqrt(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    RowSum(Var),
    ColSum(Var),
    /// a / b with b an n x 1 column broadcast over each row of a.
    DivColBroadcast(Var, Var),
    /// a / b with b a 1 x m row broadcast down each column of a.
    DivRowBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    AddRowBroadcast(Var, Var),
    ConcatCols(Var, Var),
    SelectRows(Var, Rc<Vec<usize>>),
    SelectEntries(Var, Rc<Vec<(usize, usize)>>),
    GatherRowCol(Var, Rc<Vec<usize>>),
    /// Row (i*C + j) of the output is |a_i - b_j| for a: RxD, b: CxD.
    PairAbsDiff(Var, Var),
    MulMask(Var, Rc<Vec<f64>>),
    GradReverse(Var, f64),
    // stop-gradient: the parent is recorded but never receives a gradient
    Detach(#[allow(dead_code)] Var),
    Sum(Var),
    Reshape(Var),
}

struct Node {
    value: Mat,
    grad: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let grad = Mat::zeros(value.rows, value.cols);
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Mat {
        &self.nodes[v.0].grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.data[0]
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    // ── Construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Mat::scalar(v), Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert!(self.value(a).same_shape(self.value(b)), "add shape");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert!(self.value(a).same_shape(self.value(b)), "sub shape");
        let bv = self.value(b).clone();
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&bv.data) {
            *x -= y;
        }
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        assert!(self.value(a).same_shape(self.value(b)), "mul_elem shape");
        let bv = self.value(b).clone();
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&bv.data) {
            *x *= y;
        }
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for c in 0..x.cols {
                let e = (row[c] - m).exp();
                v.set(r, c, e);
                s += e;
            }
            for c in 0..x.cols {
                let e = v.get(r, c) / s;
                v.set(r, c, e);
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows, 1);
        for r in 0..x.rows {
            v.data[r] = x.row(r).iter().sum();
        }
        self.push(v, Op::RowSum(a))
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(1, x.cols);
        for r in 0..x.rows {
            for c in 0..x.cols {
                v.data[c] += x.get(r, c);
            }
        }
        self.push(v, Op::ColSum(a))
    }

    pub fn div_col_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (x, d) = (self.value(a), self.value(b));
        assert_eq!(d.cols, 1);
        assert_eq!(d.rows, x.rows);
        let mut v = x.clone();
        for r in 0..x.rows {
            let s = d.data[r];
            for c in 0..x.cols {
                v.data[r * x.cols + c] /= s;
            }
        }
        self.push(v, Op::DivColBroadcast(a, b))
    }

    pub fn div_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (x, d) = (self.value(a), self.value(b));
        assert_eq!(d.rows, 1);
        assert_eq!(d.cols, x.cols);
        let mut v = x.clone();
        for r in 0..x.rows {
            for c in 0..x.cols {
                v.data[r * x.cols + c] /= d.data[c];
            }
        }
        self.push(v, Op::DivRowBroadcast(a, b))
    }

    pub fn mul_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (x, s) = (self.value(a), self.value(b));
        assert_eq!(s.rows, 1);
        assert_eq!(s.cols, x.cols);
        let mut v = x.clone();
        for r in 0..x.rows {
            for c in 0..x.cols {
                v.data[r * x.cols + c] *= s.data[c];
            }
        }
        self.push(v, Op::MulRowBroadcast(a, b))
    }

    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (x, s) = (self.value(a), self.value(b));
        assert_eq!(s.rows, 1);
        assert_eq!(s.cols, x.cols);
        let mut v = x.clone();
        for r in 0..x.rows {
            for c in 0..x.cols {
                v.data[r * x.cols + c] += s.data[c];
            }
        }
        self.push(v, Op::AddRowBroadcast(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows, y.rows, "concat_cols rows");
        let mut v = Mat::zeros(x.rows, x.cols + y.cols);
        for r in 0..x.rows {
            let dst = &mut v.data[r * (x.cols + y.cols)..];
            dst[..x.cols].copy_from_slice(x.row(r));
            dst[x.cols..x.cols + y.cols].copy_from_slice(y.row(r));
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn select_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(idx.len(), x.cols);
        for (r, &i) in idx.iter().enumerate() {
            v.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(x.row(i));
        }
        self.push(v, Op::SelectRows(a, idx))
    }

    pub fn select_entries(&mut self, a: Var, entries: Rc<Vec<(usize, usize)>>) -> Var {
        let x = self.value(a);
        let data: Vec<f64> = entries.iter().map(|&(r, c)| x.get(r, c)).collect();
        let v = Mat::from_vec(entries.len(), 1, data);
        self.push(v, Op::SelectEntries(a, entries))
    }

    pub fn gather_row_col(&mut self, a: Var, cols: Rc<Vec<usize>>) -> Var {
        let x = self.value(a);
        assert_eq!(cols.len(), x.rows);
        let data: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        let v = Mat::from_vec(x.rows, 1, data);
        self.push(v, Op::GatherRowCol(a, cols))
    }

    pub fn pair_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "pair_abs_diff feature width");
        let (rn, cn, d) = (x.rows, y.rows, x.cols);
        let mut out = vec![0.0; rn * cn * d];
        parallel::par_chunks_mut(&mut out, d, |p, row| {
            let (i, j) = (p / cn, p % cn);
            let xr = &x.data[i * d..(i + 1) * d];
            let yr = &y.data[j * d..(j + 1) * d];
            for k in 0..d {
                row[k] = (xr[k] - yr[k]).abs();
            }
        });
        self.push(Mat::from_vec(rn * cn, d, out), Op::PairAbsDiff(a, b))
    }

    pub fn mul_mask(&mut self, a: Var, mask: Rc<Vec<f64>>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len());
        let data: Vec<f64> = x.data.iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        self.push(v, Op::MulMask(a, mask))
    }

    /// Identity forward; gradients flowing back are multiplied by `-beta`.
    pub fn grad_reverse(&mut self, a: Var, beta: f64) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::GradReverse(a, beta))
    }

    /// Identity forward; no gradient flows back.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(rows * cols, x.len(), "reshape size");
        let v = Mat::from_vec(rows, cols, x.data.clone());
        self.push(v, Op::Reshape(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populates gradients of every ancestor of `loss` with d loss / d node.
    /// Repeated calls without `zero_grads` accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        {
            let lv = &self.nodes[loss.0].value;
            if lv.len() != 1 {
                return Err(AbgError::NotScalar { rows: lv.rows, cols: lv.cols });
            }
            if !lv.data[0].is_finite() {
                return Err(AbgError::NonFiniteEvaluation(format!(
                    "loss value {}",
                    lv.data[0]
                )));
            }
        }
        // interior adjoints are scratch space for this sweep; only leaf
        // gradients accumulate across repeated calls
        for node in self.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.grad.data.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        self.nodes[loss.0].grad.data[0] += 1.0;
        for i in (0..=loss.0).rev() {
            let (parents, this) = self.nodes.split_at_mut(i);
            let node = &this[0];
            let g = &node.grad;
            match node.op.clone() {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    parents[a.0].grad.add_assign(g);
                    parents[b.0].grad.add_assign(g);
                }
                Op::Sub(a, b) => {
                    parents[a.0].grad.add_assign(g);
                    for (x, y) in parents[b.0].grad.data.iter_mut().zip(&g.data) {
                        *x -= y;
                    }
                }
                Op::MulElem(a, b) => {
                    if a.0 == b.0 {
                        let av = parents[a.0].value.data.clone();
                        for (k, gv) in g.data.iter().enumerate() {
                            parents[a.0].grad.data[k] += 2.0 * gv * av[k];
                        }
                    } else {
                        // split the two parents apart to borrow values and grads
                        let (lo, hi) = if a.0 < b.0 { (a.0, b.0) } else { (b.0, a.0) };
                        let (left, right) = parents.split_at_mut(hi);
                        let (pa, pb) = if a.0 < b.0 {
                            (&mut left[lo], &mut right[0])
                        } else {
                            (&mut right[0], &mut left[lo])
                        };
                        for k in 0..g.data.len() {
                            pa.grad.data[k] += g.data[k] * pb.value.data[k];
                            pb.grad.data[k] += g.data[k] * pa.value.data[k];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    for (x, y) in parents[a.0].grad.data.iter_mut().zip(&g.data) {
                        *x += c * y;
                    }
                }
                Op::AddScalar(a, _) => parents[a.0].grad.add_assign(g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(&parents[b.0].value);
                    let db = parents[a.0].value.matmul_tn(g);
                    parents[a.0].grad.add_assign(&da);
                    parents[b.0].grad.add_assign(&db);
                }
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    parents[a.0].grad.add_assign(&gt);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    for k in 0..g.data.len() {
                        let s = y.data[k];
                        parents[a.0].grad.data[k] += g.data[k] * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    for k in 0..g.data.len() {
                        parents[a.0].grad.data[k] += g.data[k] * (1.0 - y.data[k] * y.data[k]);
                    }
                }
                Op::Ln(a) => {
                    let xv = &parents[a.0].value.data;
                    for k in 0..g.data.len() {
                        parents[a.0].grad.data[k] += g.data[k] / xv[k];
                    }
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    for k in 0..g.data.len() {
                        parents[a.0].grad.data[k] += g.data[k] / (2.0 * y.data[k]);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let xv = &parents[a.0].value.data;
                    for k in 0..g.data.len() {
                        let d = if xv[k] > 0.0 { 1.0 } else { slope };
                        parents[a.0].grad.data[k] += g.data[k] * d;
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let xv = &parents[a.0].value.data;
                    for k in 0..g.data.len() {
                        if xv[k] >= lo && xv[k] <= hi {
                            parents[a.0].grad.data[k] += g.data[k];
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.cols;
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, gg)| p * gg).sum();
                        let dst = &mut parents[a.0].grad.data[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::RowSum(a) => {
                    let pa = &mut parents[a.0];
                    let cols = pa.value.cols;
                    for r in 0..pa.value.rows {
                        let gv = g.data[r];
                        for c in 0..cols {
                            pa.grad.data[r * cols + c] += gv;
                        }
                    }
                }
                Op::ColSum(a) => {
                    let pa = &mut parents[a.0];
                    let cols = pa.value.cols;
                    for r in 0..pa.value.rows {
                        for c in 0..cols {
                            pa.grad.data[r * cols + c] += g.data[c];
                        }
                    }
                }
                Op::DivColBroadcast(a, b) => {
                    let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                    let (left, right) = parents.split_at_mut(hi);
                    let (pa, pb) = if a.0 < b.0 {
                        (&mut left[lo], &mut right[0])
                    } else {
                        (&mut right[0], &mut left[lo])
                    };
                    let cols = pa.value.cols;
                    for r in 0..pa.value.rows {
                        let d = pb.value.data[r];
                        let mut acc = 0.0;
                        for c in 0..cols {
                            let gv = g.data[r * cols + c];
                            pa.grad.data[r * cols + c] += gv / d;
                            acc += gv * pa.value.data[r * cols + c];
                        }
                        pb.grad.data[r] -= acc / (d * d);
                    }
                }
                Op::DivRowBroadcast(a, b) => {
                    let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                    let (left, right) = parents.split_at_mut(hi);
                    let (pa, pb) = if a.0 < b.0 {
                        (&mut left[lo], &mut right[0])
                    } else {
                        (&mut right[0], &mut left[lo])
                    };
                    let cols = pa.value.cols;
                    for r in 0..pa.value.rows {
                        for c in 0..cols {
                            let d = pb.value.data[c];
                            let gv = g.data[r * cols + c];
                            pa.grad.data[r * cols + c] += gv / d;
                            pb.grad.data[c] -= gv * pa.value.data[r * cols + c] / (d * d);
                        }
                    }
                }
                Op::MulRowBroadcast(a, b) => {
                    let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                    let (left, right) = parents.split_at_mut(hi);
                    let (pa, pb) = if a.0 < b.0 {
                        (&mut left[lo], &mut right[0])
                    } else {
                        (&mut right[0], &mut left[lo])
                    };
                    let cols = pa.value.cols;
                    for r in 0..pa.value.rows {
                        for c in 0..cols {
                            let gv = g.data[r * cols + c];
                            pa.grad.data[r * cols + c] += gv * pb.value.data[c];
                            pb.grad.data[c] += gv * pa.value.data[r * cols + c];
                        }
                    }
                }
                Op::AddRowBroadcast(a, b) => {
                    parents[a.0].grad.add_assign(g);
                    let pb = &mut parents[b.0];
                    let cols = pb.value.cols;
                    for r in 0..g.rows {
                        for c in 0..cols {
                            pb.grad.data[c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = parents[a.0].value.cols;
                    let cb = parents[b.0].value.cols;
                    for r in 0..g.rows {
                        let grow = &g.data[r * (ca + cb)..(r + 1) * (ca + cb)];
                        for c in 0..ca {
                            parents[a.0].grad.data[r * ca + c] += grow[c];
                        }
                        for c in 0..cb {
                            parents[b.0].grad.data[r * cb + c] += grow[ca + c];
                        }
                    }
                }
                Op::SelectRows(a, idx) => {
                    let pa = &mut parents[a.0];
                    let cols = pa.value.cols;
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            pa.grad.data[i * cols + c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::SelectEntries(a, entries) => {
                    let pa = &mut parents[a.0];
                    let cols = pa.value.cols;
                    for (k, &(r, c)) in entries.iter().enumerate() {
                        pa.grad.data[r * cols + c] += g.data[k];
                    }
                }
                Op::GatherRowCol(a, cols_idx) => {
                    let pa = &mut parents[a.0];
                    let cols = pa.value.cols;
                    for (r, &c) in cols_idx.iter().enumerate() {
                        pa.grad.data[r * cols + c] += g.data[r];
                    }
                }
                Op::PairAbsDiff(a, b) => {
                    let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                    let (left, right) = parents.split_at_mut(hi);
                    let (pa, pb) = if a.0 < b.0 {
                        (&mut left[lo], &mut right[0])
                    } else {
                        (&mut right[0], &mut left[lo])
                    };
                    let d = pa.value.cols;
                    let cn = pb.value.rows;
                    for p in 0..(pa.value.rows * cn) {
                        let (i, j) = (p / cn, p % cn);
                        for k in 0..d {
                            let diff = pa.value.data[i * d + k] - pb.value.data[j * d + k];
                            let s = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            let gv = g.data[p * d + k] * s;
                            pa.grad.data[i * d + k] += gv;
                            pb.grad.data[j * d + k] -= gv;
                        }
                    }
                }
                Op::MulMask(a, mask) => {
                    let pa = &mut parents[a.0];
                    for k in 0..g.data.len() {
                        pa.grad.data[k] += g.data[k] * mask[k];
                    }
                }
                Op::GradReverse(a, beta) => {
                    for (x, y) in parents[a.0].grad.data.iter_mut().zip(&g.data) {
                        *x -= beta * y;
                    }
                }
                Op::Detach(_) => {}
                Op::Sum(a) => {
                    let gv = g.data[0];
                    for x in parents[a.0].grad.data.iter_mut() {
                        *x += gv;
                    }
                }
                Op::Reshape(a) => {
                    for (x, y) in parents[a.0].grad.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                }
            }
        }
        Ok(())
    }
}
