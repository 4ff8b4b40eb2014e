//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every op evaluates eagerly and appends a node to the tape; `backward`
//! walks the tape in reverse. Sequences are stored row-stacked, so most
//! sequence-aware ops take a segment length describing how many consecutive
//! rows belong to one item.

use indexmap::IndexMap;

use super::params::ParamStore;
use super::tensor::{Mat, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, T, T),
    Im2Col { x: Var, seg: usize },
    SegmentSum { x: Var, seg: usize, scale: T },
    RepeatRows { x: Var, times: usize },
    AddTiled { x: Var, e: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SegmentSoftmax { seg: usize, x: Var },
    LogSoftmaxRows(Var),
    PickCols { x: Var, idx: Vec<usize> },
    SumAll(Var),
    RowSum(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, inv_std: Vec<T> },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

/// Per-batch statistics recorded by a training-mode batch-norm, to be folded
/// into the running averages by the caller.
#[derive(Clone, Debug)]
pub struct BnStat<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Mat<T>>>,
    params: IndexMap<String, Var>,
    bn_stats: Vec<BnStat<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: IndexMap::new(),
            bn_stats: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.len(), 1, "scalar() on {}x{}", m.rows, m.cols);
        m.data[0]
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated lookups share one node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))?;
        let (rows, cols) = match p.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        };
        let v = self.constant(Mat::from_vec(rows, cols, p.value.clone()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bn_stats(&self) -> &[BnStat<T>] {
        &self.bn_stats
    }

    pub fn grad(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Add the tape gradients of every bound parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (name, &v) in &self.params {
            if let (Some(g), Some(p)) = (self.grad(v), store.get_mut(name)) {
                for (a, &b) in p.grad.iter_mut().zip(&g.data) {
                    *a = *a + b;
                }
            }
        }
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Mat<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{what}: shape mismatch");
        Mat::from_vec(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "add", |p, q| p + q);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "sub", |p, q| p - q);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, "mul", |p, q| p * q);
        self.push(out, Op::Mul(a, b))
    }

    /// `x[M,C] + r[1,C]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let (xm, rm) = (self.value(x), self.value(r));
        assert_eq!((1, xm.cols), rm.shape(), "add_row: shape mismatch");
        let mut out = xm.clone();
        for row in out.data.chunks_mut(xm.cols) {
            for (o, &b) in row.iter_mut().zip(&rm.data) {
                *o = *o + b;
            }
        }
        self.push(out, Op::AddRow(x, r))
    }

    /// `x[M,C] * r[1,C]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let (xm, rm) = (self.value(x), self.value(r));
        assert_eq!((1, xm.cols), rm.shape(), "mul_row: shape mismatch");
        let mut out = xm.clone();
        for row in out.data.chunks_mut(xm.cols) {
            for (o, &b) in row.iter_mut().zip(&rm.data) {
                *o = *o * b;
            }
        }
        self.push(out, Op::MulRow(x, r))
    }

    /// `x[M,C] * s[M,1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let (xm, sm) = (self.value(x), self.value(s));
        assert_eq!((xm.rows, 1), sm.shape(), "mul_col: shape mismatch");
        let mut out = xm.clone();
        for (row, &w) in out.data.chunks_mut(xm.cols.max(1)).zip(&sm.data) {
            for o in row.iter_mut() {
                *o = *o * w;
            }
        }
        self.push(out, Op::MulCol(x, s))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    /// Unfold a kernel-3 "same" window: `[M,C] -> [M,3C]`, where column block
    /// `k` holds the row at offset `k-1`, zero outside each `seg`-row segment.
    pub fn im2col3(&mut self, x: Var, seg: usize) -> Var {
        let xm = self.value(x);
        assert!(seg > 0 && xm.rows.is_multiple_of(seg), "im2col3: rows {} not a multiple of {seg}", xm.rows);
        let c = xm.cols;
        let mut out = Mat::zeros(xm.rows, 3 * c);
        for r in 0..xm.rows {
            let t = r % seg;
            let dst = out.row_mut(r);
            if t > 0 {
                dst[..c].copy_from_slice(xm.row(r - 1));
            }
            dst[c..2 * c].copy_from_slice(xm.row(r));
            if t + 1 < seg {
                dst[2 * c..].copy_from_slice(xm.row(r + 1));
            }
        }
        self.push(out, Op::Im2Col { x, seg })
    }

    fn segment_reduce(&mut self, x: Var, seg: usize, scale: T) -> Var {
        let xm = self.value(x);
        assert!(seg > 0 && xm.rows.is_multiple_of(seg), "segment reduce: rows {} vs seg {seg}", xm.rows);
        let mut out = Mat::zeros(xm.rows / seg, xm.cols);
        for r in 0..xm.rows {
            let dst = out.row_mut(r / seg);
            for (o, &v) in dst.iter_mut().zip(xm.row(r)) {
                *o = *o + v;
            }
        }
        for v in out.data.iter_mut() {
            *v = *v * scale;
        }
        self.push(out, Op::SegmentSum { x, seg, scale })
    }

    /// Sum each run of `seg` consecutive rows: `[S·seg, C] -> [S, C]`.
    pub fn segment_sum(&mut self, x: Var, seg: usize) -> Var {
        self.segment_reduce(x, seg, T::one())
    }

    /// Mean of each run of `seg` consecutive rows.
    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Var {
        let s = T::one() / T::from_usize(seg).unwrap();
        self.segment_reduce(x, seg, s)
    }

    /// `[S, C] -> [S·times, C]`, each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xm = self.value(x);
        let mut data = Vec::with_capacity(xm.len() * times);
        for r in 0..xm.rows {
            for _ in 0..times {
                data.extend_from_slice(xm.row(r));
            }
        }
        let out = Mat::from_vec(xm.rows * times, xm.cols, data);
        self.push(out, Op::RepeatRows { x, times })
    }

    /// `x[M,C] + e[P,C]` with `e` tiled down the rows (row `r` gets `e[r % P]`).
    pub fn add_tiled(&mut self, x: Var, e: Var) -> Var {
        let (xm, em) = (self.value(x), self.value(e));
        assert_eq!(xm.cols, em.cols, "add_tiled: cols");
        assert!(em.rows > 0 && xm.rows % em.rows == 0, "add_tiled: rows");
        let mut out = xm.clone();
        for r in 0..xm.rows {
            let src = em.row(r % em.rows);
            for (o, &v) in out.row_mut(r).iter_mut().zip(src) {
                *o = *o + v;
            }
        }
        self.push(out, Op::AddTiled { x, e })
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xm = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * xm.cols);
        for &i in &idx {
            data.extend_from_slice(xm.row(i));
        }
        let out = Mat::from_vec(idx.len(), xm.cols, data);
        self.push(out, Op::GatherRows { x, idx })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows, rows, "concat_cols: rows");
            for r in 0..rows {
                out.row_mut(r)[off..off + pm.cols].copy_from_slice(pm.row(r));
            }
            off += pm.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xm = self.value(x);
        assert!(start <= end && end <= xm.cols, "slice_cols: range");
        let mut data = Vec::with_capacity(xm.rows * (end - start));
        for r in 0..xm.rows {
            data.extend_from_slice(&xm.row(r)[start..end]);
        }
        let out = Mat::from_vec(xm.rows, end - start, data);
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.cols, cols, "concat_rows: cols");
            data.extend_from_slice(&pm.data);
            rows += pm.rows;
        }
        let out = Mat::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Softmax of a column vector within each run of `seg` rows.
    pub fn segment_softmax(&mut self, x: Var, seg: usize) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.cols, 1, "segment_softmax: expects a column");
        assert!(seg > 0 && xm.rows.is_multiple_of(seg), "segment_softmax: rows");
        let mut out = xm.clone();
        for s in out.data.chunks_mut(seg) {
            softmax_in_place(s);
        }
        self.push(out, Op::SegmentSoftmax { seg, x })
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let mut out = xm.clone();
        for row in out.data.chunks_mut(xm.cols.max(1)) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(x))
    }

    /// `out[i] = x[i, idx[i]]` as an `[M,1]` column.
    pub fn pick_cols(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.rows, idx.len(), "pick_cols: one index per row");
        let data = idx.iter().enumerate().map(|(r, &c)| xm.at(r, c)).collect();
        let out = Mat::from_vec(xm.rows, 1, data);
        self.push(out, Op::PickCols { x, idx })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = compensated_sum(&self.value(x).data);
        self.push(Mat::scalar(s), Op::SumAll(x))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let data = (0..xm.rows).map(|r| xm.row(r).iter().copied().sum()).collect();
        let out = Mat::from_vec(xm.rows, 1, data);
        self.push(out, Op::RowSum(x))
    }

    /// Training-mode batch normalization over rows with per-column batch
    /// statistics. The statistics are recorded under `name`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T, name: &str) -> Var {
        let xm = self.value(x);
        let (m, c) = xm.shape();
        assert_eq!(self.shape(gamma), (1, c), "batch_norm: gamma");
        assert_eq!(self.shape(beta), (1, c), "batch_norm: beta");
        let mf = T::from_usize(m).unwrap();
        let mut mean = vec![T::zero(); c];
        for r in 0..m {
            for (acc, &v) in mean.iter_mut().zip(xm.row(r)) {
                *acc = *acc + v;
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / mf);
        let mut var = vec![T::zero(); c];
        for r in 0..m {
            for ((acc, &v), &mu) in var.iter_mut().zip(xm.row(r)).zip(&mean) {
                let d = v - mu;
                *acc = *acc + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / mf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Mat::zeros(m, c);
        for r in 0..m {
            for (j, (o, &v)) in xhat.row_mut(r).iter_mut().zip(xm.row(r)).enumerate() {
                *o = (v - mean[j]) * inv_std[j];
            }
        }
        let (gm, bm) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for row in out.data.chunks_mut(c) {
            for (j, o) in row.iter_mut().enumerate() {
                *o = *o * gm.data[j] + bm.data[j];
            }
        }
        self.bn_stats.push(BnStat {
            name: name.to_string(),
            mean,
            var,
        });
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    // ---- reverse pass ------------------------------------------------------

    /// Populate gradients of `loss` (a 1×1 node) w.r.t. every node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backprop_node(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                let (m, k, n) = (am.rows, am.cols, bm.cols);
                // dA = g · Bᵀ
                let mut da = Mat::zeros(m, k);
                T::gemm(
                    m, n, k, T::one(), &g.data, n as isize, 1, &bm.data, 1, n as isize,
                    T::zero(), &mut da.data, k as isize, 1,
                );
                // dB = Aᵀ · g
                let mut db = Mat::zeros(k, n);
                T::gemm(
                    k, m, n, T::one(), &am.data, 1, k as isize, &g.data, n as isize, 1,
                    T::zero(), &mut db.data, n as isize, 1,
                );
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                acc(grads, *a, zip(g, bm, |p, q| p * q));
                acc(grads, *b, zip(g, am, |p, q| p * q));
            }
            Op::AddRow(x, r) => {
                acc(grads, *x, g.clone());
                acc(grads, *r, col_sums(g));
            }
            Op::MulRow(x, r) => {
                let (xm, rm) = (val(*x), val(*r));
                let mut dx = g.clone();
                for row in dx.data.chunks_mut(g.cols) {
                    for (o, &w) in row.iter_mut().zip(&rm.data) {
                        *o = *o * w;
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *r, col_sums(&zip(g, xm, |p, q| p * q)));
            }
            Op::MulCol(x, s) => {
                let (xm, sm) = (val(*x), val(*s));
                let mut dx = g.clone();
                let mut ds = Mat::zeros(sm.rows, 1);
                for r in 0..g.rows {
                    let w = sm.data[r];
                    let mut tot = T::zero();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        tot = tot + *o * xm.at(r, c);
                        *o = *o * w;
                    }
                    ds.data[r] = tot;
                }
                acc(grads, *x, dx);
                acc(grads, *s, ds);
            }
            Op::Scale(x, c) => acc(grads, *x, g.map(|v| v * *c)),
            Op::AddScalar(x) => acc(grads, *x, g.clone()),
            Op::Relu(x) => {
                let xm = val(*x);
                acc(grads, *x, zip(g, xm, |p, q| if q > T::zero() { p } else { T::zero() }));
            }
            Op::Tanh(x) => acc(grads, *x, zip(g, y, |p, q| p * (T::one() - q * q))),
            Op::Sigmoid(x) => acc(grads, *x, zip(g, y, |p, q| p * q * (T::one() - q))),
            Op::Exp(x) => acc(grads, *x, zip(g, y, |p, q| p * q)),
            Op::Square(x) => {
                let two = T::one() + T::one();
                acc(grads, *x, zip(g, val(*x), |p, q| two * p * q));
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    grads,
                    *x,
                    zip(g, val(*x), |p, q| if q >= lo && q <= hi { p } else { T::zero() }),
                );
            }
            Op::Im2Col { x, seg } => {
                let xm = val(*x);
                let c = xm.cols;
                let mut dx = Mat::zeros(xm.rows, c);
                for r in 0..xm.rows {
                    let t = r % seg;
                    let src = g.row(r);
                    if t > 0 {
                        add_slice(dx.row_mut(r - 1), &src[..c]);
                    }
                    add_slice(dx.row_mut(r), &src[c..2 * c]);
                    if t + 1 < *seg {
                        add_slice(dx.row_mut(r + 1), &src[2 * c..]);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::SegmentSum { x, seg, scale } => {
                let xm = val(*x);
                let mut dx = Mat::zeros(xm.rows, xm.cols);
                for r in 0..xm.rows {
                    for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(r / seg)) {
                        *o = v * *scale;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::RepeatRows { x, times } => {
                let xm = val(*x);
                let mut dx = Mat::zeros(xm.rows, xm.cols);
                for r in 0..g.rows {
                    add_slice(dx.row_mut(r / times), g.row(r));
                }
                acc(grads, *x, dx);
            }
            Op::AddTiled { x, e } => {
                let em = val(*e);
                let mut de = Mat::zeros(em.rows, em.cols);
                for r in 0..g.rows {
                    add_slice(de.row_mut(r % em.rows), g.row(r));
                }
                acc(grads, *x, g.clone());
                acc(grads, *e, de);
            }
            Op::GatherRows { x, idx } => {
                let xm = val(*x);
                let mut dx = Mat::zeros(xm.rows, xm.cols);
                for (r, &i) in idx.iter().enumerate() {
                    add_slice(dx.row_mut(i), g.row(r));
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols;
                    let mut dp = Mat::zeros(g.rows, w);
                    for r in 0..g.rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(grads, p, dp);
                }
            }
            Op::SliceCols { x, start } => {
                let xm = val(*x);
                let mut dx = Mat::zeros(xm.rows, xm.cols);
                for r in 0..g.rows {
                    dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pm = val(p);
                    let n = pm.len();
                    acc(grads, p, Mat::from_vec(pm.rows, pm.cols, g.data[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::SegmentSoftmax { seg, x } => {
                let mut dx = Mat::zeros(y.rows, 1);
                for ((d, ys), gs) in dx
                    .data
                    .chunks_mut(*seg)
                    .zip(y.data.chunks(*seg))
                    .zip(g.data.chunks(*seg))
                {
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in d.iter_mut().zip(ys).zip(gs) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut dx = g.clone();
                for r in 0..g.rows {
                    let gsum: T = g.row(r).iter().copied().sum();
                    for (o, &lp) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o = *o - lp.exp() * gsum;
                    }
                }
                acc(grads, *x, dx);
            }
            Op::PickCols { x, idx } => {
                let xm = val(*x);
                let mut dx = Mat::zeros(xm.rows, xm.cols);
                for (r, &c) in idx.iter().enumerate() {
                    dx.data[r * xm.cols + c] = g.data[r];
                }
                acc(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let xm = val(*x);
                acc(grads, *x, Mat::filled(xm.rows, xm.cols, g.data[0]));
            }
            Op::RowSum(x) => {
                let xm = val(*x);
                let mut dx = Mat::zeros(xm.rows, xm.cols);
                for r in 0..xm.rows {
                    dx.row_mut(r).iter_mut().for_each(|o| *o = g.data[r]);
                }
                acc(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, c) = xhat.shape();
                let gm = val(*gamma);
                let mf = T::from_usize(m).unwrap();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..m {
                    for j in 0..c {
                        let gv = g.at(r, j);
                        dbeta[j] = dbeta[j] + gv;
                        dgamma[j] = dgamma[j] + gv * xhat.at(r, j);
                    }
                }
                // dxhat = g·γ; dx = inv_std/M · (M·dxhat − Σdxhat − x̂·Σ(dxhat·x̂))
                let mut dx = Mat::zeros(m, c);
                for r in 0..m {
                    for j in 0..c {
                        let dxh = g.at(r, j) * gm.data[j];
                        let sum_dxh = dbeta[j] * gm.data[j];
                        let sum_dxh_xh = dgamma[j] * gm.data[j];
                        dx.data[r * c + j] =
                            inv_std[j] / mf * (mf * dxh - sum_dxh - xhat.at(r, j) * sum_dxh_xh);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, Mat::from_vec(1, c, dgamma));
                acc(grads, *beta, Mat::from_vec(1, c, dbeta));
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip<T: Scalar>(a: &Mat<T>, b: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    Mat::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&p, &q)| f(p, q)).collect(),
    )
}

fn col_sums<T: Scalar>(g: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, g.cols);
    for r in 0..g.rows {
        add_slice(&mut out.data, g.row(r));
    }
    out
}

fn add_slice<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable in-place softmax.
/// Neumaier summation; keeps large reductions accurate enough for finite
/// differences.
fn compensated_sum<T: Scalar>(xs: &[T]) -> T {
    let mut sum = T::zero();
    let mut c = T::zero();
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c = c + ((sum - t) + x);
        } else {
            c = c + ((x - t) + sum);
        }
        sum = t;
    }
    sum + c
}

pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let mx = xs.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut tot = T::zero();
    for v in xs.iter_mut() {
        *v = (*v - mx).exp();
        tot = tot + *v;
    }
    for v in xs.iter_mut() {
        *v = *v / tot;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_gradient_matches_hand_derivation() {
        // y = W x (row form: y = x·W), loss = ½‖y‖² ⇒ ∂loss/∂W = xᵀ y.
        let mut g = Graph::<f64>::new();
        let x = g.constant(Mat::from_vec(1, 2, vec![1.0, -2.0]));
        let w = g.constant(Mat::from_vec(2, 2, vec![0.5, 1.0, -1.5, 2.0]));
        let y = g.matmul(x, w);
        let sq = g.square(y);
        let s = g.sum_all(sq);
        let loss = g.scale(s, 0.5);
        g.backward(loss);
        let yv = g.value(y).clone();
        assert_eq!(yv.data, vec![3.5, -3.0]);
        let dw = g.grad(w).unwrap();
        let expected = [1.0 * 3.5, 1.0 * -3.0, -2.0 * 3.5, -2.0 * -3.0];
        assert_eq!(dw.data, expected);
    }

    #[test]
    fn batch_norm_constant_input_is_zero_with_finite_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Mat::filled(5, 3, 2.5));
        let gamma = g.constant(Mat::from_vec(1, 3, vec![1.3, 0.7, 2.0]));
        let beta = g.constant(Mat::zeros(1, 3));
        let y = g.batch_norm_train(x, gamma, beta, 1e-5, "bn");
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
        let s = g.sum_all(y);
        g.backward(s);
        assert!(g.grad(gamma).unwrap().is_finite());
        assert!(g.grad(x).unwrap().is_finite());
    }

    #[test]
    fn segment_softmax_normalises_each_segment() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Mat::from_vec(4, 1, vec![0.0, 2f64.ln(), 1.0, 1.0]));
        let y = g.segment_softmax(x, 2);
        let v = &g.value(y).data;
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(v[2], 0.5);
        assert_eq!(v[3], 0.5);
    }

    #[test]
    fn im2col_respects_segment_boundaries() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Mat::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.im2col3(x, 2);
        assert_eq!(
            g.value(y).data,
            vec![0.0, 1.0, 2.0, 1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 3.0, 4.0, 0.0]
        );
    }
}
