//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive appends one
//! node holding its value and the indices of its inputs, so the node list is
//! already in topological order and [`Tape::backward`] is a single reverse
//! sweep.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row index list shared between the forward record and the backward pass.
pub type Index = Arc<[usize]>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sqrt(Var),
    Log(Var),
    Recip(Var),
    XLogX(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Index),
    SegmentSum(Var, Index),
    SegmentMax(Var, Vec<usize>),
    SegmentProd(Var, Index),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    Dropout(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
    visited: usize,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Number of recorded operations the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: gradients are collected for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [m, k] = ta.shape();
        let [k2, n] = tb.shape();
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a[r, c] + b[1, c]`, the bias row broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        let c = ta.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    /// `a[r, c]` with row `i` scaled by `w[i, 0]`.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.cols() != 1 || tw.rows() != ta.rows() {
            return Err(Error::shape("mul_col", format!("{:?} * {:?}", ta.shape(), tw.shape())));
        }
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            let s = tw.data()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(out, Op::MulCol(a, w), rg))
    }

    /// `a[r, c] / d[r, 0]`.
    pub fn div_col(&mut self, a: Var, d: Var) -> Result<Var> {
        let (ta, td) = (self.value(a), self.value(d));
        if td.cols() != 1 || td.rows() != ta.rows() {
            return Err(Error::shape("div_col", format!("{:?} / {:?}", ta.shape(), td.shape())));
        }
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            let s = td.data()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(a) || self.rg(d);
        Ok(self.push(out, Op::DivCol(a, d), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(t, Op::Sqrt(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 1.0 / x);
        let rg = self.rg(a);
        self.push(t, Op::Recip(a), rg)
    }

    /// `x ln x` with `0 ln 0 = 0`. The derivative `ln x + 1` is taken as 0 at `x = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let t = self.value(a).map(xlogx);
        let rg = self.rg(a);
        self.push(t, Op::XLogX(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        let c = ta.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise log-softmax, computed without forming the softmax first.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        let c = ta.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                for x in row.iter_mut() {
                    *x -= lse;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!(
                        "row counts differ: {:?}",
                        parts.iter().map(|p| self.value(*p).shape()).collect::<Vec<_>>()
                    ),
                ));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(rows, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts differ: {:?} vs {cols}", t.shape()),
                ));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(rows, cols, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + width > ta.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + width, ta.shape()),
            ));
        }
        let mut out = Vec::with_capacity(ta.rows() * width);
        for r in 0..ta.rows() {
            out.extend_from_slice(&ta.row(r)[start..start + width]);
        }
        let t = Tensor::new(ta.rows(), width, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceCols(a, start), rg))
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &Index) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= ta.rows() {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {i} out of range for {:?}", ta.shape()),
                ));
            }
            out.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(idx.len(), c, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::GatherRows(a, idx.clone()), rg))
    }

    fn check_segments(&self, op: &'static str, a: Var, seg: &[usize], n: usize) -> Result<()> {
        let ta = self.value(a);
        if seg.len() != ta.rows() {
            return Err(Error::shape(
                op,
                format!("{} segment ids for {:?}", seg.len(), ta.shape()),
            ));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n) {
            return Err(Error::shape(op, format!("segment id {bad} >= {n}")));
        }
        Ok(())
    }

    /// Sums rows of `a` sharing a segment id into `n` output rows.
    pub fn segment_sum(&mut self, a: Var, seg: &Index, n: usize) -> Result<Var> {
        self.check_segments("segment_sum", a, seg, n)?;
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Tensor::zeros(n, c);
        for (r, &s) in seg.iter().enumerate() {
            for (o, x) in out.row_mut(s).iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentSum(a, seg.clone()), rg))
    }

    /// Component-wise maximum per segment. Ties route the gradient to the
    /// first row; empty segments yield 0.
    pub fn segment_max(&mut self, a: Var, seg: &Index, n: usize) -> Result<Var> {
        self.check_segments("segment_max", a, seg, n)?;
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Tensor::full(n, c, f64::NEG_INFINITY);
        let mut arg = vec![usize::MAX; n * c];
        for (r, &s) in seg.iter().enumerate() {
            for (j, &x) in ta.row(r).iter().enumerate() {
                let k = s * c + j;
                if x > out.data()[k] {
                    out.data_mut()[k] = x;
                    arg[k] = r;
                }
            }
        }
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            if arg[k] == usize::MAX {
                *v = 0.0;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentMax(a, arg), rg))
    }

    /// Component-wise product per segment; empty segments yield 1.
    pub fn segment_prod(&mut self, a: Var, seg: &Index, n: usize) -> Result<Var> {
        self.check_segments("segment_prod", a, seg, n)?;
        let ta = self.value(a);
        let mut out = Tensor::full(n, ta.cols(), 1.0);
        for (r, &s) in seg.iter().enumerate() {
            for (o, x) in out.row_mut(s).iter_mut().zip(ta.row(r)) {
                *o *= x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentProd(a, seg.clone()), rg))
    }

    /// `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(1, ta.cols());
        for r in 0..ta.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    /// `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::column((0..ta.rows()).map(|r| ta.row(r).iter().sum()).collect());
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Inverted dropout: each entry is kept with probability `1 - p` and
    /// scaled by `1 / (1 - p)`. The mask is drawn from a generator seeded
    /// with `seed`, so a given seed always drops the same entries.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let ta = self.value(a);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Dropout(a, mask), rg))
    }

    /// Reverse sweep from a `[1, 1]` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarRoot(shape));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut visited = 0;
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            visited += 1;
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            visited,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Tensor)| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| {
                let [r, c] = self.nodes[v.0].value.shape();
                Tensor::zeros(r, c)
            });
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [m, k] = ta.shape();
                let n = tb.cols();
                // dA += dC · Bᵀ
                acc(*a, &mut |s| {
                    gemm_strided(g.data(), (n, 1), tb.data(), (1, n), s.data_mut(), m, n, k, 1.0)
                });
                // dB += Aᵀ · dC
                acc(*b, &mut |s| {
                    gemm_strided(ta.data(), (1, k), g.data(), (n, 1), s.data_mut(), k, m, n, 1.0)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.add_assign(g));
                acc(*b, &mut |s| s.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.add_assign(g));
                acc(*b, &mut |s| {
                    s.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    for ((x, y), z) in s.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *x += y * z;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, y), z) in s.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *x += y * z;
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |s| s.add_assign(g));
                acc(*b, &mut |s| {
                    for r in 0..g.rows() {
                        for (x, y) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::MulCol(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                acc(*a, &mut |s| {
                    for r in 0..g.rows() {
                        let k = tw.data()[r];
                        for (x, y) in s.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += y * k;
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(ta.row(r)).map(|(y, x)| y * x).sum();
                        s.data_mut()[r] += dot;
                    }
                });
            }
            Op::DivCol(a, d) => {
                let td = self.value(*d);
                acc(*a, &mut |s| {
                    for r in 0..g.rows() {
                        let k = td.data()[r];
                        for (x, y) in s.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += y / k;
                        }
                    }
                });
                acc(*d, &mut |s| {
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(out.row(r)).map(|(y, o)| y * o).sum();
                        s.data_mut()[r] -= dot / td.data()[r];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                s.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y * k)
            }),
            Op::AddScalar(a) => acc(*a, &mut |s| s.add_assign(g)),
            Op::Relu(a) => {
                let ta = self.value(*a);
                acc(*a, &mut |s| {
                    for ((x, y), v) in s.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Sqrt(a) => acc(*a, &mut |s| {
                for ((x, y), o) in s.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *x += y * 0.5 / o;
                }
            }),
            Op::Log(a) => {
                let ta = self.value(*a);
                acc(*a, &mut |s| {
                    for ((x, y), v) in s.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *x += y / v;
                    }
                });
            }
            Op::Recip(a) => acc(*a, &mut |s| {
                for ((x, y), o) in s.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *x -= y * o * o;
                }
            }),
            Op::XLogX(a) => {
                let ta = self.value(*a);
                acc(*a, &mut |s| {
                    for ((x, y), v) in s.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += y * (v.ln() + 1.0);
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => acc(*a, &mut |s| {
                for r in 0..out.rows() {
                    let (p, gr) = (out.row(r), g.row(r));
                    let dot: f64 = p.iter().zip(gr).map(|(pi, gi)| pi * gi).sum();
                    for ((x, pi), gi) in s.row_mut(r).iter_mut().zip(p).zip(gr) {
                        *x += pi * (gi - dot);
                    }
                }
            }),
            Op::LogSoftmaxRows(a) => acc(*a, &mut |s| {
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((x, yi), gi) in s.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *x += gi - yi.exp() * total;
                    }
                }
            }),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &mut |s| {
                        for r in 0..g.rows() {
                            for (x, y) in s.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *x += y;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(*p, &mut |s| {
                        for (x, y) in s.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *x += y;
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let w = out.cols();
                acc(*a, &mut |s| {
                    for r in 0..g.rows() {
                        for (x, y) in s.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => acc(*a, &mut |s| {
                for (r, &src) in idx.iter().enumerate() {
                    for (x, y) in s.row_mut(src).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }),
            Op::SegmentSum(a, seg) => acc(*a, &mut |s| {
                for (r, &sid) in seg.iter().enumerate() {
                    for (x, y) in s.row_mut(r).iter_mut().zip(g.row(sid)) {
                        *x += y;
                    }
                }
            }),
            Op::SegmentMax(a, arg) => {
                let c = out.cols();
                acc(*a, &mut |s| {
                    for (k, &src) in arg.iter().enumerate() {
                        if src != usize::MAX {
                            let j = k % c;
                            s.data_mut()[src * c + j] += g.data()[k];
                        }
                    }
                });
            }
            Op::SegmentProd(a, seg) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut members: Vec<Vec<usize>> = vec![Vec::new(); out.rows()];
                for (r, &sid) in seg.iter().enumerate() {
                    members[sid].push(r);
                }
                acc(*a, &mut |s| {
                    for (sid, rows) in members.iter().enumerate() {
                        for &r in rows {
                            for j in 0..c {
                                let others: f64 = rows.iter().filter(|&&q| q != r).map(|&q| ta.get(q, j)).product();
                                s.data_mut()[r * c + j] += g.get(sid, j) * others;
                            }
                        }
                    }
                });
            }
            Op::SumRows(a) => acc(*a, &mut |s| {
                for r in 0..s.rows() {
                    for (x, y) in s.row_mut(r).iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }),
            Op::SumCols(a) => acc(*a, &mut |s| {
                for r in 0..s.rows() {
                    let y = g.data()[r];
                    s.row_mut(r).iter_mut().for_each(|x| *x += y);
                }
            }),
            Op::SumAll(a) => {
                let y = g.item();
                acc(*a, &mut |s| s.data_mut().iter_mut().for_each(|x| *x += y));
            }
            Op::Dropout(a, mask) => acc(*a, &mut |s| {
                for ((x, y), m) in s.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *x += y * m;
                }
            }),
        }
    }
}

pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
