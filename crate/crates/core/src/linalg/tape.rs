//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; each
//! [`Var`] is a handle into that list. Calling [`Var::backward`] on a 1x1
//! loss node replays the list in reverse and returns per-parameter
//! gradients keyed by the names given at registration.
//!
//! Nodes hold whole matrices rather than scalars, so a training step costs
//! a few dozen node visits instead of millions.

use std::collections::BTreeMap;
use std::rc::Rc;

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    /// Multiply every entry of the first node by the 1x1 second node.
    ScaleBy(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sigmoid(usize),
    Relu(usize),
    Sqrt(usize),
    /// Elementwise `x ln x` with the continuous extension `0 ln 0 := 0`.
    XLnX(usize),
    Sum(usize),
    MeanRows(usize),
    BroadcastAddRow { base: usize, row: usize },
    ConcatRows(usize, usize),
    SliceRows { input: usize, start: usize, len: usize },
    Pick { input: usize, row: usize, col: usize },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
    params: Vec<(usize, String)>,
}

/// Recording context for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes; useful for asserting reuse vs. regrowth.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a constant. Constants receive no gradient entry.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a named trainable parameter. Names must be unique per tape.
    pub fn param(&self, name: &str, value: Matrix) -> Result<Var> {
        {
            let inner = self.inner.borrow();
            if inner.params.iter().any(|(_, n)| n == name) {
                return Err(Error::ShapeMismatch(format!(
                    "parameter '{name}' registered twice on one tape"
                )));
            }
        }
        let var = self.push(value, Op::Leaf);
        self.inner.borrow_mut().params.push((var.index, name.to_string()));
        Ok(var)
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        let (rows, cols) = value.shape();
        inner.nodes.push(Node { value, op });
        Var {
            tape: self.clone(),
            index,
            rows,
            cols,
        }
    }

    fn value_of(&self, index: usize) -> Matrix {
        self.inner.borrow().nodes[index].value.clone()
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Debug, Clone)]
pub struct Var {
    tape: Tape,
    index: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn value(&self) -> Matrix {
        self.tape.value_of(self.index)
    }

    /// Reads a 1x1 node as a scalar.
    pub fn scalar(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::dims("Var::scalar", "1x1", format!("{}x{}", self.rows, self.cols)));
        }
        Ok(self.value().get(0, 0))
    }

    fn same_tape(&self, other: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::DetachedNode)
        }
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let value = self.value().matmul(&other.value())?;
        Ok(self.tape.push(value, Op::Matmul(self.index, other.index)))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let value = self.value().add(&other.value())?;
        Ok(self.tape.push(value, Op::Add(self.index, other.index)))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let value = self.value().sub(&other.value())?;
        Ok(self.tape.push(value, Op::Sub(self.index, other.index)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let value = self.value().hadamard(&other.value())?;
        Ok(self.tape.push(value, Op::Mul(self.index, other.index)))
    }

    /// Elementwise quotient.
    pub fn div(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(Error::dims(
                "div",
                format!("{}x{}", a.rows(), a.cols()),
                format!("{}x{}", b.rows(), b.cols()),
            ));
        }
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("div"));
        }
        let value = Matrix::new(a.rows(), a.cols(), data)?;
        Ok(self.tape.push(value, Op::Div(self.index, other.index)))
    }

    pub fn scale(&self, c: f64) -> Var {
        self.tape.push(self.value().scale(c), Op::Scale(self.index, c))
    }

    /// Multiplies by a 1x1 node, keeping the scalar on the tape.
    pub fn scale_by(&self, s: &Var) -> Result<Var> {
        self.same_tape(s)?;
        if s.shape() != (1, 1) {
            return Err(Error::dims("scale_by", "1x1 scalar", format!("{}x{}", s.rows, s.cols)));
        }
        let value = self.value().scale(s.value().get(0, 0));
        Ok(self.tape.push(value, Op::ScaleBy(self.index, s.index)))
    }

    pub fn transpose(&self) -> Var {
        self.tape.push(self.value().transpose(), Op::Transpose(self.index))
    }

    pub fn softmax_rows(&self) -> Result<Var> {
        let value = self.value().softmax_rows()?;
        Ok(self.tape.push(value, Op::SoftmaxRows(self.index)))
    }

    /// Row-wise `x - logsumexp(x)`; stable counterpart of `softmax().ln()`.
    pub fn log_softmax_rows(&self) -> Result<Var> {
        let x = self.value();
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..x.cols() {
                out.set(i, j, x.get(i, j) - lse);
            }
        }
        Ok(self.tape.push(out, Op::LogSoftmaxRows(self.index)))
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(crate::linalg::sigmoid_scalar);
        self.tape.push(value, Op::Sigmoid(self.index))
    }

    pub fn relu(&self) -> Var {
        let value = self.value().map(|v| v.max(0.0));
        self.tape.push(value, Op::Relu(self.index))
    }

    pub fn sqrt(&self) -> Result<Var> {
        let x = self.value();
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("sqrt of negative entry"));
        }
        Ok(self.tape.push(x.map(f64::sqrt), Op::Sqrt(self.index)))
    }

    /// Elementwise `x ln x`, with `0 ln 0 := 0`. Negative entries error.
    pub fn xlnx(&self) -> Result<Var> {
        let x = self.value();
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("xlnx of negative entry"));
        }
        let value = x.map(|v| if v == 0.0 { 0.0 } else { v * v.ln() });
        Ok(self.tape.push(value, Op::XLnX(self.index)))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&self) -> Var {
        let value = Matrix::new(1, 1, vec![self.value().sum()]).expect("finite sum of finite matrix");
        self.tape.push(value, Op::Sum(self.index))
    }

    /// Per-column mean as a 1 x cols node.
    pub fn mean_rows(&self) -> Result<Var> {
        if self.rows == 0 {
            return Err(Error::ShapeMismatch("mean_rows of empty matrix".into()));
        }
        let value = self.value().mean_rows();
        Ok(self.tape.push(value, Op::MeanRows(self.index)))
    }

    /// Adds a 1 x cols node to every row.
    pub fn broadcast_add_row(&self, row: &Var) -> Result<Var> {
        self.same_tape(row)?;
        let value = self.value().broadcast_add_row(&row.value())?;
        Ok(self.tape.push(value, Op::BroadcastAddRow { base: self.index, row: row.index }))
    }

    pub fn concat_rows(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let value = self.value().concat_rows(&other.value())?;
        Ok(self.tape.push(value, Op::ConcatRows(self.index, other.index)))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        if start + len > self.rows {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                size: self.rows,
            });
        }
        let src = self.value();
        let mut rows = Vec::with_capacity(len);
        for i in start..start + len {
            rows.push(src.row(i).to_vec());
        }
        let value = Matrix::from_rows(&rows)?;
        Ok(self
            .tape
            .push(value, Op::SliceRows { input: self.index, start, len }))
    }

    /// Extracts one entry as a 1x1 node.
    pub fn pick(&self, row: usize, col: usize) -> Result<Var> {
        if row >= self.rows {
            return Err(Error::IndexOutOfRange { index: row, size: self.rows });
        }
        if col >= self.cols {
            return Err(Error::IndexOutOfRange { index: col, size: self.cols });
        }
        let value = Matrix::new(1, 1, vec![self.value().get(row, col)])?;
        Ok(self.tape.push(value, Op::Pick { input: self.index, row, col }))
    }

    /// Sum of squared entries as a 1x1 node.
    pub fn frobenius_sq(&self) -> Result<Var> {
        Ok(self.mul(self)?.sum())
    }

    /// Runs reverse accumulation from this 1x1 node and returns gradients
    /// for every registered parameter. Parameters the loss never touched
    /// get exact zero matrices.
    pub fn backward(&self) -> Result<Gradients> {
        if self.shape() != (1, 1) {
            return Err(Error::dims(
                "backward",
                "1x1 loss",
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        let inner = self.tape.inner.borrow();
        let nodes = &inner.nodes;
        if !nodes[self.index].value.get(0, 0).is_finite() {
            return Err(Error::NonFinite("backward seed"));
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[self.index] = Some(Matrix::new(1, 1, vec![1.0])?);

        for idx in (0..=self.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // Re-park the gradient so parameters can collect it below.
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    accumulate(&mut grads[*a], g.matmul(&bv.transpose())?)?;
                    accumulate(&mut grads[*b], av.transpose().matmul(&g)?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone())?;
                    accumulate(&mut grads[*b], g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], g.clone())?;
                    accumulate(&mut grads[*b], g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    accumulate(&mut grads[*a], g.hadamard(bv)?)?;
                    accumulate(&mut grads[*b], g.hadamard(av)?)?;
                }
                Op::Div(a, b) => {
                    let bv = &nodes[*b].value;
                    let y = &node.value;
                    // d(a/b): dA = g/b, dB = -g*y/b.
                    let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) / bv.get(i, j));
                    let db = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        -g.get(i, j) * y.get(i, j) / bv.get(i, j)
                    });
                    accumulate(&mut grads[*a], da)?;
                    accumulate(&mut grads[*b], db)?;
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[*a], g.scale(*c))?;
                }
                Op::ScaleBy(a, s) => {
                    let av = &nodes[*a].value;
                    let sv = nodes[*s].value.get(0, 0);
                    accumulate(&mut grads[*a], g.scale(sv))?;
                    let ds = g.hadamard(av)?.sum();
                    accumulate(&mut grads[*s], Matrix::new(1, 1, vec![ds])?)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[*a], g.transpose())?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = (0..y.cols()).map(|j| g.get(i, j) * y.get(i, j)).sum();
                        for j in 0..y.cols() {
                            da.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads[*a], da)?;
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let gsum: f64 = (0..y.cols()).map(|j| g.get(i, j)).sum();
                        for j in 0..y.cols() {
                            da.set(i, j, g.get(i, j) - y.get(i, j).exp() * gsum);
                        }
                    }
                    accumulate(&mut grads[*a], da)?;
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = Matrix::from_fn(y.rows(), y.cols(), |i, j| {
                        let s = y.get(i, j);
                        g.get(i, j) * s * (1.0 - s)
                    });
                    accumulate(&mut grads[*a], da)?;
                }
                Op::Relu(a) => {
                    let xv = &nodes[*a].value;
                    // Subgradient 0 at the kink.
                    let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        if xv.get(i, j) > 0.0 { g.get(i, j) } else { 0.0 }
                    });
                    accumulate(&mut grads[*a], da)?;
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    let da = Matrix::from_fn(y.rows(), y.cols(), |i, j| {
                        let s = y.get(i, j);
                        if s == 0.0 { 0.0 } else { g.get(i, j) / (2.0 * s) }
                    });
                    accumulate(&mut grads[*a], da)?;
                }
                Op::XLnX(a) => {
                    let xv = &nodes[*a].value;
                    // d(x ln x) = ln x + 1, pinned to 0 at x = 0.
                    let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let x = xv.get(i, j);
                        if x == 0.0 { 0.0 } else { g.get(i, j) * (x.ln() + 1.0) }
                    });
                    accumulate(&mut grads[*a], da)?;
                }
                Op::Sum(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    let seed = g.get(0, 0);
                    accumulate(&mut grads[*a], Matrix::from_fn(r, c, |_, _| seed))?;
                }
                Op::MeanRows(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    let inv = 1.0 / r as f64;
                    let da = Matrix::from_fn(r, c, |_, j| g.get(0, j) * inv);
                    accumulate(&mut grads[*a], da)?;
                }
                Op::BroadcastAddRow { base, row } => {
                    accumulate(&mut grads[*base], g.clone())?;
                    let mut drow = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            drow.set(0, j, drow.get(0, j) + g.get(i, j));
                        }
                    }
                    accumulate(&mut grads[*row], drow)?;
                }
                Op::ConcatRows(a, b) => {
                    let top = nodes[*a].value.rows();
                    let bottom = nodes[*b].value.rows();
                    let mut da = Matrix::zeros(top, g.cols());
                    let mut db = Matrix::zeros(bottom, g.cols());
                    for i in 0..top {
                        for j in 0..g.cols() {
                            da.set(i, j, g.get(i, j));
                        }
                    }
                    for i in 0..bottom {
                        for j in 0..g.cols() {
                            db.set(i, j, g.get(top + i, j));
                        }
                    }
                    accumulate(&mut grads[*a], da)?;
                    accumulate(&mut grads[*b], db)?;
                }
                Op::SliceRows { input, start, len } => {
                    let (r, c) = nodes[*input].value.shape();
                    let mut da = Matrix::zeros(r, c);
                    for i in 0..*len {
                        for j in 0..c {
                            da.set(start + i, j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads[*input], da)?;
                }
                Op::Pick { input, row, col } => {
                    let (r, c) = nodes[*input].value.shape();
                    let mut da = Matrix::zeros(r, c);
                    da.set(*row, *col, g.get(0, 0));
                    accumulate(&mut grads[*input], da)?;
                }
            }
        }

        let mut map = BTreeMap::new();
        for (idx, name) in &inner.params {
            let shape = nodes[*idx].value.shape();
            let grad = grads[*idx]
                .take()
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            if grad.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward produced non-finite gradient"));
            }
            map.insert(name.clone(), grad);
        }
        Ok(Gradients { map })
    }
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) -> Result<()> {
    *slot = Some(match slot.take() {
        None => delta,
        Some(acc) => acc.add(&delta)?,
    });
    Ok(())
}

/// Per-parameter gradients from one backward pass.
///
/// Sorted storage keeps every reduction over the entries (notably the
/// global norm) in a fixed order, so results are bit-reproducible
/// across processes.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Euclidean norm over the concatenation of every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(Matrix::frobenius_sq)
            .sum::<f64>()
            .sqrt()
    }

    /// In-place uniform rescaling; used by gradient clipping.
    pub fn scale_all(&mut self, c: f64) {
        for m in self.map.values_mut() {
            *m = m.scale(c);
        }
    }

    /// Merges `other` into `self`, adding gradients for shared names.
    pub fn merge_add(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(mine) => *mine = mine.add(g)?,
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }
}

/// Central-difference gradient of a scalar function of one matrix.
///
/// Evaluates `f` twice per entry with a symmetric step, so the truncation
/// error is O(eps^2).
pub fn finite_difference<F>(f: &mut F, at: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let mut plus = at.clone();
            plus.set(i, j, at.get(i, j) + eps);
            let mut minus = at.clone();
            minus.set(i, j, at.get(i, j) - eps);
            let fp = f(&plus)?;
            let fm = f(&minus)?;
            grad.set(i, j, (fp - fm) / (2.0 * eps));
        }
    }
    Ok(grad)
}

/// One entry where analytic and numeric gradients disagree.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradMismatch {
    pub fn abs_err(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

/// Compares gradients entrywise. An entry passes when the absolute error
/// is within `abs_tol` or within `rel_tol` of the larger magnitude.
/// Returns the worst offending entry, if any.
pub fn compare_grads(
    analytic: &Matrix,
    numeric: &Matrix,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<Option<GradMismatch>> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::dims(
            "compare_grads",
            format!("{}x{}", analytic.rows(), analytic.cols()),
            format!("{}x{}", numeric.rows(), numeric.cols()),
        ));
    }
    let mut worst: Option<GradMismatch> = None;
    for i in 0..analytic.rows() {
        for j in 0..analytic.cols() {
            let a = analytic.get(i, j);
            let n = numeric.get(i, j);
            let err = (a - n).abs();
            let allowed = abs_tol.max(rel_tol * a.abs().max(n.abs()));
            if err > allowed {
                let candidate = GradMismatch { row: i, col: j, analytic: a, numeric: n };
                if worst.as_ref().is_none_or(|w| candidate.abs_err() > w.abs_err()) {
                    worst = Some(candidate);
                }
            }
        }
    }
    Ok(worst)
}
