//! Reverse-mode automatic differentiation over small dense row-batched
//! matrices.
//!
//! Every node of the [`Tape`] holds a `rows × cols` value where rows index
//! independent samples of a batch. Nodes are appended in evaluation order,
//! so the tape is topologically sorted by construction and a single reverse
//! sweep computes all adjoints.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot((usize, usize)),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match {rows}x{cols}");
        Mat { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x Wᵀ + b` with `W: out×in`, `b: 1×out`.
    Linear { x: Var, w: Var, b: Var },
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `Σ cₖ aₖ` plus a constant folded into the value.
    Combine(Vec<(Var, f64)>),
    /// Prepends a constant first column.
    PrependColumn(Var),
    RowSquaredNorm(Var),
    /// Row-wise dot product with a constant matrix.
    RowDot(Var, Mat),
    /// Row-wise map `y_r = f(x_r)` with per-row Jacobians (`out × in`,
    /// concatenated across rows).
    RowMap { x: Var, jacobians: Vec<f64> },
    /// `scale · Σ x²` over all entries.
    ScaledSumSquares { x: Var, scale: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

/// Append-only computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Mat, b: &Mat) -> Result<(), TapeError> {
    if a.shape() != b.shape() {
        return Err(TapeError::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TapeError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols != wv.cols {
            return Err(TapeError::Shape {
                op: "linear",
                left: xv.shape(),
                right: wv.shape(),
            });
        }
        if bv.shape() != (1, wv.rows) {
            return Err(TapeError::Shape {
                op: "linear bias",
                left: wv.shape(),
                right: bv.shape(),
            });
        }
        let (rows, inp, out) = (xv.rows, xv.cols, wv.rows);
        let mut y = Mat::zeros(rows, out);
        for r in 0..rows {
            let xr = &xv.data[r * inp..(r + 1) * inp];
            let yr = &mut y.data[r * out..(r + 1) * out];
            for (o, yo) in yr.iter_mut().enumerate() {
                let wo = &wv.data[o * inp..(o + 1) * inp];
                let mut acc = bv.data[o];
                for (a, b) in xr.iter().zip(wo) {
                    acc += a * b;
                }
                *yo = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b }, y, needs))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = Mat::from_vec(xv.rows, xv.cols, xv.data.iter().map(|v| v.tanh()).collect());
        let needs = self.needs(x);
        self.push(Op::Tanh(x), y, needs)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
        let y = Mat::from_vec(av.rows, av.cols, data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, y, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `Σ cₖ aₖ + offset`, where `offset` (same shape) is treated as a constant.
    pub fn combine(&mut self, terms: &[(Var, f64)], offset: Option<&Mat>) -> Result<Var, TapeError> {
        let first = self.value(terms.first().expect("combine needs at least one term").0);
        let mut y = match offset {
            Some(o) => {
                same_shape("combine", first, o)?;
                o.clone()
            }
            None => Mat::zeros(first.rows, first.cols),
        };
        let mut needs = false;
        for &(v, c) in terms {
            let vv = self.value(v);
            same_shape("combine", &y, vv)?;
            for (yi, xi) in y.data.iter_mut().zip(&vv.data) {
                *yi += c * xi;
            }
            needs |= self.needs(v);
        }
        Ok(self.push(Op::Combine(terms.to_vec()), y, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.combine(&[(a, c)], None).expect("single-term combine")
    }

    pub fn prepend_column(&mut self, x: Var, value: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut y = Mat::zeros(rows, cols + 1);
        for r in 0..rows {
            let yr = y.row_mut(r);
            yr[0] = value;
            yr[1..].copy_from_slice(xv.row(r));
        }
        let needs = self.needs(x);
        self.push(Op::PrependColumn(x), y, needs)
    }

    pub fn row_squared_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows).map(|r| xv.row(r).iter().map(|v| v * v).sum()).collect();
        let y = Mat::from_vec(xv.rows, 1, data);
        let needs = self.needs(x);
        self.push(Op::RowSquaredNorm(x), y, needs)
    }

    pub fn row_dot(&mut self, x: Var, c: Mat) -> Result<Var, TapeError> {
        let xv = self.value(x);
        same_shape("row_dot", xv, &c)?;
        let data = (0..xv.rows)
            .map(|r| xv.row(r).iter().zip(c.row(r)).map(|(a, b)| a * b).sum())
            .collect();
        let y = Mat::from_vec(xv.rows, 1, data);
        let needs = self.needs(x);
        Ok(self.push(Op::RowDot(x, c), y, needs))
    }

    /// Records a row-wise function whose values and Jacobians were computed
    /// outside the tape. `jacobians` holds one row-major `out × in` block per row.
    pub fn row_map(&mut self, x: Var, value: Mat, jacobians: Vec<f64>) -> Result<Var, TapeError> {
        let xv = self.value(x);
        if xv.rows != value.rows || jacobians.len() != xv.rows * xv.cols * value.cols {
            return Err(TapeError::Shape {
                op: "row_map",
                left: xv.shape(),
                right: value.shape(),
            });
        }
        let needs = self.needs(x);
        Ok(self.push(Op::RowMap { x, jacobians }, value, needs))
    }

    pub fn scaled_sum_squares(&mut self, x: Var, scale: f64) -> Var {
        let s: f64 = self.value(x).data.iter().map(|v| v * v).sum();
        let needs = self.needs(x);
        self.push(Op::ScaledSumSquares { x, scale }, Mat::scalar(scale * s), needs)
    }

    /// Reverse sweep from a scalar root. Each node up to `root` is visited once.
    pub fn backward(&self, root: Var) -> Result<Gradients, TapeError> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(TapeError::NonScalarRoot(rv.shape()));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Mat::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Mat>], v: Var) -> Option<&'g mut Mat> {
        if !self.needs(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Mat::zeros(r, c));
        }
        slot.as_mut()
    }

    fn propagate(&self, op: &Op, y: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, inp, out) = (xv.rows, xv.cols, wv.rows);
                if let Some(dx) = self.accumulate(grads, *x) {
                    for r in 0..rows {
                        let gr = &g.data[r * out..(r + 1) * out];
                        let dxr = &mut dx.data[r * inp..(r + 1) * inp];
                        for (o, go) in gr.iter().enumerate() {
                            let wo = &wv.data[o * inp..(o + 1) * inp];
                            for (d, w) in dxr.iter_mut().zip(wo) {
                                *d += go * w;
                            }
                        }
                    }
                }
                if let Some(dw) = self.accumulate(grads, *w) {
                    for r in 0..rows {
                        let gr = &g.data[r * out..(r + 1) * out];
                        let xr = &xv.data[r * inp..(r + 1) * inp];
                        for (o, go) in gr.iter().enumerate() {
                            let dwo = &mut dw.data[o * inp..(o + 1) * inp];
                            for (d, xi) in dwo.iter_mut().zip(xr) {
                                *d += go * xi;
                            }
                        }
                    }
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    for r in 0..rows {
                        for (d, go) in db.data.iter_mut().zip(&g.data[r * out..(r + 1) * out]) {
                            *d += go;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    for ((d, gi), yi) in dx.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = self.accumulate(grads, *a) {
                    da.data.iter_mut().zip(&g.data).for_each(|(d, gi)| *d += gi);
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    db.data.iter_mut().zip(&g.data).for_each(|(d, gi)| *d += sign * gi);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.accumulate(grads, *a) {
                    for ((d, gi), bi) in da.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    for ((d, gi), ai) in db.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    if let Some(dv) = self.accumulate(grads, v) {
                        dv.data.iter_mut().zip(&g.data).for_each(|(d, gi)| *d += c * gi);
                    }
                }
            }
            Op::PrependColumn(x) => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    let cols = dx.cols;
                    for r in 0..dx.rows {
                        let gr = &g.data[r * (cols + 1) + 1..(r + 1) * (cols + 1)];
                        dx.row_mut(r).iter_mut().zip(gr).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::RowSquaredNorm(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.accumulate(grads, *x) {
                    for r in 0..dx.rows {
                        let gr = g.data[r];
                        for (d, xi) in dx.row_mut(r).iter_mut().zip(xv.row(r)) {
                            *d += 2.0 * xi * gr;
                        }
                    }
                }
            }
            Op::RowDot(x, c) => {
                if let Some(dx) = self.accumulate(grads, *x) {
                    for r in 0..dx.rows {
                        let gr = g.data[r];
                        for (d, ci) in dx.row_mut(r).iter_mut().zip(c.row(r)) {
                            *d += ci * gr;
                        }
                    }
                }
            }
            Op::RowMap { x, jacobians } => {
                let out = y.cols;
                if let Some(dx) = self.accumulate(grads, *x) {
                    let inp = dx.cols;
                    for r in 0..dx.rows {
                        let jac = &jacobians[r * out * inp..(r + 1) * out * inp];
                        let gr = &g.data[r * out..(r + 1) * out];
                        let dxr = dx.row_mut(r);
                        for (o, go) in gr.iter().enumerate() {
                            for (d, j) in dxr.iter_mut().zip(&jac[o * inp..(o + 1) * inp]) {
                                *d += go * j;
                            }
                        }
                    }
                }
            }
            Op::ScaledSumSquares { x, scale } => {
                let xv = self.value(*x);
                let g0 = g.data[0];
                if let Some(dx) = self.accumulate(grads, *x) {
                    for (d, xi) in dx.data.iter_mut().zip(&xv.data) {
                        *d += 2.0 * scale * xi * g0;
                    }
                }
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root or is excluded from differentiation.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros of the right shape.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Mat::zeros(r, c)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_leaf_gradient_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::scalar(4.2));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![1.0]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::scalar(2.0));
        let y = tape.leaf(Mat::scalar(3.0));
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap().data, vec![3.0]);
        assert_eq!(g.get(y).unwrap().data, vec![2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::zeros(2, 1));
        assert_eq!(tape.backward(x).unwrap_err(), TapeError::NonScalarRoot((2, 1)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Mat::zeros(2, 1));
        let b = tape.leaf(Mat::zeros(1, 2));
        assert!(matches!(tape.add(a, b), Err(TapeError::Shape { op: "add", .. })));
        let w = tape.leaf(Mat::zeros(3, 3));
        let bias = tape.leaf(Mat::zeros(1, 3));
        assert!(tape.linear(a, w, bias).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Mat::scalar(5.0));
        let x = tape.leaf(Mat::scalar(2.0));
        let p = tape.mul(c, x).unwrap();
        let g = tape.backward(p).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data, vec![5.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::scalar(2.0));
        let unused = tape.leaf(Mat::scalar(7.0));
        let y = tape.scaled_sum_squares(x, 0.5);
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(&tape, unused).data, vec![0.0]);
        assert_eq!(g.get(x).unwrap().data, vec![2.0]);
    }

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Mat) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let root = build(&mut tape, x);
        let g = tape.backward(root).unwrap().get_or_zeros(&tape, x);
        let h = 1e-6;
        for i in 0..x0.data.len() {
            let eval = |delta: f64| {
                let mut xm = x0.clone();
                xm.data[i] += delta;
                let mut t = Tape::new();
                let xv = t.leaf(xm);
                let r = build(&mut t, xv);
                t.value(r).data[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let scale = fd.abs().max(g.data[i].abs()).max(1e-3);
            assert!((fd - g.data[i]).abs() / scale < 1e-6, "entry {i}: {fd} vs {}", g.data[i]);
        }
    }

    #[test]
    fn elementary_ops_match_finite_differences() {
        let x0 = Mat::from_vec(3, 2, vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.9]);
        fd_check(
            |t, x| {
                let w = t.constant(Mat::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()));
                let b = t.constant(Mat::from_vec(1, 4, vec![0.1, -0.2, 0.3, 0.0]));
                let xt = t.prepend_column(x, 0.4);
                let h = t.linear(xt, w, b).unwrap();
                let h = t.tanh(h);
                let n = t.row_squared_norm(h);
                let d = t.row_dot(x, Mat::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.3])).unwrap();
                let s = t.combine(&[(n, 0.5), (d, -1.5)], Some(&Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]))).unwrap();
                let jac: Vec<f64> = (0..3).flat_map(|r| {
                    let v = t.value(x).row(r).to_vec();
                    vec![2.0 * v[0], 3.0 * v[1] * v[1]]
                }).collect();
                let vals = Mat::from_vec(3, 1, (0..3).map(|r| {
                    let v = t.value(x).row(r);
                    v[0] * v[0] + v[1].powi(3)
                }).collect());
                let m = t.row_map(x, vals, jac).unwrap();
                let p = t.mul(s, m).unwrap();
                let q = t.sub(p, n).unwrap();
                let q = t.add(q, d).unwrap();
                t.scaled_sum_squares(q, 0.25)
            },
            x0,
        );
    }

    #[test]
    fn backward_is_linear() {
        // grad(a f + b g) = a grad f + b grad g
        let build = |t: &mut Tape, x: Var| -> (Var, Var) {
            let f = t.tanh(x);
            let f = t.scaled_sum_squares(f, 1.0);
            let g = t.row_squared_norm(x);
            let g = t.scaled_sum_squares(g, 0.5);
            (f, g)
        };
        let x0 = Mat::from_vec(2, 2, vec![0.4, -1.2, 0.8, 0.1]);
        let (a, b) = (2.5, -0.75);
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let (f, g) = build(&mut t, x);
        let c = t.combine(&[(f, a), (g, b)], None).unwrap();
        let gc = t.backward(c).unwrap().get_or_zeros(&t, x);
        let gf = t.backward(f).unwrap().get_or_zeros(&t, x);
        let gg = t.backward(g).unwrap().get_or_zeros(&t, x);
        for i in 0..4 {
            let expect = a * gf.data[i] + b * gg.data[i];
            assert!((gc.data[i] - expect).abs() <= 1e-14 * expect.abs().max(1.0));
        }
    }
}
