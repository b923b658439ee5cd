//! Minimal reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a scalar node returns gradients for every node that
//! depends on a parameter leaf.

use crate::tensor::{bce_with_logit, gelu, gelu_grad, sigmoid, Mat};

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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    NormalizeRows(Var),
    GatherRows(Var, Vec<usize>),
    BceWithLogits(Var, Mat),
    BilinearSample { value: Var, locs: Var, height: usize, width: usize },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.data[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push_op(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push_op(v, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push_op(v, Op::Div(a, b), &[a, b])
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows, 1, "add_row expects a single row");
        assert_eq!(am.cols, rm.cols, "add_row width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&rm.data) {
                *x += b;
            }
        }
        self.push_op(v, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies row `i` of `a` by entry `i` of the `n×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!(cm.shape(), (am.rows, 1), "mul_col expects n×1");
        let mut v = am.clone();
        for r in 0..v.rows {
            let s = cm.data[r];
            v.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        self.push_op(v, Op::MulCol(a, col), &[a, col])
    }

    /// Divides row `i` of `a` by entry `i` of the `n×1` column.
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!(cm.shape(), (am.rows, 1), "div_col expects n×1");
        let mut v = am.clone();
        for r in 0..v.rows {
            let s = cm.data[r];
            v.row_mut(r).iter_mut().for_each(|x| *x /= s);
        }
        self.push_op(v, Op::DivCol(a, col), &[a, col])
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(a).scale(sv);
        self.push_op(v, Op::MulScalarVar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push_op(v, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push_op(v, Op::Gelu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push_op(v, Op::Exp(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push_op(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push_op(v, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pm = self.value(*p);
                assert_eq!(pm.rows, rows, "concat_cols row mismatch");
                v.row_mut(r)[off..off + pm.cols].copy_from_slice(pm.row(r));
                off += pm.cols;
            }
        }
        self.push_op(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.cols, "slice_cols out of range");
        let v = Mat::from_fn(am.rows, len, |r, c| am.get(r, start + c));
        self.push_op(v, Op::SliceCols(a, start), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push_op(v, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `n×m → n×1`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let v = Mat::from_fn(am.rows, 1, |r, _| am.row(r).iter().sum());
        self.push_op(v, Op::SumRows(a), &[a])
    }

    /// `n×m → 1×m`
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut v = Mat::zeros(1, am.cols);
        for r in 0..am.rows {
            for (o, x) in v.data.iter_mut().zip(am.row(r)) {
                *o += x;
            }
        }
        self.push_op(v, Op::SumCols(a), &[a])
    }

    /// Unit-length rows. Rows must be nonzero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).normalize_rows();
        self.push_op(v, Op::NormalizeRows(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select_rows(rows);
        self.push_op(v, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Elementwise binary cross-entropy of logits against a fixed target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Mat) -> Var {
        let v = self.value(logits).zip_map(target, bce_with_logit);
        self.push_op(v, Op::BceWithLogits(logits, target.clone()), &[logits])
    }

    /// Bilinear sampling of a `height×width` feature map stored as
    /// `(height·width)×C`. `locs` is `n×2` with columns `(x, y)` in pixel
    /// coordinates (pixel centres at integers). Taps outside the map read zero.
    pub fn bilinear_sample(&mut self, value: Var, locs: Var, height: usize, width: usize) -> Var {
        let vm = self.value(value);
        let lm = self.value(locs);
        assert_eq!(vm.rows, height * width, "bilinear_sample map size mismatch");
        assert_eq!(lm.cols, 2, "bilinear_sample expects n×2 locations");
        let c = vm.cols;
        let mut out = Mat::zeros(lm.rows, c);
        for i in 0..lm.rows {
            let taps = bilinear_taps(lm.get(i, 0), lm.get(i, 1), height, width);
            let row = out.row_mut(i);
            for (idx, w) in taps.iter().flatten() {
                for (o, x) in row.iter_mut().zip(vm.row(*idx)) {
                    *o += w * x;
                }
            }
        }
        self.push_op(out, Op::BilinearSample { value, locs, height, width }, &[value, locs])
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let acc = |v: Var, delta: Mat, grads: &mut [Option<Mat>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul_nt(self.value(*b)), grads);
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, self.value(*a).matmul_tn(g), grads);
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ ; da = g b ; db = gᵀ a
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul(self.value(*b)), grads);
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, g.matmul_tn(self.value(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.scale(-1.0), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |x, y| x * y), grads);
                acc(*b, g.zip_map(av, |x, y| x * y), grads);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |x, y| x / y), grads);
                let db = Mat::from_fn(g.rows, g.cols, |r, c| {
                    let y = bv.get(r, c);
                    -g.get(r, c) * av.get(r, c) / (y * y)
                });
                acc(*b, db, grads);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                let mut dr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, x) in dr.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*row, dr, grads);
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let da = Mat::from_fn(g.rows, g.cols, |r, c| g.get(r, c) * cv.data[r]);
                let dc = Mat::from_fn(g.rows, 1, |r, _| crate::tensor::dot(g.row(r), av.row(r)));
                acc(*a, da, grads);
                acc(*col, dc, grads);
            }
            Op::DivCol(a, col) => {
                let cv = self.value(*col);
                let da = Mat::from_fn(g.rows, g.cols, |r, c| g.get(r, c) / cv.data[r]);
                let dc = Mat::from_fn(g.rows, 1, |r, _| {
                    -crate::tensor::dot(g.row(r), out.row(r)) / cv.data[r]
                });
                acc(*a, da, grads);
                acc(*col, dc, grads);
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.scalar(*s);
                acc(*a, g.scale(sv), grads);
                let ds = crate::tensor::dot(&g.data, &self.value(*a).data);
                acc(*s, Mat::from_vec(1, 1, vec![ds]), grads);
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s), grads),
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |d, y| d * y * (1.0 - y)), grads),
            Op::Tanh(a) => acc(*a, g.zip_map(out, |d, y| d * (1.0 - y * y)), grads),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x)), grads),
            Op::Exp(a) => acc(*a, g.zip_map(out, |d, y| d * y), grads),
            Op::SoftmaxRows(a) => {
                let mut da = Mat::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let s = crate::tensor::dot(gr, y);
                    for (c, o) in da.row_mut(r).iter_mut().enumerate() {
                        *o = y[c] * (gr[c] - s);
                    }
                }
                acc(*a, da, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let mut da = Mat::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let s: f64 = gr.iter().sum();
                    for (c, o) in da.row_mut(r).iter_mut().enumerate() {
                        *o = gr[c] - y[c].exp() * s;
                    }
                }
                acc(*a, da, grads);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    let dp = Mat::from_fn(g.rows, w, |r, c| g.get(r, off + c));
                    acc(*p, dp, grads);
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let am = self.value(*a);
                let mut da = Mat::zeros(am.rows, am.cols);
                for r in 0..g.rows {
                    da.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, da, grads);
            }
            Op::SumAll(a) => {
                let am = self.value(*a);
                acc(*a, Mat::filled(am.rows, am.cols, g.data[0]), grads);
            }
            Op::SumRows(a) => {
                let am = self.value(*a);
                acc(*a, Mat::from_fn(am.rows, am.cols, |r, _| g.data[r]), grads);
            }
            Op::SumCols(a) => {
                let am = self.value(*a);
                acc(*a, Mat::from_fn(am.rows, am.cols, |_, c| g.data[c]), grads);
            }
            Op::NormalizeRows(a) => {
                let am = self.value(*a);
                let mut da = Mat::zeros(am.rows, am.cols);
                for r in 0..am.rows {
                    let n = crate::tensor::norm(am.row(r));
                    if n == 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let s = crate::tensor::dot(gr, y);
                    for (c, o) in da.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - y[c] * s) / n;
                    }
                }
                acc(*a, da, grads);
            }
            Op::GatherRows(a, rows) => {
                let am = self.value(*a);
                let mut da = Mat::zeros(am.rows, am.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (o, x) in da.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*a, da, grads);
            }
            Op::BceWithLogits(a, target) => {
                let x = self.value(*a);
                let da = Mat::from_fn(g.rows, g.cols, |r, c| {
                    g.get(r, c) * (sigmoid(x.get(r, c)) - target.get(r, c))
                });
                acc(*a, da, grads);
            }
            Op::BilinearSample { value, locs, height, width } => {
                let vm = self.value(*value);
                let lm = self.value(*locs);
                let need_v = self.nodes[value.0].needs_grad;
                let need_l = self.nodes[locs.0].needs_grad;
                let mut dv = Mat::zeros(vm.rows, vm.cols);
                let mut dl = Mat::zeros(lm.rows, 2);
                for i in 0..lm.rows {
                    let (x, y) = (lm.get(i, 0), lm.get(i, 1));
                    let gr = g.row(i);
                    if need_v {
                        for (idx, w) in bilinear_taps(x, y, *height, *width).iter().flatten() {
                            for (o, d) in dv.row_mut(*idx).iter_mut().zip(gr) {
                                *o += w * d;
                            }
                        }
                    }
                    if need_l {
                        let (dx, dy) = bilinear_loc_grad(vm, x, y, *height, *width, gr);
                        dl.set(i, 0, dx);
                        dl.set(i, 1, dy);
                    }
                }
                if need_v {
                    acc(*value, dv, grads);
                }
                if need_l {
                    acc(*locs, dl, grads);
                }
            }
        }
    }
}

/// Four bilinear taps `(row index, weight)`; taps outside the map are `None`.
pub fn bilinear_taps(x: f64, y: f64, height: usize, width: usize) -> [Option<(usize, f64)>; 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    corners.map(|(cx, cy, w)| {
        if cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
            None
        } else {
            Some((cy as usize * width + cx as usize, w))
        }
    })
}

fn bilinear_loc_grad(vm: &Mat, x: f64, y: f64, height: usize, width: usize, g: &[f64]) -> (f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |cx: f64, cy: f64| -> f64 {
        if cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
            0.0
        } else {
            crate::tensor::dot(vm.row(cy as usize * width + cx as usize), g)
        }
    };
    let v00 = at(x0, y0);
    let v10 = at(x0 + 1.0, y0);
    let v01 = at(x0, y0 + 1.0);
    let v11 = at(x0 + 1.0, y0 + 1.0);
    let dx = (v10 - v00) * (1.0 - fy) + (v11 - v01) * fy;
    let dy = (v01 - v00) * (1.0 - fx) + (v11 - v10) * fx;
    (dx, dy)
}
