//! Reverse-mode differentiation over `Array2<f64>` values.
//!
//! A [`Tape`] records operations eagerly: each builder method computes the
//! result value immediately and pushes a node; [`Tape::backward`] then walks
//! the nodes in reverse, accumulating gradients. Tapes are cheap and are
//! rebuilt for every training step.
//!
//! Everything is a matrix. Batches are rows, single vectors are 1×D, scalars
//! are 1×1. Convolution is expressed as [`Tape::im2col`] followed by a
//! matrix multiply, so a conv backbone and a dense head share one engine.
//!
//! Shape violations are programming errors and panic; fallible validation
//! belongs to the callers that assemble user-provided data.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of one convolution: input planes and kernel placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn plane_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulConst(usize, Array2<f64>),
    Matmul(usize, usize),
    AddRowBroadcast(usize, usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    SumColsKeep(usize),
    MeanAll(usize),
    SelectRows(usize, Vec<usize>),
    SelectCols(usize, usize, usize),
    ConcatCols(usize, usize),
    ConcatColsBroadcast(usize, usize),
    MeanRowsGrouped(usize, usize),
    CellsToPlanes(usize, usize),
    Grl(usize, f64),
    NllMean(usize, Vec<usize>),
    BceWithLogitsMean(usize, Array2<f64>),
    L1Mean(usize, Array2<f64>),
    Im2col(usize, ConvGeom),
}

struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let grad = Array2::zeros(value.dim());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Value copied out of the graph; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Array2<f64> {
        self.nodes[v.0].value.clone()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::MulElem(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = &self.nodes[x.0].value * c;
        self.push(v, Op::Scale(x.0, c))
    }

    pub fn add_const(&mut self, x: Var, c: &Array2<f64>) -> Var {
        assert_eq!(self.dim(x), c.dim(), "add_const shape mismatch");
        let v = &self.nodes[x.0].value + c;
        self.push(v, Op::AddConst(x.0))
    }

    pub fn mul_const(&mut self, x: Var, c: &Array2<f64>) -> Var {
        assert_eq!(self.dim(x), c.dim(), "mul_const shape mismatch");
        let v = &self.nodes[x.0].value * c;
        self.push(v, Op::MulConst(x.0, c.clone()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.dim(a);
        let (br, _bc) = self.dim(b);
        assert_eq!(ac, br, "matmul inner dims {ar}x{ac} . {br}x{_bc}");
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::Matmul(a.0, b.0))
    }

    /// `x` (B×K) plus a bias row `b` (1×K) added to every row.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Var {
        let (_, k) = self.dim(x);
        assert_eq!(self.dim(b), (1, k), "bias must be 1x{k}");
        let bias = self.nodes[b.0].value.row(0).to_owned();
        let v = &self.nodes[x.0].value + &bias;
        self.push(v, Op::AddRowBroadcast(x.0, b.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|t| t.max(0.0));
        self.push(v, Op::Relu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(x.0))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(&self.nodes[x.0].value);
        self.push(v, Op::Softmax(x.0))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = log_softmax_rows(&self.nodes[x.0].value);
        self.push(v, Op::LogSoftmax(x.0))
    }

    /// B×K → B×1 row sums.
    pub fn sum_cols_keep(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum_axis(Axis(1));
        let n = s.len();
        let v = s.into_shape_with_order((n, 1)).expect("row-sum reshape");
        self.push(v, Op::SumColsKeep(x.0))
    }

    /// Mean of all entries → 1×1.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let (r, c) = self.dim(x);
        let m = self.nodes[x.0].value.sum() / (r * c) as f64;
        let v = Array2::from_elem((1, 1), m);
        self.push(v, Op::MeanAll(x.0))
    }

    /// Gather rows by index; repeated indices accumulate gradient.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dim(x);
        assert!(idx.iter().all(|&i| i < r), "row index out of range");
        let mut v = Array2::zeros((idx.len(), c));
        for (out_i, &src_i) in idx.iter().enumerate() {
            v.row_mut(out_i).assign(&self.nodes[x.0].value.row(src_i));
        }
        self.push(v, Op::SelectRows(x.0, idx.to_vec()))
    }

    /// Column slice [lo, hi).
    pub fn select_cols(&mut self, x: Var, lo: usize, hi: usize) -> Var {
        let (_, c) = self.dim(x);
        assert!(lo < hi && hi <= c, "column range {lo}..{hi} of {c}");
        let v = self.nodes[x.0].value.slice(ndarray::s![.., lo..hi]).to_owned();
        self.push(v, Op::SelectCols(x.0, lo, hi))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.dim(a);
        let (rb, cb) = self.dim(b);
        assert_eq!(ra, rb, "concat_cols row mismatch");
        let mut v = Array2::zeros((ra, ca + cb));
        v.slice_mut(ndarray::s![.., ..ca]).assign(&self.nodes[a.0].value);
        v.slice_mut(ndarray::s![.., ca..]).assign(&self.nodes[b.0].value);
        self.push(v, Op::ConcatCols(a.0, b.0))
    }

    /// `a` (B×C1) with row `b` (1×C2) appended to every row.
    pub fn concat_cols_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.dim(a);
        let (rb, cb) = self.dim(b);
        assert_eq!(rb, 1, "broadcast row must be 1xC");
        let mut v = Array2::zeros((ra, ca + cb));
        v.slice_mut(ndarray::s![.., ..ca]).assign(&self.nodes[a.0].value);
        for i in 0..ra {
            v.slice_mut(ndarray::s![i, ca..]).assign(&self.nodes[b.0].value.row(0));
        }
        self.push(v, Op::ConcatColsBroadcast(a.0, b.0))
    }

    /// (G·M)×C → G×C: mean over each consecutive group of `group_size` rows.
    pub fn mean_rows_grouped(&mut self, x: Var, group_size: usize) -> Var {
        let (r, c) = self.dim(x);
        assert!(group_size > 0 && r % group_size == 0, "rows {r} not grouped by {group_size}");
        let groups = r / group_size;
        let mut v = Array2::zeros((groups, c));
        for g in 0..groups {
            for j in 0..group_size {
                let row = self.nodes[x.0].value.row(g * group_size + j).to_owned();
                let mut acc = v.row_mut(g);
                acc += &row;
            }
        }
        v /= group_size as f64;
        self.push(v, Op::MeanRowsGrouped(x.0, group_size))
    }

    /// (B·S)×C cell rows → B×(C·S) image rows, so a per-cell matrix can feed
    /// the next convolution's plane layout: out[b, c·S + s] = in[b·S + s, c].
    pub fn cells_to_planes(&mut self, x: Var, batch: usize) -> Var {
        let (r, c) = self.dim(x);
        assert!(batch > 0 && r % batch == 0, "rows {r} not a multiple of batch {batch}");
        let s = r / batch;
        let mut v = Array2::zeros((batch, c * s));
        for b in 0..batch {
            for si in 0..s {
                for ci in 0..c {
                    v[(b, ci * s + si)] = self.nodes[x.0].value[(b * s + si, ci)];
                }
            }
        }
        self.push(v, Op::CellsToPlanes(x.0, batch))
    }

    /// Identity forward; backward multiplies the gradient by −lambda.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.push(v, Op::Grl(x.0, lambda))
    }

    /// Mean negative log-likelihood of `labels` under log-probability rows.
    pub fn nll_mean(&mut self, log_probs: Var, labels: &[usize]) -> Var {
        let (r, c) = self.dim(log_probs);
        assert_eq!(r, labels.len(), "one label per row");
        assert!(labels.iter().all(|&l| l < c), "label out of range");
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            total -= self.nodes[log_probs.0].value[(i, l)];
        }
        let v = Array2::from_elem((1, 1), total / r as f64);
        self.push(v, Op::NllMean(log_probs.0, labels.to_vec()))
    }

    /// Mean binary cross-entropy of logits (B×1) against constant targets in
    /// {0, 1}, in the numerically stable max(z,0) − z·t + ln(1+e^−|z|) form.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &Array2<f64>) -> Var {
        let (r, c) = self.dim(logits);
        assert_eq!(c, 1, "logits must be a column");
        assert_eq!(targets.dim(), (r, 1), "one target per logit");
        let mut total = 0.0;
        for i in 0..r {
            let z = self.nodes[logits.0].value[(i, 0)];
            let t = targets[(i, 0)];
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let v = Array2::from_elem((1, 1), total / r as f64);
        self.push(v, Op::BceWithLogitsMean(logits.0, targets.clone()))
    }

    /// Mean absolute error against a constant target of the same shape.
    pub fn l1_mean(&mut self, x: Var, target: &Array2<f64>) -> Var {
        assert_eq!(self.dim(x), target.dim(), "l1 target shape mismatch");
        let (r, c) = self.dim(x);
        let mut total = 0.0;
        for i in 0..r {
            for j in 0..c {
                total += (self.nodes[x.0].value[(i, j)] - target[(i, j)]).abs();
            }
        }
        let v = Array2::from_elem((1, 1), total / (r * c) as f64);
        self.push(v, Op::L1Mean(x.0, target.clone()))
    }

    /// Unfold a batch of C×H×W planes (rows of `x`, flattened row-major) into
    /// patch rows: output is (B·out_h·out_w)×(C·k²), zero-padded.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let (b, plane) = self.dim(x);
        assert_eq!(plane, geom.plane_len(), "plane length mismatch");
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut v = Array2::zeros((b * oh * ow, geom.patch_len()));
        for bi in 0..b {
            let src = self.nodes[x.0].value.row(bi);
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = bi * oh * ow + oy * ow + ox;
                    for c in 0..geom.in_c {
                        for ky in 0..geom.kernel {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= geom.in_h as isize {
                                continue;
                            }
                            for kx in 0..geom.kernel {
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if ix < 0 || ix >= geom.in_w as isize {
                                    continue;
                                }
                                let col = (c * geom.kernel + ky) * geom.kernel + kx;
                                let src_idx = (c * geom.in_h + iy as usize) * geom.in_w + ix as usize;
                                v[(row, col)] = src[src_idx];
                            }
                        }
                    }
                }
            }
        }
        self.push(v, Op::Im2col(x.0, geom))
    }

    fn dim(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Accumulate d(loss)/d(node) for every node. `loss` must be 1×1.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.dim(loss), (1, 1), "backward needs a scalar loss");
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
        self.nodes[loss.0].grad[(0, 0)] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            // split so the node's own value/grad can be read while parents
            // are written
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let g = &node.grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    head[*a].grad += g;
                    head[*b].grad += g;
                }
                Op::Sub(a, b) => {
                    head[*a].grad += g;
                    head[*b].grad -= g;
                }
                Op::MulElem(a, b) => {
                    let da = g * &head[*b].value;
                    let db = g * &head[*a].value;
                    head[*a].grad += &da;
                    head[*b].grad += &db;
                }
                Op::Scale(x, c) => {
                    head[*x].grad.scaled_add(*c, g);
                }
                Op::AddConst(x) => {
                    head[*x].grad += g;
                }
                Op::MulConst(x, c) => {
                    let dx = g * c;
                    head[*x].grad += &dx;
                }
                Op::Matmul(a, b) => {
                    let da = g.dot(&head[*b].value.t());
                    let db = head[*a].value.t().dot(g);
                    head[*a].grad += &da;
                    head[*b].grad += &db;
                }
                Op::AddRowBroadcast(x, b) => {
                    head[*x].grad += g;
                    let col_sums = g.sum_axis(Axis(0));
                    let mut bias_grad = head[*b].grad.row_mut(0);
                    bias_grad += &col_sums;
                }
                Op::Relu(x) => {
                    let mask = node.value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let dx = g * &mask;
                    head[*x].grad += &dx;
                }
                Op::Tanh(x) => {
                    let dx = g * &node.value.mapv(|t| 1.0 - t * t);
                    head[*x].grad += &dx;
                }
                Op::Sigmoid(x) => {
                    let dx = g * &node.value.mapv(|s| s * (1.0 - s));
                    head[*x].grad += &dx;
                }
                Op::Softmax(x) => {
                    // dx = p ⊙ (g − rowsum(g ⊙ p))
                    let p = &node.value;
                    let gp = g * p;
                    let dots = gp.sum_axis(Axis(1));
                    let mut dx = g.clone();
                    for (mut row, &d) in dx.axis_iter_mut(Axis(0)).zip(dots.iter()) {
                        row -= d;
                    }
                    let dx = dx * p;
                    head[*x].grad += &dx;
                }
                Op::LogSoftmax(x) => {
                    // dx = g − softmax ⊙ rowsum(g)
                    let p = node.value.mapv(f64::exp);
                    let sums = g.sum_axis(Axis(1));
                    let mut dx = g.clone();
                    for ((mut row, p_row), &s) in
                        dx.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))).zip(sums.iter())
                    {
                        row.scaled_add(-s, &p_row);
                    }
                    head[*x].grad += &dx;
                }
                Op::SumColsKeep(x) => {
                    let (r, c) = head[*x].value.dim();
                    for i in 0..r {
                        let gi = g[(i, 0)];
                        for j in 0..c {
                            head[*x].grad[(i, j)] += gi;
                        }
                    }
                }
                Op::MeanAll(x) => {
                    let (r, c) = head[*x].value.dim();
                    head[*x].grad.scaled_add(g[(0, 0)] / (r * c) as f64, &Array2::ones((r, c)));
                }
                Op::SelectRows(x, idx) => {
                    for (out_i, &src_i) in idx.iter().enumerate() {
                        let g_row = g.row(out_i).to_owned();
                        let mut dst = head[*x].grad.row_mut(src_i);
                        dst += &g_row;
                    }
                }
                Op::SelectCols(x, lo, _hi) => {
                    let (r, c) = g.dim();
                    for i in 0..r {
                        for j in 0..c {
                            head[*x].grad[(i, lo + j)] += g[(i, j)];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = head[*a].value.dim().1;
                    let ga = g.slice(ndarray::s![.., ..ca]).to_owned();
                    let gb = g.slice(ndarray::s![.., ca..]).to_owned();
                    head[*a].grad += &ga;
                    head[*b].grad += &gb;
                }
                Op::ConcatColsBroadcast(a, b) => {
                    let ca = head[*a].value.dim().1;
                    let ga = g.slice(ndarray::s![.., ..ca]).to_owned();
                    head[*a].grad += &ga;
                    let gb = g.slice(ndarray::s![.., ca..]).sum_axis(Axis(0));
                    let mut dst = head[*b].grad.row_mut(0);
                    dst += &gb;
                }
                Op::MeanRowsGrouped(x, m) => {
                    let scale = 1.0 / *m as f64;
                    let groups = g.dim().0;
                    for gi in 0..groups {
                        let g_row = g.row(gi).to_owned() * scale;
                        for j in 0..*m {
                            let mut dst = head[*x].grad.row_mut(gi * m + j);
                            dst += &g_row;
                        }
                    }
                }
                Op::CellsToPlanes(x, batch) => {
                    let c = head[*x].value.dim().1;
                    let s = head[*x].value.dim().0 / batch;
                    for b in 0..*batch {
                        for si in 0..s {
                            for ci in 0..c {
                                head[*x].grad[(b * s + si, ci)] += g[(b, ci * s + si)];
                            }
                        }
                    }
                }
                Op::Grl(x, lambda) => {
                    head[*x].grad.scaled_add(-lambda, g);
                }
                Op::NllMean(x, labels) => {
                    let s = g[(0, 0)] / labels.len() as f64;
                    for (i, &l) in labels.iter().enumerate() {
                        head[*x].grad[(i, l)] -= s;
                    }
                }
                Op::BceWithLogitsMean(x, targets) => {
                    let r = targets.dim().0;
                    let s = g[(0, 0)] / r as f64;
                    for i in 0..r {
                        let z = head[*x].value[(i, 0)];
                        head[*x].grad[(i, 0)] += s * (sigmoid(z) - targets[(i, 0)]);
                    }
                }
                Op::L1Mean(x, target) => {
                    let (r, c) = target.dim();
                    let s = g[(0, 0)] / (r * c) as f64;
                    for i in 0..r {
                        for j in 0..c {
                            let d = head[*x].value[(i, j)] - target[(i, j)];
                            head[*x].grad[(i, j)] += s * d.signum_or_zero();
                        }
                    }
                }
                Op::Im2col(x, geom) => {
                    let (oh, ow) = (geom.out_h(), geom.out_w());
                    let b = head[*x].value.dim().0;
                    for bi in 0..b {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let row = bi * oh * ow + oy * ow + ox;
                                for c in 0..geom.in_c {
                                    for ky in 0..geom.kernel {
                                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                        if iy < 0 || iy >= geom.in_h as isize {
                                            continue;
                                        }
                                        for kx in 0..geom.kernel {
                                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                            if ix < 0 || ix >= geom.in_w as isize {
                                                continue;
                                            }
                                            let col = (c * geom.kernel + ky) * geom.kernel + kx;
                                            let src_idx =
                                                (c * geom.in_h + iy as usize) * geom.in_w + ix as usize;
                                            head[*x].grad[(bi, src_idx)] += g[(row, col)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Named parameter arrays in a fixed (sorted) order.
///
/// The ordering is load-bearing: optimizers, checkpoints, and gradient
/// accumulation all walk parameters by name, so results never depend on
/// insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    map: BTreeMap<String, Array2<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.map.iter_mut()
    }

    /// Snap every entry to its nearest 32-bit float. Checkpoints store 32-bit
    /// values, so keeping live parameters on that grid makes a save/load
    /// round trip the identity.
    pub fn quantize_f32(&mut self) {
        for value in self.map.values_mut() {
            value.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Register every parameter as a tape leaf; returns name → handle.
    pub fn leaf_all(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.map {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        vars
    }

    /// Read back gradients for every parameter after a backward pass.
    pub fn grads_from(&self, tape: &Tape, vars: &BTreeMap<String, Var>) -> BTreeMap<String, Array2<f64>> {
        let mut grads = BTreeMap::new();
        for name in self.map.keys() {
            grads.insert(name.clone(), tape.grad(vars[name]).clone());
        }
        grads
    }
}
