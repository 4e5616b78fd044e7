//! Reverse-mode automatic differentiation on `f64` matrices.
//!
//! A [`Graph`] is a disposable tape: forward functions push nodes, `backward`
//! walks the tape in reverse and accumulates gradients. All tensors are
//! two-dimensional (`[rows, cols]`); sequences are handled by the callers as
//! one matrix per time step. The op set is exactly what the model needs:
//! dense algebra, gather/scatter for embeddings, segment ops for
//! variable-length tables, and a pairwise Gaussian log-density kernel for the
//! minibatch mutual-information estimator.

use ndarray::{Array2, Axis};

/// Matrix type used throughout the crate.
pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Tx(usize);

/// `(start, len)` row ranges describing how a stacked matrix splits into
/// per-example segments (e.g. the records of each table in a batch).
pub type Segments = Vec<(usize, usize)>;

enum Op {
    Leaf,
    Add(Tx, Tx),
    Sub(Tx, Tx),
    Mul(Tx, Tx),
    AddRow(Tx, Tx),
    MatMul(Tx, Tx),
    Affine(Tx, f64),
    Tanh(Tx),
    Sigmoid(Tx),
    Exp(Tx),
    Square(Tx),
    Clamp(Tx, f64, f64),
    ConcatCols(Vec<Tx>),
    SliceCols(Tx, usize, usize),
    Gather(Tx, Vec<usize>),
    SumAll(Tx),
    SumCols(Tx),
    MulConst(Tx, Mat),
    LogSoftmax(Tx),
    PickPerRow(Tx, Vec<usize>),
    MaskedSoftmax(Tx, Vec<usize>),
    SegmentMax(Tx, Segments, Vec<usize>),
    AttnScores { query: Tx, records: Tx, segs: Segments },
    AttnContext { weights: Tx, records: Tx, segs: Segments },
    LogSumExpCols(Tx),
    DiagCol(Tx),
    PairGaussLogProb { sample: Tx, mean: Tx, log_var: Tx },
}

struct Node {
    value: Mat,
    grad: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

/// Disposable autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Tx {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Tx(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, txs: &[Tx]) -> bool {
        txs.iter().any(|t| self.nodes[t.0].needs_grad)
    }

    /// Leaf that participates in gradients (a parameter).
    pub fn param(&mut self, value: Mat) -> Tx {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from gradients (data, noise, masks).
    pub fn constant(&mut self, value: Mat) -> Tx {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, t: Tx) -> &Mat {
        &self.nodes[t.0].value
    }

    /// Value of a `[1,1]` node as a scalar.
    pub fn scalar_value(&self, t: Tx) -> f64 {
        let v = self.value(t);
        assert_eq!(v.dim(), (1, 1), "scalar_value on non-scalar node");
        v[[0, 0]]
    }

    pub fn grad(&self, t: Tx) -> Option<&Mat> {
        self.nodes[t.0].grad.as_ref()
    }

    pub fn add(&mut self, a: Tx, b: Tx) -> Tx {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.any_needs_grad(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> Tx {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.any_needs_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> Tx {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.any_needs_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Broadcast add of a `[1,n]` row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Tx, row: Tx) -> Tx {
        let r = self.nodes[row.0].value.row(0).to_owned();
        let v = &self.nodes[a.0].value + &r;
        let ng = self.any_needs_grad(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn matmul(&mut self, a: Tx, b: Tx) -> Tx {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.any_needs_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Tx, scale: f64, shift: f64) -> Tx {
        let v = self.nodes[x.0].value.mapv(|e| scale * e + shift);
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Tx, s: f64) -> Tx {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Tx) -> Tx {
        self.affine(x, -1.0, 0.0)
    }

    pub fn tanh(&mut self, x: Tx) -> Tx {
        let v = self.nodes[x.0].value.mapv(f64::tanh);
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Tx) -> Tx {
        let v = self.nodes[x.0].value.mapv(|e| 1.0 / (1.0 + (-e).exp()));
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn exp(&mut self, x: Tx) -> Tx {
        let v = self.nodes[x.0].value.mapv(f64::exp);
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::Exp(x), ng)
    }

    pub fn square(&mut self, x: Tx) -> Tx {
        let v = self.nodes[x.0].value.mapv(|e| e * e);
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::Square(x), ng)
    }

    /// Elementwise clamp; gradient passes through only inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Tx, lo: f64, hi: f64) -> Tx {
        let v = self.nodes[x.0].value.mapv(|e| e.clamp(lo, hi));
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::Clamp(x, lo, hi), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Tx]) -> Tx {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.nrows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut v = Mat::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.nrows(), rows, "concat_cols row mismatch");
            v.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let ng = self.any_needs_grad(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Tx, start: usize, end: usize) -> Tx {
        let v = self.nodes[x.0].value.slice(ndarray::s![.., start..end]).to_owned();
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::SliceCols(x, start, end), ng)
    }

    /// Rows of `table` selected by `ids` (embedding lookup). Backward
    /// scatter-adds into the table rows.
    pub fn gather(&mut self, table: Tx, ids: &[usize]) -> Tx {
        let tv = &self.nodes[table.0].value;
        let mut v = Mat::zeros((ids.len(), tv.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&tv.row(id));
        }
        let ng = self.nodes[table.0].needs_grad;
        self.push(v, Op::Gather(table, ids.to_vec()), ng)
    }

    pub fn sum_all(&mut self, x: Tx) -> Tx {
        let s = self.nodes[x.0].value.sum();
        let ng = self.nodes[x.0].needs_grad;
        self.push(Mat::from_elem((1, 1), s), Op::SumAll(x), ng)
    }

    /// Per-row sum across columns: `[m,n] -> [m,1]`.
    pub fn sum_cols(&mut self, x: Tx) -> Tx {
        let v = self.nodes[x.0]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::SumCols(x), ng)
    }

    pub fn mean_all(&mut self, x: Tx) -> Tx {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Elementwise multiply by a constant matrix (masks, fixed noise).
    pub fn mul_const(&mut self, x: Tx, c: Mat) -> Tx {
        assert_eq!(self.nodes[x.0].value.dim(), c.dim());
        let v = &self.nodes[x.0].value * &c;
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::MulConst(x, c), ng)
    }

    /// Numerically stable per-row log-softmax.
    pub fn log_softmax(&mut self, x: Tx) -> Tx {
        let xv = &self.nodes[x.0].value;
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|e| e - lse);
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::LogSoftmax(x), ng)
    }

    /// Selects `x[i, idx[i]]` per row: `[m,n] -> [m,1]`.
    pub fn pick_per_row(&mut self, x: Tx, idx: &[usize]) -> Tx {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.nrows(), idx.len());
        let mut v = Mat::zeros((idx.len(), 1));
        for (i, &j) in idx.iter().enumerate() {
            v[[i, 0]] = xv[[i, j]];
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::PickPerRow(x, idx.to_vec()), ng)
    }

    /// Per-row softmax over the first `lens[i]` entries; the rest are zero.
    pub fn masked_softmax(&mut self, x: Tx, lens: &[usize]) -> Tx {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.nrows(), lens.len());
        let mut v = Mat::zeros(xv.dim());
        for (i, &len) in lens.iter().enumerate() {
            assert!(len >= 1 && len <= xv.ncols());
            let row = xv.row(i);
            let max = row.iter().take(len).cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().take(len).map(|e| (e - max).exp()).sum();
            for j in 0..len {
                v[[i, j]] = (row[j] - max).exp() / denom;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::MaskedSoftmax(x, lens.to_vec()), ng)
    }

    /// Per-segment columnwise max over the rows of `x`: one output row per
    /// segment. Ties route the gradient to the first maximal row.
    pub fn segment_max(&mut self, x: Tx, segs: &Segments) -> Tx {
        let xv = &self.nodes[x.0].value;
        let cols = xv.ncols();
        let mut v = Mat::zeros((segs.len(), cols));
        let mut arg = vec![0usize; segs.len() * cols];
        for (s, &(start, len)) in segs.iter().enumerate() {
            assert!(len >= 1, "segment_max on empty segment");
            for j in 0..cols {
                let mut best = xv[[start, j]];
                let mut best_i = start;
                for i in start + 1..start + len {
                    if xv[[i, j]] > best {
                        best = xv[[i, j]];
                        best_i = i;
                    }
                }
                v[[s, j]] = best;
                arg[s * cols + j] = best_i;
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::SegmentMax(x, segs.clone(), arg), ng)
    }

    /// Dot products of each query row against its segment's record rows:
    /// `out[b,k] = query[b] . records[segs[b].0 + k]`, zero beyond the
    /// segment length. Output is `[B, max_len]`.
    pub fn attn_scores(&mut self, query: Tx, records: Tx, segs: &Segments) -> Tx {
        let q = &self.nodes[query.0].value;
        let r = &self.nodes[records.0].value;
        assert_eq!(q.nrows(), segs.len());
        let kmax = segs.iter().map(|&(_, l)| l).max().unwrap_or(1);
        let mut v = Mat::zeros((segs.len(), kmax));
        for (b, &(start, len)) in segs.iter().enumerate() {
            for k in 0..len {
                v[[b, k]] = q.row(b).dot(&r.row(start + k));
            }
        }
        let ng = self.any_needs_grad(&[query, records]);
        self.push(
            v,
            Op::AttnScores { query, records, segs: segs.clone() },
            ng,
        )
    }

    /// Weighted sum of each segment's record rows: `out[b] = sum_k
    /// weights[b,k] * records[segs[b].0 + k]`.
    pub fn attn_context(&mut self, weights: Tx, records: Tx, segs: &Segments) -> Tx {
        let w = &self.nodes[weights.0].value;
        let r = &self.nodes[records.0].value;
        assert_eq!(w.nrows(), segs.len());
        let mut v = Mat::zeros((segs.len(), r.ncols()));
        for (b, &(start, len)) in segs.iter().enumerate() {
            for k in 0..len {
                let wk = w[[b, k]];
                v.row_mut(b).scaled_add(wk, &r.row(start + k));
            }
        }
        let ng = self.any_needs_grad(&[weights, records]);
        self.push(
            v,
            Op::AttnContext { weights, records, segs: segs.clone() },
            ng,
        )
    }

    /// Stable per-row log-sum-exp: `[m,n] -> [m,1]`.
    pub fn log_sum_exp_cols(&mut self, x: Tx) -> Tx {
        let xv = &self.nodes[x.0].value;
        let mut v = Mat::zeros((xv.nrows(), 1));
        for (i, row) in xv.rows().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v[[i, 0]] = max + row.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::LogSumExpCols(x), ng)
    }

    /// Diagonal of a square matrix as a column: `[m,m] -> [m,1]`.
    pub fn diag_col(&mut self, x: Tx) -> Tx {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.nrows(), xv.ncols());
        let v = Mat::from_shape_fn((xv.nrows(), 1), |(i, _)| xv[[i, i]]);
        let ng = self.nodes[x.0].needs_grad;
        self.push(v, Op::DiagCol(x), ng)
    }

    /// `out[i,j] = log N(sample_i; mean_j, diag(exp(log_var_j)))` for a batch
    /// of diagonal Gaussians. Used by the minibatch mutual-information
    /// estimator.
    pub fn pair_gauss_log_prob(&mut self, sample: Tx, mean: Tx, log_var: Tx) -> Tx {
        let sv = &self.nodes[sample.0].value;
        let mv = &self.nodes[mean.0].value;
        let lv = &self.nodes[log_var.0].value;
        assert_eq!(sv.dim(), mv.dim());
        assert_eq!(mv.dim(), lv.dim());
        let (b, d) = sv.dim();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut v = Mat::zeros((b, b));
        for i in 0..b {
            for j in 0..b {
                let mut acc = 0.0;
                for k in 0..d {
                    let diff = sv[[i, k]] - mv[[j, k]];
                    acc += ln2pi + lv[[j, k]] + diff * diff * (-lv[[j, k]]).exp();
                }
                v[[i, j]] = -0.5 * acc;
            }
        }
        let ng = self.any_needs_grad(&[sample, mean, log_var]);
        self.push(v, Op::PairGaussLogProb { sample, mean, log_var }, ng)
    }

    fn accumulate(&mut self, t: Tx, delta: &Mat) {
        if !self.nodes[t.0].needs_grad {
            return;
        }
        match &mut self.nodes[t.0].grad {
            Some(g) => *g += delta,
            slot => {
                *slot = Some(delta.clone());
            }
        }
    }

    /// Backpropagate from a `[1,1]` loss node. Gradients accumulate on every
    /// node with `needs_grad`; read them back with [`Graph::grad`].
    pub fn backward(&mut self, loss: Tx) {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward expects a scalar loss node"
        );
        self.nodes[loss.0].grad = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.backward_node(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
    }

    fn backward_node(&mut self, idx: usize, g: &Mat) {
        // `op` moved out to appease the borrow checker; restored at the end.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let ng = g.mapv(|e| -e);
                self.accumulate(*b, &ng);
            }
            Op::Mul(a, b) => {
                let ga = g * &self.nodes[b.0].value;
                let gb = g * &self.nodes[a.0].value;
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::AddRow(a, row) => {
                self.accumulate(*a, g);
                let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(*row, &summed);
            }
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.nodes[b.0].value.t());
                let gb = self.nodes[a.0].value.t().dot(g);
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Affine(x, scale) => {
                let gx = g.mapv(|e| e * scale);
                self.accumulate(*x, &gx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                let gx = g * &y.mapv(|e| 1.0 - e * e);
                self.accumulate(*x, &gx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                let gx = g * &y.mapv(|e| e * (1.0 - e));
                self.accumulate(*x, &gx);
            }
            Op::Exp(x) => {
                let gx = g * &self.nodes[idx].value;
                self.accumulate(*x, &gx);
            }
            Op::Square(x) => {
                let gx = g * &self.nodes[x.0].value.mapv(|e| 2.0 * e);
                self.accumulate(*x, &gx);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = &self.nodes[x.0].value;
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(xv).for_each(|ge, &xe| {
                    if xe < *lo || xe > *hi {
                        *ge = 0.0;
                    }
                });
                self.accumulate(*x, &gx);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    let gp = g.slice(ndarray::s![.., at..at + w]).to_owned();
                    self.accumulate(*p, &gp);
                    at += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let mut gx = Mat::zeros(self.nodes[x.0].value.dim());
                gx.slice_mut(ndarray::s![.., *start..*end]).assign(g);
                self.accumulate(*x, &gx);
            }
            Op::Gather(table, ids) => {
                let mut gt = Mat::zeros(self.nodes[table.0].value.dim());
                for (i, &id) in ids.iter().enumerate() {
                    gt.row_mut(id).scaled_add(1.0, &g.row(i));
                }
                self.accumulate(*table, &gt);
            }
            Op::SumAll(x) => {
                let gx = Mat::from_elem(self.nodes[x.0].value.dim(), g[[0, 0]]);
                self.accumulate(*x, &gx);
            }
            Op::SumCols(x) => {
                let dim = self.nodes[x.0].value.dim();
                let gx = Mat::from_shape_fn(dim, |(i, _)| g[[i, 0]]);
                self.accumulate(*x, &gx);
            }
            Op::MulConst(x, c) => {
                let gx = g * c;
                self.accumulate(*x, &gx);
            }
            Op::LogSoftmax(x) => {
                let y = &self.nodes[idx].value;
                let mut gx = g.clone();
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let gsum: f64 = grow.sum();
                    for (ge, &ye) in grow.iter_mut().zip(yrow.iter()) {
                        *ge -= ye.exp() * gsum;
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::PickPerRow(x, ids) => {
                let mut gx = Mat::zeros(self.nodes[x.0].value.dim());
                for (i, &j) in ids.iter().enumerate() {
                    gx[[i, j]] += g[[i, 0]];
                }
                self.accumulate(*x, &gx);
            }
            Op::MaskedSoftmax(x, lens) => {
                let y = &self.nodes[idx].value;
                let mut gx = Mat::zeros(y.dim());
                for (i, &len) in lens.iter().enumerate() {
                    let mut dot = 0.0;
                    for j in 0..len {
                        dot += g[[i, j]] * y[[i, j]];
                    }
                    for j in 0..len {
                        gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::SegmentMax(x, segs, arg) => {
                let cols = self.nodes[x.0].value.ncols();
                let mut gx = Mat::zeros(self.nodes[x.0].value.dim());
                for s in 0..segs.len() {
                    for j in 0..cols {
                        gx[[arg[s * cols + j], j]] += g[[s, j]];
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::AttnScores { query, records, segs } => {
                let q = self.nodes[query.0].value.clone();
                let r = self.nodes[records.0].value.clone();
                let mut gq = Mat::zeros(q.dim());
                let mut gr = Mat::zeros(r.dim());
                for (b, &(start, len)) in segs.iter().enumerate() {
                    for k in 0..len {
                        let ge = g[[b, k]];
                        gq.row_mut(b).scaled_add(ge, &r.row(start + k));
                        gr.row_mut(start + k).scaled_add(ge, &q.row(b));
                    }
                }
                self.accumulate(*query, &gq);
                self.accumulate(*records, &gr);
            }
            Op::AttnContext { weights, records, segs } => {
                let w = self.nodes[weights.0].value.clone();
                let r = self.nodes[records.0].value.clone();
                let mut gw = Mat::zeros(w.dim());
                let mut gr = Mat::zeros(r.dim());
                for (b, &(start, len)) in segs.iter().enumerate() {
                    for k in 0..len {
                        gw[[b, k]] = g.row(b).dot(&r.row(start + k));
                        gr.row_mut(start + k).scaled_add(w[[b, k]], &g.row(b));
                    }
                }
                self.accumulate(*weights, &gw);
                self.accumulate(*records, &gr);
            }
            Op::LogSumExpCols(x) => {
                let xv = &self.nodes[x.0].value;
                let y = &self.nodes[idx].value;
                let gx = Mat::from_shape_fn(xv.dim(), |(i, j)| {
                    g[[i, 0]] * (xv[[i, j]] - y[[i, 0]]).exp()
                });
                self.accumulate(*x, &gx);
            }
            Op::DiagCol(x) => {
                let mut gx = Mat::zeros(self.nodes[x.0].value.dim());
                for i in 0..gx.nrows() {
                    gx[[i, i]] = g[[i, 0]];
                }
                self.accumulate(*x, &gx);
            }
            Op::PairGaussLogProb { sample, mean, log_var } => {
                let sv = self.nodes[sample.0].value.clone();
                let mv = self.nodes[mean.0].value.clone();
                let lv = self.nodes[log_var.0].value.clone();
                let (b, d) = sv.dim();
                let mut gs = Mat::zeros((b, d));
                let mut gm = Mat::zeros((b, d));
                let mut gl = Mat::zeros((b, d));
                for i in 0..b {
                    for j in 0..b {
                        let ge = g[[i, j]];
                        if ge == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let inv_var = (-lv[[j, k]]).exp();
                            let diff = sv[[i, k]] - mv[[j, k]];
                            gs[[i, k]] += ge * (-diff * inv_var);
                            gm[[j, k]] += ge * (diff * inv_var);
                            gl[[j, k]] += ge * (-0.5) * (1.0 - diff * diff * inv_var);
                        }
                    }
                }
                self.accumulate(*sample, &gs);
                self.accumulate(*mean, &gm);
                self.accumulate(*log_var, &gl);
            }
        }
        self.nodes[idx].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::rng::NoiseSource;

    /// Central finite difference of `f` at `x`, matched against `analytic`.
    fn check_grad(
        x: &Mat,
        analytic: &Mat,
        mut f: impl FnMut(&Mat) -> f64,
        tol: f64,
    ) {
        let h = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let num = (f(&xp) - f(&xm)) / (2.0 * h);
                let ana = analytic[[i, j]];
                let denom = num.abs().max(ana.abs()).max(1e-8);
                assert!(
                    (num - ana).abs() / denom < tol,
                    "grad mismatch at ({i},{j}): numeric {num}, analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn matmul_add_tanh_grads_match_fd() {
        let mut rng = stream(3, "fd");
        let a0 = rng.standard_normal(3, 4);
        let b0 = rng.standard_normal(4, 2);
        let bias0 = rng.standard_normal(1, 2);

        let eval = |a: &Mat, b: &Mat, bias: &Mat| -> (f64, Mat, Mat, Mat) {
            let mut g = Graph::new();
            let ta = g.param(a.clone());
            let tb = g.param(b.clone());
            let tbias = g.param(bias.clone());
            let mm = g.matmul(ta, tb);
            let biased = g.add_row(mm, tbias);
            let act = g.tanh(biased);
            let sq = g.square(act);
            let loss = g.sum_all(sq);
            g.backward(loss);
            (
                g.scalar_value(loss),
                g.grad(ta).unwrap().clone(),
                g.grad(tb).unwrap().clone(),
                g.grad(tbias).unwrap().clone(),
            )
        };
        let (_, ga, gb, gbias) = eval(&a0, &b0, &bias0);
        check_grad(&a0, &ga, |a| eval(a, &b0, &bias0).0, 1e-5);
        check_grad(&b0, &gb, |b| eval(&a0, b, &bias0).0, 1e-5);
        check_grad(&bias0, &gbias, |bias| eval(&a0, &b0, bias).0, 1e-5);
    }

    #[test]
    fn log_softmax_pick_grads_match_fd() {
        let mut rng = stream(4, "fd");
        let x0 = rng.standard_normal(3, 5);
        let ids = vec![1usize, 4, 0];
        let eval = |x: &Mat| -> (f64, Mat) {
            let mut g = Graph::new();
            let tx = g.param(x.clone());
            let ls = g.log_softmax(tx);
            let picked = g.pick_per_row(ls, &ids);
            let loss = g.sum_all(picked);
            let loss = g.neg(loss);
            g.backward(loss);
            (g.scalar_value(loss), g.grad(tx).unwrap().clone())
        };
        let (_, gx) = eval(&x0);
        check_grad(&x0, &gx, |x| eval(x).0, 1e-5);
    }

    #[test]
    fn log_softmax_rows_are_proper_distributions() {
        let mut rng = stream(5, "ls");
        let x = rng.standard_normal(6, 9);
        let mut g = Graph::new();
        let tx = g.constant(x);
        let ls = g.log_softmax(tx);
        for row in g.value(ls).rows() {
            let total: f64 = row.iter().map(|e| e.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_and_attention_grads_match_fd() {
        let mut rng = stream(6, "fd");
        let records0 = rng.standard_normal(5, 3);
        let query0 = rng.standard_normal(2, 3);
        let segs: Segments = vec![(0, 3), (3, 2)];
        let eval = |records: &Mat, query: &Mat| -> (f64, Mat, Mat) {
            let mut g = Graph::new();
            let tr = g.param(records.clone());
            let tq = g.param(query.clone());
            let pooled = g.segment_max(tr, &segs);
            let scores = g.attn_scores(tq, tr, &segs);
            let lens: Vec<usize> = segs.iter().map(|&(_, l)| l).collect();
            let weights = g.masked_softmax(scores, &lens);
            let ctx = g.attn_context(weights, tr, &segs);
            let joined = g.concat_cols(&[pooled, ctx]);
            let act = g.tanh(joined);
            let loss = g.sum_all(act);
            g.backward(loss);
            (
                g.scalar_value(loss),
                g.grad(tr).unwrap().clone(),
                g.grad(tq).unwrap().clone(),
            )
        };
        let (_, gr, gq) = eval(&records0, &query0);
        check_grad(&records0, &gr, |r| eval(r, &query0).0, 1e-5);
        check_grad(&query0, &gq, |q| eval(&records0, q).0, 1e-5);
    }

    #[test]
    fn gather_scatter_adds_repeated_rows() {
        let table0 = Mat::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f64);
        let ids = vec![2usize, 2, 0];
        let mut g = Graph::new();
        let tt = g.param(table0.clone());
        let rows = g.gather(tt, &ids);
        let loss = g.sum_all(rows);
        g.backward(loss);
        let gt = g.grad(tt).unwrap();
        assert_eq!(gt[[2, 0]], 2.0);
        assert_eq!(gt[[0, 1]], 1.0);
        assert_eq!(gt[[1, 0]], 0.0);
    }

    #[test]
    fn pair_gauss_log_prob_matches_direct_density_and_fd() {
        let mut rng = stream(7, "fd");
        let v0 = rng.standard_normal(3, 2);
        let mu0 = rng.standard_normal(3, 2);
        let lv0 = rng.standard_normal(3, 2);

        // Direct density check against a scalar formula.
        {
            let mut g = Graph::new();
            let tv = g.constant(v0.clone());
            let tm = g.constant(mu0.clone());
            let tl = g.constant(lv0.clone());
            let m = g.pair_gauss_log_prob(tv, tm, tl);
            for i in 0..3 {
                for j in 0..3 {
                    let mut expect = 0.0;
                    for k in 0..2 {
                        let var = lv0[[j, k]].exp();
                        let diff = v0[[i, k]] - mu0[[j, k]];
                        expect += -0.5
                            * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var);
                    }
                    assert!((g.value(m)[[i, j]] - expect).abs() < 1e-12);
                }
            }
        }

        let eval = |v: &Mat, mu: &Mat, lv: &Mat| -> (f64, Mat, Mat, Mat) {
            let mut g = Graph::new();
            let tv = g.param(v.clone());
            let tm = g.param(mu.clone());
            let tl = g.param(lv.clone());
            let m = g.pair_gauss_log_prob(tv, tm, tl);
            let lse = g.log_sum_exp_cols(m);
            let d = g.diag_col(m);
            let gap = g.sub(d, lse);
            let loss = g.mean_all(gap);
            g.backward(loss);
            (
                g.scalar_value(loss),
                g.grad(tv).unwrap().clone(),
                g.grad(tm).unwrap().clone(),
                g.grad(tl).unwrap().clone(),
            )
        };
        let (_, gv, gm, gl) = eval(&v0, &mu0, &lv0);
        check_grad(&v0, &gv, |v| eval(v, &mu0, &lv0).0, 1e-5);
        check_grad(&mu0, &gm, |mu| eval(&v0, mu, &lv0).0, 1e-5);
        check_grad(&lv0, &gl, |lv| eval(&v0, &mu0, lv).0, 1e-5);
    }

    #[test]
    fn slice_concat_round_trip_preserves_gradient() {
        let mut rng = stream(8, "fd");
        let x0 = rng.standard_normal(2, 6);
        let mut g = Graph::new();
        let tx = g.param(x0.clone());
        let a = g.slice_cols(tx, 0, 2);
        let b = g.slice_cols(tx, 2, 6);
        let back = g.concat_cols(&[a, b]);
        let sq = g.square(back);
        let loss = g.sum_all(sq);
        g.backward(loss);
        let expect = x0.mapv(|e| 2.0 * e);
        let got = g.grad(tx).unwrap();
        assert!(got.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Mat::from_elem((2, 2), 3.0));
        let p = g.param(Mat::from_elem((2, 2), 1.0));
        let y = g.mul(c, p);
        let loss = g.sum_all(y);
        g.backward(loss);
        assert!(g.grad(c).is_none());
        assert!(g.grad(p).is_some());
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let x0 = Mat::from_shape_vec((1, 3), vec![-12.0, 0.5, 11.0]).unwrap();
        let mut g = Graph::new();
        let tx = g.param(x0);
        let y = g.clamp(tx, -10.0, 10.0);
        let loss = g.sum_all(y);
        g.backward(loss);
        let gx = g.grad(tx).unwrap();
        assert_eq!(gx[[0, 0]], 0.0);
        assert_eq!(gx[[0, 1]], 1.0);
        assert_eq!(gx[[0, 2]], 0.0);
    }
}
