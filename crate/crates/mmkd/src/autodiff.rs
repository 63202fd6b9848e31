//! Tape-based reverse-mode automatic differentiation over `f64` matrices.
//!
//! Every value on a [`Tape`] is a dense `[rows x cols]` matrix; scalars are
//! `[1 x 1]`. The tape records operations eagerly (define-by-run) and
//! [`Tape::grad`] emits the backward pass as *new tape nodes*, so gradients
//! are themselves differentiable. That property is what makes exact
//! Hessian-vector products and hypergradients through recorded optimizer
//! steps possible without ever materializing a Jacobian.
//!
//! The op set is deliberately small: matrix product, elementwise arithmetic,
//! ReLU, row softmax, clamped log, reductions, column concat/slice, and an
//! index gather/scatter pair that covers im2col-style convolution lowering
//! and layout permutations. Each op's backward rule is itself expressed in
//! these ops, so the set is closed under differentiation.

use std::rc::Rc;

use ndarray::{concatenate, Array2, Axis};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Precomputed flat-index map for [`Tape::gather`] / [`Tape::scatter_add`].
///
/// Entry `idx[r * cols + c]` is the flat row-major index into the source
/// matrix, or `-1` to read a zero (used for implicit padding).
#[derive(Debug)]
pub struct IndexMap {
    pub idx: Vec<i64>,
    pub rows: usize,
    pub cols: usize,
}

impl IndexMap {
    pub fn new(idx: Vec<i64>, rows: usize, cols: usize) -> Rc<Self> {
        assert_eq!(idx.len(), rows * cols, "index map size mismatch");
        Rc::new(Self { idx, rows, cols })
    }
}

#[derive(Clone)]
enum Op {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[m x n] + [1 x n]` row-broadcast (bias add).
    AddRow(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    MaxScalar(Var, f64),
    Recip(Var),
    Ln(Var),
    Sqrt(Var),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    BroadcastCol(Var, usize),
    BroadcastRow(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Inverse of `SliceCols`: place a block into a zero matrix of `total` columns.
    EmbedCols(Var, usize, usize),
    Gather(Var, Rc<IndexMap>),
    /// Adjoint of `Gather`; `(rows, cols)` is the output shape.
    ScatterAdd(Var, Rc<IndexMap>, usize, usize),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    needs_grad: bool,
}

/// Recording tape. Values are computed eagerly as nodes are appended.
pub struct Tape {
    nodes: Vec<Node>,
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
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

    /// Trainable leaf: gradients flow into it.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf { trainable: true }, value, true)
    }

    /// Non-trainable leaf (inputs, labels, frozen teacher outputs).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf { trainable: false }, value, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn dim(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Extract a `[1 x 1]` value as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on non-scalar node");
        a[(0, 0)]
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> Var {
        // Canonicalize to C-order so reductions always sum in the same
        // order; transpose/concatenate otherwise leak F-order layouts and
        // change rounding depending on how a value was produced.
        let value = if value.is_standard_layout() {
            value
        } else {
            let dim = value.dim();
            Array2::from_shape_vec(dim, value.iter().copied().collect()).unwrap()
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, value: Array2<f64>) -> Var {
        let ng = self.needs_grad(a);
        self.push(op, value, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, value: Array2<f64>) -> Var {
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(op, value, ng)
    }

    // ---- primitive ops ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.dim(a);
        let (br, bc) = self.dim(b);
        assert_eq!(ac, br, "matmul shape mismatch: {ar}x{ac} . {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        self.binary(a, b, Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.unary(a, Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        self.binary(a, b, Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        self.binary(a, b, Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        self.binary(a, b, Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.unary(a, Op::Scale(a, c), value)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.dim(a);
        assert_eq!(self.dim(row), (1, n), "add_row expects [1 x {n}] bias");
        let value = self.value(a) + &self.value(row).broadcast((m, n)).unwrap();
        self.binary(a, row, Op::AddRow(a, row), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.unary(a, Op::Relu(a), value)
    }

    /// Numerically stable per-row softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.unary(a, Op::SoftmaxRows(a), value)
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(c));
        self.unary(a, Op::MaxScalar(a, c), value)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / x);
        self.unary(a, Op::Recip(a), value)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.unary(a, Op::Ln(a), value)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        self.unary(a, Op::Sqrt(a), value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.unary(a, Op::SumAll(a), Array2::from_elem((1, 1), s))
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, Op::RowSums(a), value)
    }

    pub fn col_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(a, Op::ColSums(a), value)
    }

    pub fn broadcast_col(&mut self, a: Var, n: usize) -> Var {
        let (m, c) = self.dim(a);
        assert_eq!(c, 1, "broadcast_col expects a column vector");
        let value = self.value(a).broadcast((m, n)).unwrap().to_owned();
        self.unary(a, Op::BroadcastCol(a, n), value)
    }

    pub fn broadcast_row(&mut self, a: Var, m: usize) -> Var {
        let (r, n) = self.dim(a);
        assert_eq!(r, 1, "broadcast_row expects a row vector");
        let src = self.value(a).clone();
        let value = Array2::from_shape_fn((m, n), |(_, j)| src[(0, j)]);
        self.unary(a, Op::BroadcastRow(a, m), value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&v| self.needs_grad(v));
        self.push(Op::ConcatCols(parts.to_vec()), value, ng)
    }

    pub fn slice_cols(&mut self, a: Var, offset: usize, width: usize) -> Var {
        let (_, n) = self.dim(a);
        assert!(offset + width <= n, "slice_cols out of range");
        let value = self
            .value(a)
            .slice(ndarray::s![.., offset..offset + width])
            .to_owned();
        self.unary(a, Op::SliceCols(a, offset, width), value)
    }

    pub fn embed_cols(&mut self, a: Var, offset: usize, total: usize) -> Var {
        let (m, w) = self.dim(a);
        assert!(offset + w <= total, "embed_cols out of range");
        let mut value = Array2::zeros((m, total));
        value
            .slice_mut(ndarray::s![.., offset..offset + w])
            .assign(self.value(a));
        self.unary(a, Op::EmbedCols(a, offset, total), value)
    }

    pub fn gather(&mut self, a: Var, map: Rc<IndexMap>) -> Var {
        let src = flat(self.value(a));
        let mut out = Vec::with_capacity(map.rows * map.cols);
        for &i in &map.idx {
            out.push(if i < 0 { 0.0 } else { src[i as usize] });
        }
        let value = Array2::from_shape_vec((map.rows, map.cols), out).unwrap();
        self.unary(a, Op::Gather(a, map.clone()), value)
    }

    pub fn scatter_add(&mut self, a: Var, map: Rc<IndexMap>, rows: usize, cols: usize) -> Var {
        assert_eq!(self.dim(a), (map.rows, map.cols), "scatter_add shape mismatch");
        let src = flat(self.value(a));
        let mut out = vec![0.0; rows * cols];
        for (j, &i) in map.idx.iter().enumerate() {
            if i >= 0 {
                out[i as usize] += src[j];
            }
        }
        let value = Array2::from_shape_vec((rows, cols), out).unwrap();
        self.unary(a, Op::ScatterAdd(a, map.clone(), rows, cols), value)
    }

    // ---- composites --------------------------------------------------------

    /// Softmax of logits divided by temperature `tau`.
    pub fn softmax_rows_t(&mut self, logits: Var, tau: f64) -> Var {
        assert!(tau > 0.0, "temperature must be positive");
        let scaled = self.scale(logits, 1.0 / tau);
        self.softmax_rows(scaled)
    }

    /// `ln(max(x, floor))`, the clamped log used before every log in a loss.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let clamped = self.max_scalar(a, floor);
        self.ln(clamped)
    }

    /// Frobenius inner product `sum(a * b)` as a `[1 x 1]` node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    pub fn zeros_like(&mut self, v: Var) -> Var {
        let d = self.dim(v);
        self.constant(Array2::zeros(d))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
    ///
    /// The backward pass is appended to the tape as ordinary nodes, so the
    /// returned [`Var`]s can be differentiated again. Leaves without a path
    /// to `output` get a zero gradient of matching shape.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.dim(output), (1, 1), "grad target must be scalar");
        let n = output.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; n];
        let seed = self.constant(Array2::ones((1, 1)));
        adj[output.0] = Some(seed);

        for id in (0..n).rev() {
            let Some(g) = adj[id] else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    if self.needs_grad(a) {
                        let bt = self.transpose(b);
                        let c = self.matmul(g, bt);
                        self.accumulate(&mut adj, a, c);
                    }
                    if self.needs_grad(b) {
                        let at = self.transpose(a);
                        let c = self.matmul(at, g);
                        self.accumulate(&mut adj, b, c);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs_grad(a) {
                        let c = self.transpose(g);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(a) {
                        self.accumulate(&mut adj, a, g);
                    }
                    if self.needs_grad(b) {
                        self.accumulate(&mut adj, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs_grad(a) {
                        self.accumulate(&mut adj, a, g);
                    }
                    if self.needs_grad(b) {
                        let c = self.scale(g, -1.0);
                        self.accumulate(&mut adj, b, c);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs_grad(a) {
                        let c = self.mul(g, b);
                        self.accumulate(&mut adj, a, c);
                    }
                    if self.needs_grad(b) {
                        let c = self.mul(g, a);
                        self.accumulate(&mut adj, b, c);
                    }
                }
                Op::Scale(a, k) => {
                    if self.needs_grad(a) {
                        let c = self.scale(g, k);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs_grad(a) {
                        self.accumulate(&mut adj, a, g);
                    }
                    if self.needs_grad(row) {
                        let c = self.col_sums(g);
                        self.accumulate(&mut adj, row, c);
                    }
                }
                Op::Relu(a) => {
                    if self.needs_grad(a) {
                        let mask = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                        let m = self.constant(mask);
                        let c = self.mul(g, m);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs_grad(a) {
                        let s = Var(id);
                        let gs = self.mul(g, s);
                        let r = self.row_sums(gs);
                        let (_, ncols) = self.dim(s);
                        let rb = self.broadcast_col(r, ncols);
                        let diff = self.sub(g, rb);
                        let c = self.mul(s, diff);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::MaxScalar(a, k) => {
                    if self.needs_grad(a) {
                        let mask = self.value(a).mapv(|x| if x >= k { 1.0 } else { 0.0 });
                        let m = self.constant(mask);
                        let c = self.mul(g, m);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::Recip(a) => {
                    if self.needs_grad(a) {
                        let r = Var(id);
                        let rr = self.mul(r, r);
                        let grr = self.mul(g, rr);
                        let c = self.scale(grr, -1.0);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::Ln(a) => {
                    if self.needs_grad(a) {
                        let ra = self.recip(a);
                        let c = self.mul(g, ra);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::Sqrt(a) => {
                    if self.needs_grad(a) {
                        let s = Var(id);
                        let rs = self.recip(s);
                        let half = self.scale(rs, 0.5);
                        let c = self.mul(g, half);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::SumAll(a) => {
                    if self.needs_grad(a) {
                        let (m, ncols) = self.dim(a);
                        let row = self.broadcast_col(g, ncols);
                        let c = self.broadcast_row(row, m);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::RowSums(a) => {
                    if self.needs_grad(a) {
                        let (_, ncols) = self.dim(a);
                        let c = self.broadcast_col(g, ncols);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::ColSums(a) => {
                    if self.needs_grad(a) {
                        let (m, _) = self.dim(a);
                        let c = self.broadcast_row(g, m);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::BroadcastCol(a, _) => {
                    if self.needs_grad(a) {
                        let c = self.row_sums(g);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::BroadcastRow(a, _) => {
                    if self.needs_grad(a) {
                        let c = self.col_sums(g);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in &parts {
                        let (_, w) = self.dim(p);
                        if self.needs_grad(p) {
                            let c = self.slice_cols(g, offset, w);
                            self.accumulate(&mut adj, p, c);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(a, offset, _) => {
                    if self.needs_grad(a) {
                        let (_, total) = self.dim(a);
                        let c = self.embed_cols(g, offset, total);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::EmbedCols(a, offset, _) => {
                    if self.needs_grad(a) {
                        let (_, w) = self.dim(a);
                        let c = self.slice_cols(g, offset, w);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::Gather(a, map) => {
                    if self.needs_grad(a) {
                        let (m, ncols) = self.dim(a);
                        let c = self.scatter_add(g, map, m, ncols);
                        self.accumulate(&mut adj, a, c);
                    }
                }
                Op::ScatterAdd(a, map, _, _) => {
                    if self.needs_grad(a) {
                        let c = self.gather(g, map);
                        self.accumulate(&mut adj, a, c);
                    }
                }
            }
        }

        wrt.iter()
            .map(|&w| match adj[w.0] {
                Some(v) => v,
                None => self.zeros_like(w),
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contribution: Var) {
        adj[target.0] = Some(match adj[target.0] {
            Some(existing) => self.add(existing, contribution),
            None => contribution,
        });
    }
}
