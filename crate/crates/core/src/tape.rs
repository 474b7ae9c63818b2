//! Dense row-major matrices and a small reverse-mode tape over them.
//!
//! Only the operations the coordination-graph learner needs are provided.
//! Shapes are checked eagerly; a mismatch is a programming error and panics.

use std::rc::Rc;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} vs {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul {:?} x {:?}", self.shape(), b.shape());
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&b.data[k * b.cols..(k + 1) * b.cols]) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Transposes each consecutive `n x n` row block independently.
    pub fn block_transpose(&self, n: usize) -> Mat {
        assert!(self.cols == n && self.rows.is_multiple_of(n));
        let mut out = Mat::zeros(self.rows, n);
        for b in 0..self.rows / n {
            let off = b * n * n;
            for i in 0..n {
                for j in 0..n {
                    out.data[off + j * n + i] = self.data[off + i * n + j];
                }
            }
        }
        out
    }

    /// Multiplies each `n x n` row block of `self` with the matching
    /// `n x c` row block of `b`.
    pub fn block_matmul(&self, b: &Mat, n: usize) -> Mat {
        assert!(self.cols == n && self.rows.is_multiple_of(n) && b.rows == self.rows);
        let c = b.cols;
        let mut out = Mat::zeros(self.rows, c);
        for blk in 0..self.rows / n {
            let base = blk * n;
            for i in 0..n {
                let orow = (base + i) * c;
                for k in 0..n {
                    let a = self.data[(base + i) * n + k];
                    let brow = (base + k) * c;
                    for j in 0..c {
                        out.data[orow + j] += a * b.data[brow + j];
                    }
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Softplus(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Powf(usize, f64),
    Sum(usize),
    RowSum(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    BlockMatMul(usize, usize, usize),
    BlockTranspose(usize, usize),
    ScaleRows(usize, usize),
    /// Value computed outside the tape; no gradient flows to the input.
    Detached,
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.data[0]
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(bias));
        assert_eq!((1, am.cols), bm.shape(), "bias shape");
        let mut v = am.clone();
        for r in 0..v.rows {
            for (x, b) in v.data[r * v.cols..(r + 1) * v.cols].iter_mut().zip(&bm.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a.0, bias.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a.0))
    }

    /// Elementwise power; inputs must be positive for non-integer `p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a.0, p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a.0))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let v = Mat::from_vec(m.rows, 1, data);
        self.push(v, Op::RowSum(a.0))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Mat::from_vec(rows, cols, self.value(a).data.clone());
        self.push(v, Op::Reshape(a.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        assert!(parts.iter().all(|p| self.value(*p).rows == rows), "concat row mismatch");
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start < end && end <= m.cols);
        let w = end - start;
        let mut v = Mat::zeros(m.rows, w);
        for r in 0..m.rows {
            v.data[r * w..(r + 1) * w].copy_from_slice(&m.row(r)[start..end]);
        }
        self.push(v, Op::SliceCols(a.0, start))
    }

    /// Row `r` of the result is row `idx[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let m = self.value(a);
        let mut v = Mat::zeros(idx.len(), m.cols);
        for (r, &src) in idx.iter().enumerate() {
            v.data[r * m.cols..(r + 1) * m.cols].copy_from_slice(m.row(src));
        }
        self.push(v, Op::GatherRows(a.0, idx))
    }

    pub fn block_matmul(&mut self, a: Var, b: Var, n: usize) -> Var {
        let v = self.value(a).block_matmul(self.value(b), n);
        self.push(v, Op::BlockMatMul(a.0, b.0, n))
    }

    pub fn block_transpose(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a).block_transpose(n);
        self.push(v, Op::BlockTranspose(a.0, n))
    }

    /// Multiplies row `r` of `a` by `s[r]`, with `s` a column vector.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (am, sm) = (self.value(a), self.value(s));
        assert_eq!(sm.shape(), (am.rows, 1), "row scale shape");
        let mut v = am.clone();
        for r in 0..v.rows {
            let f = sm.data[r];
            v.data[r * v.cols..(r + 1) * v.cols].iter_mut().for_each(|x| *x *= f);
        }
        self.push(v, Op::ScaleRows(a.0, s.0))
    }

    /// Records `f(value(a))` with no gradient path back to `a`.
    pub fn detached(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        self.push(v, Op::Detached)
    }

    /// Reverse sweep from a scalar output. Returns one optional gradient per
    /// node; nodes not upstream of `out` stay `None`.
    pub fn backward(&self, out: Var) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn backward_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        {
            let node = &self.nodes[idx];
            let val = |i: usize| &self.nodes[i].value;
            let mut acc = |i: usize, d: Mat| match &mut grads[i] {
                Some(e) => e.add_assign(&d),
                slot => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf | Op::Detached => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul(&val(*b).transpose()));
                    acc(*b, val(*a).transpose().matmul(g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip(val(*b), |x, y| x * y));
                    acc(*b, g.zip(val(*a), |x, y| x * y));
                }
                Op::AddRow(a, b) => {
                    let mut db = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*a, g.clone());
                    acc(*b, db);
                }
                Op::Tanh(a) => acc(*a, g.zip(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, g.zip(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Exp(a) => acc(*a, g.zip(&node.value, |x, y| x * y)),
                Op::Softplus(a) => acc(*a, g.zip(val(*a), |x, z| x * sigmoid(z))),
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::Powf(a, p) => acc(*a, g.zip(val(*a), |x, z| x * p * z.powf(p - 1.0))),
                Op::Sum(a) => {
                    let m = val(*a);
                    acc(*a, Mat::filled(m.rows, m.cols, g.data[0]));
                }
                Op::RowSum(a) => {
                    let m = val(*a);
                    let mut d = Mat::zeros(m.rows, m.cols);
                    for r in 0..m.rows {
                        d.data[r * m.cols..(r + 1) * m.cols].iter_mut().for_each(|x| *x = g.data[r]);
                    }
                    acc(*a, d);
                }
                Op::Reshape(a) => {
                    let m = val(*a);
                    acc(*a, Mat::from_vec(m.rows, m.cols, g.data.clone()));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).cols;
                        let mut d = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            d.data[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(p, d);
                    }
                }
                Op::SliceCols(a, start) => {
                    let m = val(*a);
                    let mut d = Mat::zeros(m.rows, m.cols);
                    for r in 0..m.rows {
                        d.data[r * m.cols + start..r * m.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(*a, d);
                }
                Op::GatherRows(a, index) => {
                    let m = val(*a);
                    let mut d = Mat::zeros(m.rows, m.cols);
                    for (r, &src) in index.iter().enumerate() {
                        for (x, y) in d.data[src * m.cols..(src + 1) * m.cols].iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(*a, d);
                }
                Op::BlockMatMul(a, b, n) => {
                    // per block: dA = G B^T, dB = A^T G
                    let (am, bm) = (val(*a), val(*b));
                    let c = bm.cols;
                    let mut da = Mat::zeros(am.rows, *n);
                    for blk in 0..am.rows / n {
                        let base = blk * n;
                        for i in 0..*n {
                            for k in 0..*n {
                                let s: f64 = g.row(base + i).iter().zip(bm.row(base + k)).map(|(x, y)| x * y).sum();
                                da.data[(base + i) * n + k] = s;
                            }
                        }
                    }
                    let db = am.block_transpose(*n).block_matmul(g, *n);
                    debug_assert_eq!(db.cols, c);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::BlockTranspose(a, n) => acc(*a, g.block_transpose(*n)),
                Op::ScaleRows(a, s) => {
                    let (am, sm) = (val(*a), val(*s));
                    let mut da = g.clone();
                    let mut ds = Mat::zeros(sm.rows, 1);
                    for r in 0..g.rows {
                        let f = sm.data[r];
                        da.data[r * g.cols..(r + 1) * g.cols].iter_mut().for_each(|x| *x *= f);
                        ds.data[r] = g.row(r).iter().zip(am.row(r)).map(|(x, y)| x * y).sum();
                    }
                    acc(*a, da);
                    acc(*s, ds);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}
