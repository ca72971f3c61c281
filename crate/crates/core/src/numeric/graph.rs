use std::collections::BTreeMap;

use super::{gemm, ParamId, ParamStore, ShapeMismatch, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    SegmentMean(Var, Vec<usize>),
    SegmentExpand(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        q_off: Vec<usize>,
        k_off: Vec<usize>,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    Pick(Var, Vec<usize>),
    Grl(Var, f64),
    NormalizeRows(Var, Vec<f64>),
    SoftEce {
        conf: Var,
        correct: Vec<f64>,
        bins: usize,
        sums: Vec<f64>,
    },
}

enum Data {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    data: Data,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations. Parameters are read from the store by reference.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, Var>,
}

/// Gradients from one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        let (r, c) = self.shapes[v.0];
        self.nodes[v.0].as_ref().map(|g| Tensor::new(r, c, g.clone()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .get(&id)
            .and_then(|v| self.nodes[v.0].as_deref())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    /// Global L2 norm over parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|v| self.nodes[v.0].as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> ShapeMismatch {
    ShapeMismatch { op, lhs: a, rhs: b }
}

fn check_offsets(off: &[usize], rows: usize, op: &'static str) -> Result<(), ShapeMismatch> {
    let ok = off.first() == Some(&0)
        && off.last() == Some(&rows)
        && off.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(mismatch(op, (off.len(), off.last().copied().unwrap_or(0)), (rows, 0)))
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(z) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Hat memberships over `bins` evenly spaced centers; they sum to one
/// for every input in [0, 1]. Returns (memberships, d membership / d conf).
pub(crate) fn hat_memberships(c: f64, bins: usize) -> (Vec<f64>, Vec<f64>) {
    let w = 1.0 / bins as f64;
    let lo = 0.5 * w;
    let hi = 1.0 - 0.5 * w;
    let clamped = !(lo..=hi).contains(&c);
    let u = c.clamp(lo, hi);
    let mut m = vec![0.0; bins];
    let mut dm = vec![0.0; bins];
    for b in 0..bins {
        let center = (b as f64 + 0.5) * w;
        let d = (u - center) / w;
        if d.abs() < 1.0 {
            m[b] = 1.0 - d.abs();
            if !clamped {
                dm[b] = -d.signum() / w;
            }
        }
    }
    (m, dm)
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].data {
            Data::Owned(t) => t,
            Data::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, t: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            data: Data::Owned(t),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf with gradient tracking.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            data: Data::Param(id),
            op: Op::Leaf,
            requires_grad: self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Looks a parameter up by name; panics on unknown names.
    pub fn p(&mut self, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| f(v)).collect());
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    fn binary_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, ShapeMismatch> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(name, x.shape(), y.shape()));
        }
        let t = Tensor::new(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeMismatch> {
        let t = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeMismatch> {
        self.binary_same(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeMismatch> {
        self.binary_same(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeMismatch> {
        self.binary_same(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    /// `a` (n×c) plus a 1×c row broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, ShapeMismatch> {
        self.row_op(a, row, "add_row", |x, r| x + r, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, ShapeMismatch> {
        self.row_op(a, row, "mul_row", |x, r| x * r, Op::MulRow(a, row))
    }

    fn row_op(
        &mut self,
        a: Var,
        row: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, ShapeMismatch> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows != 1 || r.cols != x.cols {
            return Err(mismatch(name, x.shape(), r.shape()));
        }
        let mut t = x.clone();
        for chunk in t.data.chunks_mut(x.cols.max(1)) {
            for (v, &b) in chunk.iter_mut().zip(&r.data) {
                *v = f(*v, b);
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, op, rg))
    }

    /// `a` (n×c) times an n×1 column broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, ShapeMismatch> {
        let (x, c) = (self.value(a), self.value(col));
        if c.cols != 1 || c.rows != x.rows {
            return Err(mismatch("mul_col", x.shape(), c.shape()));
        }
        let mut t = x.clone();
        for (r, chunk) in t.data.chunks_mut(x.cols.max(1)).enumerate() {
            for v in chunk.iter_mut() {
                *v *= c.data[r];
            }
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(t, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu(x).0, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Elementwise power; inputs must be positive unless `p` is an integer.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut t = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            softmax_row(x.row_slice(r), &mut t.data[r * x.cols..(r + 1) * x.cols]);
        }
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut sm = vec![0.0; x.len()];
        let mut t = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let z = x.row_slice(r);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..x.cols {
                let i = r * x.cols + c;
                t.data[i] = z[c] - lse;
                sm[i] = t.data[i].exp();
            }
        }
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmaxRows(a, sm), rg)
    }

    /// Row-wise normalization with learned 1×c scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, ShapeMismatch> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols;
        if g.shape() != (1, c) || b.shape() != (1, c) {
            return Err(mismatch("layer_norm", xv.shape(), g.shape()));
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; xv.rows];
        let mut t = Tensor::zeros(xv.rows, c);
        for r in 0..xv.rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                t.data[r * c + j] = h * g.data[j] + b.data[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, ShapeMismatch> {
        let tv = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= tv.rows) {
            return Err(mismatch("gather_rows", tv.shape(), (bad, 0)));
        }
        let c = tv.cols;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(tv.row_slice(i));
        }
        let t = Tensor::new(idx.len(), c, data);
        let rg = self.rg(table);
        Ok(self.push(t, Op::GatherRows(table, idx.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, ShapeMismatch> {
        let c = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols != c {
                return Err(mismatch("concat_rows", (rows, c), pv.shape()));
            }
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(rows, c, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, ShapeMismatch> {
        let r = self.value(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows != r {
                return Err(mismatch("concat_cols", (r, cols), pv.shape()));
            }
            cols += pv.cols;
        }
        let mut t = Tensor::zeros(r, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            for i in 0..r {
                t.data[i * cols + off..i * cols + off + pv.cols].copy_from_slice(pv.row_slice(i));
            }
            off += pv.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, ShapeMismatch> {
        let x = self.value(a);
        if start + len > x.rows {
            return Err(mismatch("slice_rows", x.shape(), (start, len)));
        }
        let t = Tensor::new(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, ShapeMismatch> {
        let x = self.value(a);
        if start + len > x.cols {
            return Err(mismatch("slice_cols", x.shape(), (start, len)));
        }
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(x.rows, len, data), Op::SliceCols(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column means: n×c → 1×c.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut t = Tensor::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in t.data.iter_mut().zip(x.row_slice(r)) {
                *o += v;
            }
        }
        let n = x.rows.max(1) as f64;
        t.data.iter_mut().for_each(|v| *v /= n);
        let rg = self.rg(a);
        self.push(t, Op::MeanRows(a), rg)
    }

    /// Row sums: n×c → n×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::col((0..x.rows).map(|r| x.row_slice(r).iter().sum()).collect());
        let rg = self.rg(a);
        self.push(t, Op::SumCols(a), rg)
    }

    /// L1 distance averaged over elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var, ShapeMismatch> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Mean over each row segment: rows off[b]..off[b+1] become row b.
    pub fn segment_mean(&mut self, a: Var, off: &[usize]) -> Result<Var, ShapeMismatch> {
        let x = self.value(a);
        check_offsets(off, x.rows, "segment_mean")?;
        let nseg = off.len() - 1;
        let mut t = Tensor::zeros(nseg, x.cols);
        for s in 0..nseg {
            let n = (off[s + 1] - off[s]).max(1) as f64;
            for r in off[s]..off[s + 1] {
                for (j, v) in x.row_slice(r).iter().enumerate() {
                    t.data[s * x.cols + j] += v / n;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::SegmentMean(a, off.to_vec()), rg))
    }

    /// Repeats row b of `a` across rows off[b]..off[b+1].
    pub fn segment_expand(&mut self, a: Var, off: &[usize]) -> Result<Var, ShapeMismatch> {
        let x = self.value(a);
        if off.len() != x.rows + 1 {
            return Err(mismatch("segment_expand", x.shape(), (off.len(), 0)));
        }
        check_offsets(off, *off.last().unwrap_or(&0), "segment_expand")?;
        let n = *off.last().unwrap_or(&0);
        let mut t = Tensor::zeros(n, x.cols);
        for s in 0..x.rows {
            for r in off[s]..off[s + 1] {
                t.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(x.row_slice(s));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::SegmentExpand(a, off.to_vec()), rg))
    }

    /// Scaled dot-product multi-head attention applied independently per
    /// segment. Query segment b attends to key segment b. With `causal`,
    /// segment lengths must agree and position i sees keys 0..=i.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_off: &[usize],
        k_off: &[usize],
        heads: usize,
        causal: bool,
    ) -> Result<Var, ShapeMismatch> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        if kv.cols != d || vv.shape() != kv.shape() || heads == 0 || d % heads != 0 {
            return Err(mismatch("attention", qv.shape(), kv.shape()));
        }
        check_offsets(q_off, qv.rows, "attention")?;
        check_offsets(k_off, kv.rows, "attention")?;
        if q_off.len() != k_off.len() {
            return Err(mismatch("attention", (q_off.len(), 0), (k_off.len(), 0)));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows, d);
        let mut probs = Vec::new();
        for s in 0..q_off.len() - 1 {
            let (q0, nq) = (q_off[s], q_off[s + 1] - q_off[s]);
            let (k0, nk) = (k_off[s], k_off[s + 1] - k_off[s]);
            if causal && nq != nk {
                return Err(mismatch("attention(causal)", (nq, 0), (nk, 0)));
            }
            for h in 0..heads {
                let c0 = h * dh;
                let mut scores = vec![0.0; nk];
                let mut p = vec![0.0; nk];
                for i in 0..nq {
                    let qi = &qv.row_slice(q0 + i)[c0..c0 + dh];
                    let lim = if causal { i + 1 } else { nk };
                    for j in 0..nk {
                        scores[j] = if j < lim {
                            let kj = &kv.row_slice(k0 + j)[c0..c0 + dh];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    if nk > 0 {
                        softmax_row(&scores, &mut p);
                    }
                    let orow = &mut out.data[(q0 + i) * d + c0..(q0 + i) * d + c0 + dh];
                    for j in 0..nk {
                        if p[j] != 0.0 {
                            let vj = &vv.row_slice(k0 + j)[c0..c0 + dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += p[j] * x;
                            }
                        }
                    }
                    probs.extend_from_slice(&p);
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                q_off: q_off.to_vec(),
                k_off: k_off.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights recorded by an attention node, per segment and
    /// head, as row-major nq×nk blocks in segment-major order.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Per-row cross-entropy of `logits` against class `targets`: n×1.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, ShapeMismatch> {
        let z = self.value(logits);
        if targets.len() != z.rows || targets.iter().any(|&t| t >= z.cols) {
            return Err(mismatch("cross_entropy", z.shape(), (targets.len(), 0)));
        }
        let mut sm = vec![0.0; z.len()];
        let mut out = Vec::with_capacity(z.rows);
        for r in 0..z.rows {
            let row = z.row_slice(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            for c in 0..z.cols {
                sm[r * z.cols + c] = (row[c] - lse).exp();
            }
            out.push(lse - row[targets[r]]);
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::col(out), Op::CrossEntropy(logits, targets.to_vec(), sm), rg))
    }

    /// Selects one column per row: n×c → n×1.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var, ShapeMismatch> {
        let x = self.value(a);
        if idx.len() != x.rows || idx.iter().any(|&i| i >= x.cols) {
            return Err(mismatch("pick", x.shape(), (idx.len(), 0)));
        }
        let t = Tensor::col(idx.iter().enumerate().map(|(r, &c)| x.at(r, c)).collect());
        let rg = self.rg(a);
        Ok(self.push(t, Op::Pick(a, idx.to_vec()), rg))
    }

    /// Identity forward; backward multiplies the gradient by -lambda.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Var {
        let t = self.value(a).clone();
        let rg = self.rg(a);
        self.push(t, Op::Grl(a, lambda), rg)
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut t = x.clone();
        let mut norms = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let n = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            for v in &mut t.data[r * x.cols..(r + 1) * x.cols] {
                *v /= n;
            }
        }
        let rg = self.rg(a);
        self.push(t, Op::NormalizeRows(a, norms), rg)
    }

    /// Differentiable calibration gap: hat-function soft binning of
    /// confidences, then sum over bins of |sum(correct - conf)| / n.
    pub fn soft_ece(&mut self, conf: Var, correct: &[f64], bins: usize) -> Result<Var, ShapeMismatch> {
        let c = self.value(conf);
        if c.cols != 1 || c.rows != correct.len() || bins == 0 {
            return Err(mismatch("soft_ece", c.shape(), (correct.len(), 1)));
        }
        let n = c.rows.max(1) as f64;
        let mut sums = vec![0.0; bins];
        for (i, &a) in correct.iter().enumerate() {
            let (m, _) = hat_memberships(c.data[i], bins);
            for b in 0..bins {
                sums[b] += m[b] * (a - c.data[i]);
            }
        }
        let loss = sums.iter().map(|s| s.abs()).sum::<f64>() / n;
        let rg = self.rg(conf);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftEce {
                conf,
                correct: correct.to_vec(),
                bins,
                sums,
            },
            rg,
        ))
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients {
            nodes: grads,
            shapes: (0..self.nodes.len()).map(|i| self.shape(Var(i))).collect(),
            params: self.param_nodes.clone(),
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(false, true, m, n, k, 1.0, gy, &bv.data, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(true, false, k, m, n, 1.0, &av.data, gy, 1.0, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (y.rows, y.cols);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += gy[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.acc(grads, *v) {
                        add_into(g, gy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, *b) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(g) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        g[j] += gy[j] * bv.data[j];
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        g[j] += gy[j] * av.data[j];
                    }
                }
            }
            Op::AddRow(a, row) => {
                let c = y.cols.max(1);
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gy);
                }
                if let Some(g) = self.acc(grads, *row) {
                    for ch in gy.chunks(c) {
                        add_into(g, ch);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let c = y.cols.max(1);
                let (av, rv) = (self.value(*a), self.value(*row));
                if let Some(g) = self.acc(grads, *a) {
                    for (j, gv) in g.iter_mut().enumerate() {
                        *gv += gy[j] * rv.data[j % c];
                    }
                }
                if let Some(g) = self.acc(grads, *row) {
                    for (j, d) in gy.iter().enumerate() {
                        g[j % c] += d * av.data[j];
                    }
                }
            }
            Op::MulCol(a, col) => {
                let c = y.cols.max(1);
                let (av, cv) = (self.value(*a), self.value(*col));
                if let Some(g) = self.acc(grads, *a) {
                    for (j, gv) in g.iter_mut().enumerate() {
                        *gv += gy[j] * cv.data[j / c];
                    }
                }
                if let Some(g) = self.acc(grads, *col) {
                    for (j, d) in gy.iter().enumerate() {
                        g[j / c] += d * av.data[j];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * s);
                }
            }
            Op::AddScalar(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    add_into(g, gy);
                }
            }
            Op::Exp(a) => self.elementwise(grads, *a, &y.data, gy, |_, y| y),
            Op::Log(a) => self.elementwise(grads, *a, &y.data, gy, |x, _| 1.0 / x),
            Op::Tanh(a) => self.elementwise(grads, *a, &y.data, gy, |_, y| 1.0 - y * y),
            Op::Sigmoid(a) => self.elementwise(grads, *a, &y.data, gy, |_, y| y * (1.0 - y)),
            Op::Gelu(a) => self.elementwise(grads, *a, &y.data, gy, |x, _| gelu(x).1),
            Op::Relu(a) => self.elementwise(grads, *a, &y.data, gy, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Abs(a) => self.elementwise(grads, *a, &y.data, gy, |x, _| x.signum() * (x != 0.0) as u8 as f64),
            Op::Powf(a, p) => {
                let p = *p;
                self.elementwise(grads, *a, &y.data, gy, move |x, _| p * x.powf(p - 1.0))
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols;
                if let Some(g) = self.acc(grads, *a) {
                    for r in 0..y.rows {
                        let yr = &y.data[r * c..(r + 1) * c];
                        let gr = &gy[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a, sm) => {
                let c = y.cols;
                if let Some(g) = self.acc(grads, *a) {
                    for r in 0..y.rows {
                        let gr = &gy[r * c..(r + 1) * c];
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            g[r * c + j] += gr[j] - sm[r * c + j] * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = y.cols;
                let gv = self.value(*gamma).data.clone();
                if let Some(g) = self.acc(grads, *gamma) {
                    for (j, d) in gy.iter().enumerate() {
                        g[j % c] += d * xhat[j];
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for (j, d) in gy.iter().enumerate() {
                        g[j % c] += d;
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    let nf = c as f64;
                    for r in 0..y.rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = gy[r * c + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * c + j];
                        }
                        for j in 0..c {
                            let dh = gy[r * c + j] * gv[j];
                            g[r * c + j] +=
                                inv_std[r] / nf * (nf * dh - s1 - xhat[r * c + j] * s2);
                        }
                    }
                }
            }
            Op::GatherRows(table, idx) => {
                let c = y.cols;
                if let Some(g) = self.acc(grads, *table) {
                    for (r, &row) in idx.iter().enumerate() {
                        add_into(&mut g[row * c..(row + 1) * c], &gy[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(g) = self.acc(grads, *p) {
                        add_into(g, &gy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let cols = y.cols;
                let mut off = 0;
                for p in parts {
                    let pc = self.value(*p).cols;
                    if let Some(g) = self.acc(grads, *p) {
                        for r in 0..y.rows {
                            add_into(
                                &mut g[r * pc..(r + 1) * pc],
                                &gy[r * cols + off..r * cols + off + pc],
                            );
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceRows(a, start) => {
                let c = y.cols;
                if let Some(g) = self.acc(grads, *a) {
                    add_into(&mut g[start * c..start * c + gy.len()], gy);
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.value(*a).cols;
                let len = y.cols;
                if let Some(g) = self.acc(grads, *a) {
                    for r in 0..y.rows {
                        add_into(
                            &mut g[r * ac + start..r * ac + start + len],
                            &gy[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().for_each(|v| *v += gy[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    let d = gy[0] / g.len().max(1) as f64;
                    g.iter_mut().for_each(|v| *v += d);
                }
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (r, c) = (av.rows, av.cols.max(1));
                if let Some(g) = self.acc(grads, *a) {
                    for (j, v) in g.iter_mut().enumerate() {
                        *v += gy[j % c] / r.max(1) as f64;
                    }
                }
            }
            Op::SumCols(a) => {
                let c = self.value(*a).cols.max(1);
                if let Some(g) = self.acc(grads, *a) {
                    for (j, v) in g.iter_mut().enumerate() {
                        *v += gy[j / c];
                    }
                }
            }
            Op::SegmentMean(a, off) => {
                let c = y.cols;
                if let Some(g) = self.acc(grads, *a) {
                    for s in 0..off.len() - 1 {
                        let n = (off[s + 1] - off[s]).max(1) as f64;
                        for r in off[s]..off[s + 1] {
                            for j in 0..c {
                                g[r * c + j] += gy[s * c + j] / n;
                            }
                        }
                    }
                }
            }
            Op::SegmentExpand(a, off) => {
                let c = y.cols;
                if let Some(g) = self.acc(grads, *a) {
                    for s in 0..off.len() - 1 {
                        for r in off[s]..off[s + 1] {
                            add_into(&mut g[s * c..(s + 1) * c], &gy[r * c..(r + 1) * c]);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                q_off,
                k_off,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, q_off, k_off, *heads, probs, gy, grads),
            Op::CrossEntropy(a, targets, sm) => {
                let c = self.value(*a).cols;
                if let Some(g) = self.acc(grads, *a) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * c + j] += gy[r] * (sm[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Pick(a, idx) => {
                let c = self.value(*a).cols;
                if let Some(g) = self.acc(grads, *a) {
                    for (r, &j) in idx.iter().enumerate() {
                        g[r * c + j] += gy[r];
                    }
                }
            }
            Op::Grl(a, lambda) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= lambda * d);
                }
            }
            Op::NormalizeRows(a, norms) => {
                let c = y.cols;
                if let Some(g) = self.acc(grads, *a) {
                    for r in 0..y.rows {
                        let yr = &y.data[r * c..(r + 1) * c];
                        let gr = &gy[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[r * c + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::SoftEce {
                conf,
                correct,
                bins,
                sums,
            } => {
                let cv = self.value(*conf);
                let n = cv.rows.max(1) as f64;
                if let Some(g) = self.acc(grads, *conf) {
                    for (i, &a) in correct.iter().enumerate() {
                        let ci = cv.data[i];
                        let (m, dm) = hat_memberships(ci, *bins);
                        let mut d = 0.0;
                        for b in 0..*bins {
                            d += sums[b].signum() * (dm[b] * (a - ci) - m[b]);
                        }
                        g[i] += gy[0] * d / n;
                    }
                }
            }
        }
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        y: &[f64],
        gy: &[f64],
        df: impl Fn(f64, f64) -> f64,
    ) {
        let x = &self.value(a).data;
        if let Some(g) = self.acc(grads, a) {
            for j in 0..g.len() {
                g[j] += gy[j] * df(x[j], y[j]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        q_off: &[usize],
        k_off: &[usize],
        heads: usize,
        probs: &[f64],
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut pi = 0;
        for s in 0..q_off.len() - 1 {
            let (q0, nq) = (q_off[s], q_off[s + 1] - q_off[s]);
            let (k0, nk) = (k_off[s], k_off[s + 1] - k_off[s]);
            for h in 0..heads {
                let c0 = h * dh;
                let mut dp = vec![0.0; nk];
                for i in 0..nq {
                    let p = &probs[pi..pi + nk];
                    pi += nk;
                    let go = &gy[(q0 + i) * d + c0..(q0 + i) * d + c0 + dh];
                    for j in 0..nk {
                        let vj = &vv.data[(k0 + j) * d + c0..(k0 + j) * d + c0 + dh];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        if p[j] != 0.0 {
                            for t in 0..dh {
                                gv[(k0 + j) * d + c0 + t] += p[j] * go[t];
                            }
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..nk {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            gq[(q0 + i) * d + c0 + t] += ds * kv.data[(k0 + j) * d + c0 + t];
                            gk[(k0 + j) * d + c0 + t] += ds * qv.data[(q0 + i) * d + c0 + t];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(g) = self.acc(grads, var) {
                add_into(g, &buf);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
