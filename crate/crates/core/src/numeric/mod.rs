//! Dense f64 tensors, tape-based reverse-mode autodiff, AdamW.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{cosine_lr, AdamW, OptimState};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
pub struct ShapeMismatch {
    pub op: &'static str,
    pub lhs: (usize, usize),
    pub rhs: (usize, usize),
}

/// Row-major matrix. Vectors are 1×n or n×1; scalars are 1×1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(1, n, data)
    }

    pub fn col(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(n, 1, data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let n = Normal::new(0.0, std).expect("std is finite and non-negative");
        Tensor::new(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, b: &Tensor) -> Result<Tensor, ShapeMismatch> {
        if self.cols != b.rows {
            return Err(ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, b.cols);
        gemm(
            false, false, self.rows, self.cols, b.cols, 1.0, &self.data, &b.data, 0.0, &mut out.data,
        );
        Ok(out)
    }
}

/// C = alpha * op(A) op(B) + beta * C where op transposes when requested.
/// A is m×k after op, B is k×n after op, C is m×n; all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // Strides for the logical (untransposed) view.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized m*k, k*n and m*n by the callers; strides
    // describe row-major layouts of exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors with per-parameter trainable flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(true);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Sets the flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, on: bool) -> usize {
        let mut n = 0;
        for (i, name) in self.names.iter().enumerate() {
            if name.starts_with(prefix) {
                self.trainable[i] = on;
                n += 1;
            }
        }
        n
    }

    /// Replaces every tensor present in `other` under the same name.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize, ShapeMismatch> {
        let mut n = 0;
        for (name, t) in other.iter() {
            if let Some(id) = self.id(name) {
                let dst = self.get_mut(id);
                if dst.shape() != t.shape() {
                    return Err(ShapeMismatch {
                        op: "load_from",
                        lhs: dst.shape(),
                        rhs: t.shape(),
                    });
                }
                dst.data.copy_from_slice(&t.data);
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data, vec![4.0, 5.0, 10.0, 11.0]);
        let at = a.transpose();
        let mut out = vec![0.0; 4];
        gemm(true, false, 2, 3, 2, 1.0, &at.data, &b.data, 0.0, &mut out);
        assert_eq!(out, c.data);
        let bt = b.transpose();
        gemm(false, true, 2, 3, 2, 1.0, &a.data, &bt.data, 0.0, &mut out);
        assert_eq!(out, c.data);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn store_flags() {
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::zeros(2, 2));
        s.add("head.w", Tensor::zeros(2, 2));
        assert_eq!(s.set_trainable("enc.", false), 1);
        assert!(!s.is_trainable(s.id("enc.w").unwrap()));
        assert!(s.is_trainable(s.id("head.w").unwrap()));
    }
}

#[cfg(test)]
mod kernel_tests;
