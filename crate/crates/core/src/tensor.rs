//! Dense d-mode tensors and the unfolding/folding and n-mode-product algebra.
//!
//! Storage is a flat `Vec<f64>` in last-index-fastest (C) order. Mode-n
//! unfolding follows the Kolda column convention: the remaining modes are
//! enumerated in increasing order with the earliest mode varying fastest.
//! Every operation returns a new value; nothing mutates in place.

use crate::{Error, Result};

/// Dense d-mode tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn check_finite(data: &[f64], what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

impl DenseTensor {
    /// Builds a tensor from a shape and flat data in last-index-fastest order.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape must be nonempty with positive sizes, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} (= {} entries)",
                data.len(),
                shape,
                expected
            )));
        }
        check_finite(&data, "DenseTensor::new")?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&idx));
            advance_index(&mut idx, &shape);
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of modes d.
    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.linear_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let li = self.linear_index(idx);
        self.data[li] = v;
    }

    fn linear_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut lin = 0usize;
        for (k, (&i, &n)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(i < n, "index {i} out of bounds for mode {k} of size {n}");
            lin = lin * n + i;
        }
        lin
    }

    /// Reinterprets the flat data under a new shape with the same entry count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Mode-`mode` unfolding (zero-based mode).
    ///
    /// Result has shape `n_mode x prod(n_j, j != mode)`; the column index runs
    /// over the remaining modes in increasing order, earliest varying fastest.
    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        let d = self.order();
        if mode >= d {
            return Err(Error::InvalidMode { mode, order: d });
        }
        let rows = self.shape[mode];
        let cols = self.data.len() / rows;
        let mut out = vec![0.0; self.data.len()];
        let strides = kolda_strides(&self.shape, mode);
        let mut idx = vec![0usize; d];
        for &v in &self.data {
            let mut col = 0;
            for (k, &i) in idx.iter().enumerate() {
                col += i * strides[k];
            }
            out[idx[mode] * cols + col] = v;
            advance_index(&mut idx, &self.shape);
        }
        Ok(Matrix {
            rows,
            cols,
            data: out,
        })
    }

    /// Inverse of [`DenseTensor::unfold`]: folds `m` back along `mode` into `shape`.
    pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<Self> {
        let d = shape.len();
        if mode >= d {
            return Err(Error::InvalidMode { mode, order: d });
        }
        let total: usize = shape.iter().product();
        if m.rows != shape[mode] || m.rows * m.cols != total {
            return Err(Error::ShapeMismatch(format!(
                "matrix {}x{} cannot fold into shape {:?} at mode {}",
                m.rows, m.cols, shape, mode
            )));
        }
        let mut data = vec![0.0; total];
        let strides = kolda_strides(shape, mode);
        let mut idx = vec![0usize; d];
        for slot in data.iter_mut() {
            let mut col = 0;
            for (k, &i) in idx.iter().enumerate() {
                col += i * strides[k];
            }
            *slot = m.data[idx[mode] * m.cols + col];
            advance_index(&mut idx, shape);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// n-mode product: contracts `m` (shape `p x n_mode`) against `mode`.
    ///
    /// The result replaces `n_mode` by `p` and equals
    /// `fold(m * unfold(self, mode), mode, new_shape)`.
    pub fn mode_multiply(&self, m: &Matrix, mode: usize) -> Result<Self> {
        let d = self.order();
        if mode >= d {
            return Err(Error::InvalidMode { mode, order: d });
        }
        if m.cols != self.shape[mode] {
            return Err(Error::ShapeMismatch(format!(
                "mode-{mode} product needs {} columns, matrix has {}",
                self.shape[mode], m.cols
            )));
        }
        let unfolded = self.unfold(mode)?;
        let product = m.matmul(&unfolded);
        let mut new_shape = self.shape.clone();
        new_shape[mode] = m.rows;
        Self::fold(&product, mode, &new_shape)
    }

    /// Applies `mode_multiply` for every supplied factor; distinct modes commute.
    pub fn multi_mode_multiply(&self, factors: &[Option<&Matrix>]) -> Result<Self> {
        if factors.len() != self.order() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} factor slots, got {}",
                self.order(),
                factors.len()
            )));
        }
        let mut out = self.clone();
        for (mode, f) in factors.iter().enumerate() {
            if let Some(m) = f {
                out = out.mode_multiply(m, mode)?;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product; shapes must match.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "inner product shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// self + s * other
    pub fn axpy(&self, s: f64, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + s * b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Column strides of the Kolda unfolding for each mode (stride of `mode` itself
/// is reported as 0 since it indexes rows).
fn kolda_strides(shape: &[usize], mode: usize) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for (k, &n) in shape.iter().enumerate() {
        if k == mode {
            continue;
        }
        strides[k] = acc;
        acc *= n;
    }
    strides
}

/// Odometer increment in last-index-fastest order.
fn advance_index(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        check_finite(&data, "Matrix::new")?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self * other
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul dimension mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        out
    }

    /// self^T * other
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn dimension mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &aki) in arow.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aki * bkj;
                }
            }
        }
        out
    }

    /// self * other^T
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let dot: f64 = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
                out.data[i * other.rows + j] = dot;
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn column_norm(&self, c: usize) -> f64 {
        (0..self.rows)
            .map(|r| {
                let v = self.get(r, c);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// self + s * other
    pub fn axpy(&self, s: f64, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    /// Horizontal concatenation [a | b | ...]; all blocks share the row count.
    pub fn hcat(blocks: &[&Matrix]) -> Matrix {
        assert!(!blocks.is_empty());
        let rows = blocks[0].rows;
        assert!(blocks.iter().all(|b| b.rows == rows), "hcat row mismatch");
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0usize;
            for b in blocks {
                out.data[r * cols + at..r * cols + at + b.cols].copy_from_slice(b.row(r));
                at += b.cols;
            }
        }
        out
    }

    /// First `k` columns.
    pub fn take_columns(&self, k: usize) -> Matrix {
        assert!(k >= 1 && k <= self.cols);
        let mut out = Matrix::zeros(self.rows, k);
        for r in 0..self.rows {
            out.data[r * k..(r + 1) * k].copy_from_slice(&self.row(r)[..k]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// A 2-mode tensor with the same rows x cols layout.
    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor {
            shape: vec![self.rows, self.cols],
            data: self.data.clone(),
        }
    }
}
