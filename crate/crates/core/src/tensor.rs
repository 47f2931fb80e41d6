//! Dense row-major arrays and the handful of numeric kernels the pipeline needs.
//!
//! Everything is `f64`. The only non-finite value that may legitimately appear
//! is `f64::NEG_INFINITY`, used as the "masked out" sentinel inside additive
//! masks and masked similarity matrices.

use std::fmt;

use crate::error::{HtpError, Result};

/// Row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(HtpError::shape(
                "Mat::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Build from nested rows; every row must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(HtpError::shape("Mat::from_rows", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A 1×n matrix holding `v`.
    pub fn row_vector(v: Vec<f64>) -> Self {
        Mat {
            rows: 1,
            cols: v.len(),
            data: v,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Exact (bitwise) symmetry.
    pub fn is_symmetric(&self) -> bool {
        self.is_square()
            && (0..self.rows).all(|r| (0..r).all(|c| self.get(r, c).to_bits() == self.get(c, r).to_bits()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(HtpError::shape(op, fmt_shape(self.shape()), fmt_shape(other.shape())));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(HtpError::shape("add_assign", fmt_shape(self.shape()), fmt_shape(other.shape())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Add `v` to every row.
    pub fn add_row_broadcast(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(HtpError::shape("add_row_broadcast", self.cols, v.len()));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (a, b) in row.iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(HtpError::shape("matmul", fmt_shape(self.shape()), fmt_shape(other.shape())));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm(
            self.view(),
            other.view(),
            0.0,
            MatViewMut::full(&mut out),
        )?;
        Ok(out)
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_transposed(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(HtpError::shape(
                "matmul_transposed",
                fmt_shape(self.shape()),
                fmt_shape(other.shape()),
            ));
        }
        let mut out = Mat::zeros(self.rows, other.rows);
        gemm(self.view(), other.view().t(), 0.0, MatViewMut::full(&mut out))?;
        Ok(out)
    }

    pub fn view(&self) -> MatView<'_> {
        MatView {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            row_stride: self.cols as isize,
            col_stride: 1,
        }
    }

    /// Columns `start..start + width` as a strided view.
    pub fn col_block(&self, start: usize, width: usize) -> Result<MatView<'_>> {
        if start + width > self.cols {
            return Err(HtpError::shape("col_block", self.cols, start + width));
        }
        Ok(MatView {
            data: &self.data[start.min(self.data.len())..],
            rows: self.rows,
            cols: width,
            row_stride: self.cols as isize,
            col_stride: 1,
        })
    }

    /// Rows selected by `idx`, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn fmt_shape(s: (usize, usize)) -> String {
    format!("{}x{}", s.0, s.1)
}

/// Read-only strided matrix view.
#[derive(Clone, Copy, Debug)]
pub struct MatView<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> MatView<'a> {
    /// Transposed view of the same storage.
    pub fn t(self) -> MatView<'a> {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows - 1) as isize * self.row_stride + (self.cols - 1) as isize * self.col_stride;
        self.row_stride >= 0 && self.col_stride >= 0 && (last as usize) < self.data.len()
    }
}

/// Mutable strided matrix view, used as a gemm destination.
#[derive(Debug)]
pub struct MatViewMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
}

impl<'a> MatViewMut<'a> {
    pub fn full(m: &'a mut Mat) -> Self {
        MatViewMut {
            rows: m.rows,
            cols: m.cols,
            row_stride: m.cols as isize,
            data: &mut m.data,
        }
    }

    /// Columns `start..start + width` of `m`.
    pub fn col_block(m: &'a mut Mat, start: usize, width: usize) -> Result<Self> {
        if start + width > m.cols {
            return Err(HtpError::shape("col_block_mut", m.cols, start + width));
        }
        let stride = m.cols as isize;
        let rows = m.rows;
        let len = m.data.len();
        Ok(MatViewMut {
            data: &mut m.data[start.min(len)..],
            rows,
            cols: width,
            row_stride: stride,
        })
    }

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows - 1) as isize * self.row_stride + (self.cols - 1) as isize;
        (last as usize) < self.data.len()
    }
}

/// `c ← a·b + beta·c` on strided views.
pub fn gemm(a: MatView<'_>, b: MatView<'_>, beta: f64, c: MatViewMut<'_>) -> Result<()> {
    if a.cols != b.rows || a.rows != c.rows || b.cols != c.cols {
        return Err(HtpError::shape(
            "gemm",
            format!("{}x{} · {}x{}", a.rows, a.cols, b.rows, b.cols),
            format!("{}x{}", c.rows, c.cols),
        ));
    }
    if !(a.fits() && b.fits() && c.fits()) {
        return Err(HtpError::invalid("gemm view exceeds its storage"));
    }
    if c.rows == 0 || c.cols == 0 {
        return Ok(());
    }
    if a.cols == 0 {
        // Empty inner dimension: the product is zero.
        for r in 0..c.rows {
            let base = r as isize * c.row_stride;
            for col in 0..c.cols {
                let slot = &mut c.data[(base + col as isize) as usize];
                *slot *= beta;
            }
        }
        return Ok(());
    }
    // SAFETY: every view was bounds-checked by `fits` above, strides are
    // non-negative, and `c` is a unique borrow that cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride,
            1,
        );
    }
    Ok(())
}

/// Rank-3 row-major array, indexed `[i0][i1][i2]`.
///
/// Token tensors use the joint-major layout `J × F × D`, so each joint's
/// temporal sequence is a contiguous `F × D` block.
#[derive(Clone, Debug, PartialEq)]
pub struct Ten3 {
    d0: usize,
    d1: usize,
    d2: usize,
    data: Vec<f64>,
}

impl Ten3 {
    pub fn new(d0: usize, d1: usize, d2: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != d0 * d1 * d2 {
            return Err(HtpError::shape(
                "Ten3::new",
                format!("{d0}x{d1}x{d2}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Ten3 { d0, d1, d2, data })
    }

    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Ten3 {
            d0,
            d1,
            d2,
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn from_fn(d0: usize, d1: usize, d2: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(d0 * d1 * d2);
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    data.push(f(i, j, k));
                }
            }
        }
        Ten3 { d0, d1, d2, data }
    }

    /// Stack equally shaped matrices along a new leading axis.
    pub fn stack(mats: &[Mat]) -> Result<Self> {
        let (r, c) = mats.first().map_or((0, 0), Mat::shape);
        let mut data = Vec::with_capacity(mats.len() * r * c);
        for m in mats {
            if m.shape() != (r, c) {
                return Err(HtpError::shape("Ten3::stack", fmt_shape((r, c)), fmt_shape(m.shape())));
            }
            data.extend_from_slice(m.data());
        }
        Ok(Ten3 {
            d0: mats.len(),
            d1: r,
            d2: c,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.d0, self.d1, self.d2)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.d1 + j) * self.d2 + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.d1 + j) * self.d2 + k] = v;
    }

    /// Contiguous `d1 × d2` block at leading index `i`.
    pub fn block(&self, i: usize) -> &[f64] {
        let n = self.d1 * self.d2;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.d1 * self.d2;
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Copy of the block at leading index `i` as a matrix.
    pub fn slice0(&self, i: usize) -> Mat {
        Mat {
            rows: self.d1,
            cols: self.d2,
            data: self.block(i).to_vec(),
        }
    }

    pub fn set_slice0(&mut self, i: usize, m: &Mat) -> Result<()> {
        if m.shape() != (self.d1, self.d2) {
            return Err(HtpError::shape("set_slice0", fmt_shape((self.d1, self.d2)), fmt_shape(m.shape())));
        }
        self.block_mut(i).copy_from_slice(m.data());
        Ok(())
    }

    /// Copy of `[.., j, ..]` as a `d0 × d2` matrix.
    pub fn slice1(&self, j: usize) -> Mat {
        let mut data = Vec::with_capacity(self.d0 * self.d2);
        for i in 0..self.d0 {
            let start = (i * self.d1 + j) * self.d2;
            data.extend_from_slice(&self.data[start..start + self.d2]);
        }
        Mat {
            rows: self.d0,
            cols: self.d2,
            data,
        }
    }

    pub fn set_slice1(&mut self, j: usize, m: &Mat) -> Result<()> {
        if m.shape() != (self.d0, self.d2) {
            return Err(HtpError::shape("set_slice1", fmt_shape((self.d0, self.d2)), fmt_shape(m.shape())));
        }
        for i in 0..self.d0 {
            let start = (i * self.d1 + j) * self.d2;
            self.data[start..start + self.d2].copy_from_slice(m.row(i));
        }
        Ok(())
    }

    /// Select indices `idx` along axis 1 (frames, for token tensors).
    pub fn gather_axis1(&self, idx: &[usize]) -> Result<Ten3> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.d1) {
            return Err(HtpError::invalid(format!("index {bad} out of range for axis of length {}", self.d1)));
        }
        let mut data = Vec::with_capacity(self.d0 * idx.len() * self.d2);
        for i in 0..self.d0 {
            for &j in idx {
                let start = (i * self.d1 + j) * self.d2;
                data.extend_from_slice(&self.data[start..start + self.d2]);
            }
        }
        Ok(Ten3 {
            d0: self.d0,
            d1: idx.len(),
            d2: self.d2,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Ten3 {
        Ten3 {
            d0: self.d0,
            d1: self.d1,
            d2: self.d2,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Ten3) -> Result<Ten3> {
        if self.shape() != other.shape() {
            return Err(HtpError::shape("Ten3::add", format!("{:?}", self.shape()), format!("{:?}", other.shape())));
        }
        Ok(Ten3 {
            d0: self.d0,
            d1: self.d1,
            d2: self.d2,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Ten3) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax of one row. `-inf` entries map to exactly 0.
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

/// In-place variant of [`softmax_row`]; the max is taken over the finite support.
pub fn softmax_in_place(v: &mut [f64]) -> Result<()> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(HtpError::EmptySupport);
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = if *x == f64::NEG_INFINITY { 0.0 } else { (*x - max).exp() };
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(m: &Mat) -> Result<Mat> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r))?;
    }
    Ok(out)
}

/// Exact GELU: `x · Φ(x)` with the erf form of the normal CDF.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// LayerNorm over one feature vector.
pub fn layer_norm(v: &[f64], gamma: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    layer_norm_in_place(&mut out, gamma, beta)?;
    Ok(out)
}

pub fn layer_norm_in_place(v: &mut [f64], gamma: &[f64], beta: &[f64]) -> Result<()> {
    if gamma.len() != v.len() || beta.len() != v.len() {
        return Err(HtpError::shape(
            "layer_norm",
            format!("features {}", v.len()),
            format!("gamma {} / beta {}", gamma.len(), beta.len()),
        ));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for ((x, g), b) in v.iter_mut().zip(gamma).zip(beta) {
        *x = (*x - mean) * inv * g + b;
    }
    Ok(())
}

/// LayerNorm applied to every row of `m`.
pub fn layer_norm_rows(m: &Mat, gamma: &[f64], beta: &[f64]) -> Result<Mat> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        layer_norm_in_place(out.row_mut(r), gamma, beta)?;
    }
    Ok(out)
}

/// Affine map `X·W + b` with `b` broadcast over rows.
pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Result<Mat> {
    let mut out = x.matmul(w)?;
    if !b.is_empty() {
        out.add_row_broadcast(b)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax_row(&[0.0, f64::NEG_INFINITY]).unwrap(), vec![1.0, 0.0]);
        let p = softmax_row(&[1f64.ln(), 3f64.ln()]).unwrap();
        // 1/(1+3), 3/(1+3)
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let err = softmax_row(&[f64::NEG_INFINITY; 3]).unwrap_err();
        assert!(err.to_string().contains("empty support"));
    }

    #[test]
    fn gelu_and_layer_norm_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        let ln = layer_norm(&[1.0, 1.0, 1.0], &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(ln.iter().all(|v| v.abs() < 1e-12));
        // erf form, not tanh: Φ(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_moments() {
        let v = [0.3, -2.0, 5.5, 1.25, 7.0];
        let out = layer_norm(&v, &[1.0; 5], &[0.0; 5]).unwrap();
        let mean = out.iter().sum::<f64>() / 5.0;
        let var = out.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn linear_identity_returns_weights() {
        let w = Mat::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
        let out = linear(&Mat::identity(2), &w, &[0.0, 0.0]).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let err = Mat::zeros(2, 3).matmul(&Mat::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn strided_views_match_naive() {
        let a = Mat::from_fn(5, 6, |r, c| (r * 7 + c) as f64 * 0.1 - 1.0);
        let b = Mat::from_fn(4, 6, |r, c| ((r + 2 * c) % 5) as f64 - 2.0);
        let abt = a.matmul_transposed(&b).unwrap();
        assert!(abt.max_abs_diff(&naive_matmul(&a, &b.transpose())) < 1e-12);

        // columns 2..5 of a times rows of a 3x2 block
        let w = Mat::from_fn(3, 2, |r, c| (r as f64) - (c as f64) * 0.5);
        let mut out = Mat::zeros(5, 4);
        gemm(a.col_block(2, 3).unwrap(), w.view(), 0.0, MatViewMut::col_block(&mut out, 1, 2).unwrap()).unwrap();
        let sub = Mat::from_fn(5, 3, |r, c| a.get(r, c + 2));
        let expect = naive_matmul(&sub, &w);
        for r in 0..5 {
            assert_eq!(out.get(r, 0), 0.0);
            assert_eq!(out.get(r, 3), 0.0);
            for c in 0..2 {
                assert!((out.get(r, c + 1) - expect.get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ten3_slices_round_trip() {
        let t = Ten3::from_fn(3, 4, 2, |i, j, k| (i * 100 + j * 10 + k) as f64);
        let s1 = t.slice1(2);
        assert_eq!(s1.row(1), &[120.0, 121.0]);
        let mut u = Ten3::zeros(3, 4, 2);
        for j in 0..4 {
            u.set_slice1(j, &t.slice1(j)).unwrap();
        }
        assert_eq!(u, t);
        let g = t.gather_axis1(&[0, 3]).unwrap();
        assert_eq!(g.get(2, 1, 1), 231.0);
    }

    fn small_mat(n: usize) -> impl Strategy<Value = Mat> {
        prop::collection::vec(-10.0f64..10.0, n * n).prop_map(move |d| Mat::new(n, n, d).unwrap())
    }

    proptest! {
        #[test]
        fn linear_matches_triple_loop(x in small_mat(8), w in small_mat(8), b in prop::collection::vec(-1.0f64..1.0, 8)) {
            let got = linear(&x, &w, &b).unwrap();
            let mut expect = naive_matmul(&x, &w);
            expect.add_row_broadcast(&b).unwrap();
            prop_assert!(got.max_abs_diff(&expect) < 1e-12);
        }

        #[test]
        fn softmax_is_probability_vector(v in prop::collection::vec(prop_oneof![4 => -50.0f64..50.0, 1 => Just(f64::NEG_INFINITY)], 1..16)) {
            prop_assume!(v.iter().any(|x| x.is_finite()));
            let p = softmax_row(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in v.iter().zip(&p) {
                prop_assert!(*y >= 0.0);
                if *x == f64::NEG_INFINITY { prop_assert_eq!(*y, 0.0); }
            }
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i].is_finite() && v[j].is_finite() && v[i] < v[j] {
                        prop_assert!(p[i] <= p[j]);
                    }
                }
            }
        }
    }
}
