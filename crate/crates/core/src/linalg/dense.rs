//! Row-major dense real matrices and the small factorizations used across
//! the crate.
//!
//! The free functions at the bottom work on raw `n×n` row-major slices so the
//! autodiff engine can reuse them on batched tensors without copying into
//! [`RMatrix`].

use std::fmt;
use std::ops::{Index, IndexMut};

use super::LinalgError;

/// Reciprocal condition estimates below this are treated as singular.
pub const RCOND_FLOOR: f64 = 1e-14;

/// Dense real matrix, `data[i * cols + j] = A[i, j]`.
#[derive(Clone, PartialEq)]
pub struct RMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for RMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "RMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl RMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &RMatrix) -> Result<RMatrix, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = RMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, rhs: &RMatrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<RMatrix, LinalgError> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::DimensionMismatch { op, lhs: self.shape(), rhs: rhs.shape() });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(RMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, rhs: &RMatrix) -> Result<RMatrix, LinalgError> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &RMatrix) -> Result<RMatrix, LinalgError> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> RMatrix {
        RMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, rhs: &RMatrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape());
        self.data.iter().zip(&rhs.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &RMatrix) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(i));
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> RMatrix {
        RMatrix::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &RMatrix) -> Result<RMatrix, LinalgError> {
        if self.cols != below.cols {
            return Err(LinalgError::DimensionMismatch { op: "vstack", lhs: self.shape(), rhs: below.shape() });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&below.data);
        Ok(RMatrix { rows: self.rows + below.rows, cols: self.cols, data })
    }

    fn require_square(&self) -> Result<usize, LinalgError> {
        if self.is_square() {
            Ok(self.rows)
        } else {
            Err(LinalgError::NotSquare { rows: self.rows, cols: self.cols })
        }
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix (only
    /// the lower triangle is read).
    pub fn cholesky(&self) -> Result<RMatrix, LinalgError> {
        let n = self.require_square()?;
        let mut l = self.data.clone();
        cholesky_in_place(&mut l, n)?;
        Ok(RMatrix { rows: n, cols: n, data: l })
    }

    /// `ln det` of a symmetric positive definite matrix via Cholesky.
    pub fn logdet_spd(&self) -> Result<f64, LinalgError> {
        let l = self.cholesky()?;
        Ok(cholesky_logdet(&l.data, l.rows))
    }

    /// Determinant by partial-pivot LU. Zero for exactly singular input.
    pub fn det(&self) -> Result<f64, LinalgError> {
        let n = self.require_square()?;
        let mut lu = self.data.clone();
        let mut piv = vec![0; n];
        match lu_factor(&mut lu, n, &mut piv) {
            Ok(sign) => Ok(sign * (0..n).map(|i| lu[i * n + i]).product::<f64>()),
            Err(_) => Ok(0.0),
        }
    }

    /// Inverse by pivoted elimination; fails when the reciprocal 1-norm
    /// condition estimate drops below [`RCOND_FLOOR`].
    pub fn inverse(&self) -> Result<RMatrix, LinalgError> {
        let n = self.require_square()?;
        let mut lu = self.data.clone();
        let mut piv = vec![0; n];
        lu_factor(&mut lu, n, &mut piv).map_err(|_| LinalgError::Singular { rcond: 0.0 })?;
        let mut inv = RMatrix::identity(n);
        lu_solve(&lu, n, &piv, &mut inv.data, n);
        let rcond = 1.0 / (self.norm1() * inv.norm1());
        if !(rcond >= RCOND_FLOOR) {
            return Err(LinalgError::Singular { rcond });
        }
        Ok(inv)
    }

    /// Solves `self · X = rhs` for a square `self`.
    pub fn solve(&self, rhs: &RMatrix) -> Result<RMatrix, LinalgError> {
        let n = self.require_square()?;
        if rhs.rows != n {
            return Err(LinalgError::DimensionMismatch { op: "solve", lhs: self.shape(), rhs: rhs.shape() });
        }
        // The inverse is cheap at these sizes and doubles as the condition estimate.
        let inv = self.inverse()?;
        inv.matmul(rhs)
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Index<(usize, usize)> for RMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for RMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// In-place lower Cholesky of an `n×n` row-major block. The strict upper
/// triangle is zeroed on success.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<(), LinalgError> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

/// `ln det A` from its lower Cholesky factor.
pub fn cholesky_logdet(l: &[f64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
}

/// Inverse of `A = L Lᵀ` written into `out` (row-major `n×n`).
pub fn cholesky_inverse(l: &[f64], n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    // Solve column by column: L y = e, Lᵀ x = y. `out` holds columns as rows
    // since the result is symmetric.
    for c in 0..n {
        let col = &mut out[c * n..(c + 1) * n];
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[i * n + k] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s -= l[k * n + i] * col[k];
            }
            col[i] = s / l[i * n + i];
        }
    }
}

/// Partial-pivot LU in place (`L` unit lower, `U` upper share storage).
/// Returns the permutation sign. Fails on an exactly zero pivot column.
pub fn lu_factor(a: &mut [f64], n: usize, piv: &mut [usize]) -> Result<f64, LinalgError> {
    let mut sign = 1.0;
    for k in 0..n {
        let mut p = k;
        let mut best = a[k * n + k].abs();
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        piv[k] = p;
        if !(best > 0.0) {
            return Err(LinalgError::Singular { rcond: 0.0 });
        }
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            sign = -sign;
        }
        let pivot = a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] / pivot;
            a[i * n + k] = f;
            if f != 0.0 {
                for j in k + 1..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
            }
        }
    }
    Ok(sign)
}

/// Solves `A X = B` in place given the factorization from [`lu_factor`];
/// `b` is `n × m` row-major.
pub fn lu_solve(lu: &[f64], n: usize, piv: &[usize], b: &mut [f64], m: usize) {
    for k in 0..n {
        let p = piv[k];
        if p != k {
            for j in 0..m {
                b.swap(k * m + j, p * m + j);
            }
        }
    }
    for i in 0..n {
        for k in 0..i {
            let f = lu[i * n + k];
            if f != 0.0 {
                for j in 0..m {
                    b[i * m + j] -= f * b[k * m + j];
                }
            }
        }
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let f = lu[i * n + k];
            if f != 0.0 {
                for j in 0..m {
                    b[i * m + j] -= f * b[k * m + j];
                }
            }
        }
        let d = lu[i * n + i];
        for j in 0..m {
            b[i * m + j] /= d;
        }
    }
}

/// Solves `Aᵀ X = B` from the same factorization.
pub fn lu_solve_transposed(lu: &[f64], n: usize, piv: &[usize], b: &mut [f64], m: usize) {
    // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ y = b, Lᵀ z = y, then undo the row swaps.
    for i in 0..n {
        for k in 0..i {
            let f = lu[k * n + i];
            if f != 0.0 {
                for j in 0..m {
                    b[i * m + j] -= f * b[k * m + j];
                }
            }
        }
        let d = lu[i * n + i];
        for j in 0..m {
            b[i * m + j] /= d;
        }
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let f = lu[k * n + i];
            if f != 0.0 {
                for j in 0..m {
                    b[i * m + j] -= f * b[k * m + j];
                }
            }
        }
    }
    for k in (0..n).rev() {
        let p = piv[k];
        if p != k {
            for j in 0..m {
                b.swap(k * m + j, p * m + j);
            }
        }
    }
}
