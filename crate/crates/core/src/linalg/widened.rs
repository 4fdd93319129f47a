use super::dense::RMatrix;
use super::LinalgError;

/// Complex matrix stored as its real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    re: RMatrix,
    im: RMatrix,
}

/// Real `2m×2n` embedding `[[re, -im], [im, re]]` of an `m×n` complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WidenedMatrix {
    data: RMatrix,
}

impl CMatrix {
    pub fn new(re: RMatrix, im: RMatrix) -> Result<Self, LinalgError> {
        if re.shape() != im.shape() {
            return Err(LinalgError::DimensionMismatch { op: "CMatrix::new", lhs: re.shape(), rhs: im.shape() });
        }
        Ok(Self { re, im })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { re: RMatrix::zeros(rows, cols), im: RMatrix::zeros(rows, cols) }
    }

    pub fn identity(n: usize) -> Self {
        Self { re: RMatrix::identity(n), im: RMatrix::zeros(n, n) }
    }

    pub fn from_real(re: RMatrix) -> Self {
        let im = RMatrix::zeros(re.rows(), re.cols());
        Self { re, im }
    }

    /// Column vector from `(re, im)` pairs.
    pub fn column(entries: &[(f64, f64)]) -> Self {
        let n = entries.len();
        Self {
            re: RMatrix::from_fn(n, 1, |i, _| entries[i].0),
            im: RMatrix::from_fn(n, 1, |i, _| entries[i].1),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut re = RMatrix::zeros(rows, cols);
        let mut im = RMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let (a, b) = f(i, j);
                re[(i, j)] = a;
                im[(i, j)] = b;
            }
        }
        Self { re, im }
    }

    pub fn re(&self) -> &RMatrix {
        &self.re
    }

    pub fn im(&self) -> &RMatrix {
        &self.im
    }

    pub fn rows(&self) -> usize {
        self.re.rows()
    }

    pub fn cols(&self) -> usize {
        self.re.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.re.shape()
    }

    pub fn get(&self, i: usize, j: usize) -> (f64, f64) {
        (self.re[(i, j)], self.im[(i, j)])
    }

    pub fn set(&mut self, i: usize, j: usize, value: (f64, f64)) {
        self.re[(i, j)] = value.0;
        self.im[(i, j)] = value.1;
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self { re: self.re.transpose(), im: self.im.transpose().scale(-1.0) }
    }

    pub fn transpose(&self) -> Self {
        Self { re: self.re.transpose(), im: self.im.transpose() }
    }

    pub fn conj(&self) -> Self {
        Self { re: self.re.clone(), im: self.im.scale(-1.0) }
    }

    pub fn add(&self, rhs: &CMatrix) -> Result<Self, LinalgError> {
        Ok(Self { re: self.re.add(&rhs.re)?, im: self.im.add(&rhs.im)? })
    }

    pub fn sub(&self, rhs: &CMatrix) -> Result<Self, LinalgError> {
        Ok(Self { re: self.re.sub(&rhs.re)?, im: self.im.sub(&rhs.im)? })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { re: self.re.scale(s), im: self.im.scale(s) }
    }

    /// Multiplies every entry by the complex scalar `re + j·im`.
    pub fn scale_complex(&self, (a, b): (f64, f64)) -> Self {
        Self {
            re: self.re.scale(a).sub(&self.im.scale(b)).expect("same shape"),
            im: self.re.scale(b).add(&self.im.scale(a)).expect("same shape"),
        }
    }

    /// Complex product using four real products.
    pub fn cmul(&self, rhs: &CMatrix) -> Result<Self, LinalgError> {
        if self.cols() != rhs.rows() {
            return Err(LinalgError::DimensionMismatch { op: "cmul", lhs: self.shape(), rhs: rhs.shape() });
        }
        let re = self.re.matmul(&rhs.re)?.sub(&self.im.matmul(&rhs.im)?)?;
        let im = self.re.matmul(&rhs.im)?.add(&self.im.matmul(&rhs.re)?)?;
        Ok(Self { re, im })
    }

    /// Frobenius norm (Euclidean norm for vectors).
    pub fn norm(&self) -> f64 {
        (self.re.frobenius().powi(2) + self.im.frobenius().powi(2)).sqrt()
    }

    pub fn trace(&self) -> (f64, f64) {
        let n = self.rows().min(self.cols());
        (0..n).fold((0.0, 0.0), |(a, b), i| (a + self.re[(i, i)], b + self.im[(i, i)]))
    }

    /// Largest entrywise deviation from the conjugate transpose.
    pub fn hermitian_deviation(&self) -> f64 {
        let adj = self.adjoint();
        self.re.max_abs_diff(&adj.re).max(self.im.max_abs_diff(&adj.im))
    }

    pub fn max_abs_diff(&self, rhs: &CMatrix) -> f64 {
        self.re.max_abs_diff(&rhs.re).max(self.im.max_abs_diff(&rhs.im))
    }

    pub fn max_abs(&self) -> f64 {
        self.re.max_abs().max(self.im.max_abs())
    }

    /// `[re; im]` stacked vertically (`2m×n`).
    pub fn stacked(&self) -> RMatrix {
        self.re.vstack(&self.im).expect("parts share a shape")
    }

    /// Inverse of [`CMatrix::stacked`].
    pub fn from_stacked(stack: &RMatrix) -> Result<Self, LinalgError> {
        if stack.rows() % 2 != 0 {
            return Err(LinalgError::DimensionMismatch { op: "from_stacked", lhs: stack.shape(), rhs: (0, 0) });
        }
        let m = stack.rows() / 2;
        Ok(Self { re: stack.block(0, 0, m, stack.cols()), im: stack.block(m, 0, m, stack.cols()) })
    }
}

impl WidenedMatrix {
    pub fn as_real(&self) -> &RMatrix {
        &self.data
    }

    pub fn into_real(self) -> RMatrix {
        self.data
    }

    /// Wraps a real matrix after checking the block structure.
    pub fn from_real(data: RMatrix, tol: f64) -> Result<Self, LinalgError> {
        let (r, c) = data.shape();
        if r % 2 != 0 || c % 2 != 0 {
            return Err(LinalgError::DimensionMismatch { op: "WidenedMatrix::from_real", lhs: (r, c), rhs: (0, 0) });
        }
        let (m, n) = (r / 2, c / 2);
        let tl = data.block(0, 0, m, n);
        let br = data.block(m, n, m, n);
        let tr = data.block(0, n, m, n);
        let bl = data.block(m, 0, m, n);
        let dev = tl.max_abs_diff(&br).max(tr.add(&bl)?.max_abs());
        if dev > tol {
            return Err(LinalgError::NotWidened { deviation: dev });
        }
        Ok(Self { data })
    }

    /// Recovers the complex matrix from the left block column.
    pub fn narrow(&self) -> CMatrix {
        let (r, c) = self.data.shape();
        let (m, n) = (r / 2, c / 2);
        CMatrix { re: self.data.block(0, 0, m, n), im: self.data.block(m, 0, m, n) }
    }

    pub fn matmul(&self, rhs: &WidenedMatrix) -> Result<WidenedMatrix, LinalgError> {
        Ok(WidenedMatrix { data: self.data.matmul(&rhs.data)? })
    }

    pub fn transpose(&self) -> WidenedMatrix {
        WidenedMatrix { data: self.data.transpose() }
    }
}

/// Real block embedding `[[re, -im], [im, re]]`.
pub fn widen(c: &CMatrix) -> WidenedMatrix {
    let (m, n) = c.shape();
    let mut data = RMatrix::zeros(2 * m, 2 * n);
    data.set_block(0, 0, &c.re);
    data.set_block(0, n, &c.im.scale(-1.0));
    data.set_block(m, 0, &c.im);
    data.set_block(m, n, &c.re);
    WidenedMatrix { data }
}

/// `ln |det D|` for Hermitian positive definite `D`, as half the log
/// determinant of the widened (real symmetric positive definite) matrix.
pub fn logdet_hpd(d: &CMatrix) -> Result<f64, LinalgError> {
    let (r, c) = d.shape();
    if r != c {
        return Err(LinalgError::NotSquare { rows: r, cols: c });
    }
    let deviation = d.hermitian_deviation();
    if deviation > 1e-9 * d.max_abs().max(f64::MIN_POSITIVE) {
        return Err(LinalgError::NotHermitian { deviation });
    }
    Ok(0.5 * widen(d).data.logdet_spd()?)
}

/// Inverse via the real-only identity
/// `re(N) = (re M + im M · re M⁻¹ · im M)⁻¹`, `im(N) = -re M⁻¹ · im M · re(N)`.
/// Fails when `re M` (or the Schur term) is singular.
pub fn cinverse_corollary(m: &CMatrix) -> Result<CMatrix, LinalgError> {
    let (r, c) = m.shape();
    if r != c {
        return Err(LinalgError::NotSquare { rows: r, cols: c });
    }
    let re_inv = m.re.inverse()?;
    let re_inv_im = re_inv.matmul(&m.im)?;
    let schur = m.re.add(&m.im.matmul(&re_inv_im)?)?;
    let n_re = schur.inverse()?;
    let n_im = re_inv_im.matmul(&n_re)?.scale(-1.0);
    Ok(CMatrix { re: n_re, im: n_im })
}

/// Inverse by inverting the widened `2n×2n` real matrix.
pub fn cinverse_widened(m: &CMatrix) -> Result<CMatrix, LinalgError> {
    let (r, c) = m.shape();
    if r != c {
        return Err(LinalgError::NotSquare { rows: r, cols: c });
    }
    let inv = widen(m).data.inverse()?;
    Ok(WidenedMatrix { data: inv }.narrow())
}

/// Complex inverse: the real-only identity when `re M` is invertible,
/// otherwise the widened solve.
pub fn cinverse(m: &CMatrix) -> Result<CMatrix, LinalgError> {
    match cinverse_corollary(m) {
        Ok(inv) => Ok(inv),
        Err(LinalgError::Singular { .. }) => cinverse_widened(m),
        Err(e) => Err(e),
    }
}

/// Solves `M x = y`.
pub fn csolve(m: &CMatrix, y: &CMatrix) -> Result<CMatrix, LinalgError> {
    if m.rows() != y.rows() {
        return Err(LinalgError::DimensionMismatch { op: "csolve", lhs: m.shape(), rhs: y.shape() });
    }
    cinverse(m)?.cmul(y)
}
