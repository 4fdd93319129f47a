//! Complex matrix algebra carried entirely on real matrices.
//!
//! A complex `m×n` matrix is a pair of real matrices ([`CMatrix`]). Products,
//! determinants and inverses go through the real block embedding
//! `[[re, -im], [im, re]]` ([`WidenedMatrix`]) or through the real-only
//! inversion identity in [`cinverse`].

mod dense;
mod widened;

pub use dense::{
    cholesky_in_place, cholesky_inverse, cholesky_logdet, lu_factor, lu_solve, lu_solve_transposed, RMatrix,
    RCOND_FLOOR,
};
pub use widened::{cinverse, cinverse_corollary, cinverse_widened, csolve, logdet_hpd, widen, CMatrix, WidenedMatrix};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch ({}x{} vs {}x{})", lhs.0, lhs.1, rhs.0, rhs.1)]
    DimensionMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (deviation {deviation:e})")]
    NotHermitian { deviation: f64 },
    #[error("matrix does not have the [[re, -im], [im, re]] layout (deviation {deviation:e})")]
    NotWidened { deviation: f64 },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("matrix is singular (reciprocal condition {rcond:e})")]
    Singular { rcond: f64 },
}
