//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Result, WhError};

/// Smallest admissible ratio between the squared smallest and largest
/// Cholesky pivots before a factorization is declared singular.
pub const PIVOT_RATIO_TOL: f64 = 1e-14;

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// The matrix is first scaled to unit diagonal, `Ã = S·A·S` with
/// `S = Diag(a_ii^{-1/2})`, which keeps badly scaled but well-posed systems
/// (large smoothing parameters in eigen-coordinates) factorizable. The pivot
/// check is applied to `Ã`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    scale: DVector<f64>,
}

impl SpdFactor {
    /// Factorizes `a`; `context` names the invertibility condition reported on failure.
    pub fn new(a: DMatrix<f64>, context: &str) -> Result<Self> {
        Self::with_tolerance(a, context, PIVOT_RATIO_TOL)
    }

    pub fn with_tolerance(mut a: DMatrix<f64>, context: &str, ratio_tol: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(WhError::SingularSystem(format!("{context} (empty matrix)")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(WhError::SingularSystem(format!(
                "{context} (non-finite entries)"
            )));
        }
        let mut scale = DVector::zeros(n);
        for i in 0..n {
            let d = a[(i, i)];
            if !(d > 0.0) {
                return Err(WhError::SingularSystem(format!(
                    "{context} (non-positive diagonal at {i})"
                )));
            }
            scale[i] = 1.0 / d.sqrt();
        }
        for j in 0..n {
            for i in 0..n {
                a[(i, j)] *= scale[i] * scale[j];
            }
        }
        let chol = Cholesky::new(a)
            .ok_or_else(|| WhError::SingularSystem(format!("{context} (not positive definite)")))?;
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
        for i in 0..n {
            let p = l[(i, i)] * l[(i, i)];
            lo = lo.min(p);
            hi = hi.max(p);
        }
        if !(lo > ratio_tol * hi) {
            return Err(WhError::SingularSystem(format!(
                "{context} (pivot ratio {:.3e})",
                lo / hi
            )));
        }
        Ok(Self { chol, scale })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let sb = b.component_mul(&self.scale);
        self.chol.solve(&sb).component_mul(&self.scale)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut sb = b.clone();
        for mut col in sb.column_iter_mut() {
            col.component_mul_assign(&self.scale);
        }
        let mut x = self.chol.solve(&sb);
        for mut col in x.column_iter_mut() {
            col.component_mul_assign(&self.scale);
        }
        x
    }

    /// ln|A| read off the triangular factor.
    pub fn ln_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let scaled: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
        2.0 * (scaled - self.scale.iter().map(|s| s.ln()).sum::<f64>())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        let n = self.dim();
        for j in 0..n {
            for i in 0..n {
                inv[(i, j)] *= self.scale[i] * self.scale[j];
            }
        }
        inv
    }

    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let inv = self.inverse();
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|i| inv[(i, i)]))
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sym_eigen_sorted(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Symmetrize in place: `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// `xᵀ A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}

/// `A + Diag(w)`.
pub fn add_diagonal(a: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut m = a.clone();
    for i in 0..w.len() {
        m[(i, i)] += w[i];
    }
    m
}

/// Orthonormal basis of the polynomials of degree `< q` sampled at `0..n`.
pub fn polynomial_basis(n: usize, q: usize) -> DMatrix<f64> {
    let center = (n as f64 - 1.0) / 2.0;
    let scale = (n as f64 / 2.0).max(1.0);
    let vander = DMatrix::from_fn(n, q, |i, k| ((i as f64 - center) / scale).powi(k as i32));
    let qr = vander.qr();
    qr.q()
}
