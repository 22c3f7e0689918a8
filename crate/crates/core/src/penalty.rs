//! Difference matrices, 1D/2D penalty matrices and their eigenstructure.
//!
//! A penalty is split in two pieces: a [`PenaltyTemplate`] that depends only
//! on the grid shape and difference orders (and carries the per-axis
//! eigendecompositions), and a [`PenaltyOperator`] that binds smoothing
//! parameters to a template and holds the assembled matrix.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, WhError};
use crate::grid::Grid;
use crate::linalg::{kron, polynomial_basis, sym_eigen_sorted};

/// Relative threshold used when counting zero eigenvalues of dense matrices.
pub const EIGEN_ZERO_TOL: f64 = 1e-10;

/// Binomial coefficient C(q, k) as a float.
fn binomial(q: usize, k: usize) -> f64 {
    let k = k.min(q - k);
    (0..k).fold(1.0, |acc, i| acc * (q - i) as f64 / (i + 1) as f64)
}

/// Forward-difference operator of order `q` on a grid of length `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMatrix {
    n: usize,
    q: usize,
    matrix: DMatrix<f64>,
}

impl DifferenceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.q
    }

    /// The `(n - q) × n` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `DᵀD`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.matrix.transpose() * &self.matrix
    }

    pub fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.matrix * theta
    }
}

/// Builds the `(n - q) × n` difference matrix whose row `i` holds
/// `C(q,k)·(-1)^(q-k)` at column `i + k`.
pub fn difference_matrix(n: usize, q: usize) -> Result<DifferenceMatrix> {
    if q < 1 || q >= n {
        return Err(WhError::InvalidOrder { n, q });
    }
    let mut m = DMatrix::zeros(n - q, n);
    for i in 0..(n - q) {
        for k in 0..=q {
            let sign = if (q - k).is_multiple_of(2) { 1.0 } else { -1.0 };
            m[(i, i + k)] = sign * binomial(q, k);
        }
    }
    Ok(DifferenceMatrix { n, q, matrix: m })
}

/// Eigendecomposition `DᵀD = U·Diag(s)·Uᵀ` of one axis, eigenvalues ascending.
#[derive(Debug)]
pub struct AxisEigen {
    pub n: usize,
    pub q: usize,
    /// Unscaled `DᵀD`.
    pub gram: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
}

fn compute_axis_eigen(n: usize, q: usize) -> Result<AxisEigen> {
    let d = difference_matrix(n, q)?;
    let gram = d.gram();
    let (mut s, u) = sym_eigen_sorted(&gram);
    // D has rank n - q: the q smallest eigenvalues are structural zeros and
    // their eigenvectors span the polynomials of degree < q. Swap in an exact
    // orthonormal polynomial basis and re-orthogonalize the rest against it.
    for v in s.iter_mut().take(q) {
        *v = 0.0;
    }
    let mut stacked = DMatrix::zeros(n, n);
    stacked.columns_mut(0, q).copy_from(&polynomial_basis(n, q));
    stacked.columns_mut(q, n - q).copy_from(&u.columns(q, n - q));
    let mut u = stacked.clone().qr().q();
    // keep each column's orientation consistent with the raw eigenvectors
    for k in q..n {
        let raw = stacked.column(k);
        if u.column(k).dot(&raw) < 0.0 {
            u.column_mut(k).neg_mut();
        }
    }
    for v in s.iter_mut().skip(q) {
        *v = v.max(f64::MIN_POSITIVE);
    }
    Ok(AxisEigen { n, q, gram, u, s })
}

type EigenCache = RwLock<HashMap<(usize, usize), Arc<AxisEigen>>>;

fn eigen_cache() -> &'static EigenCache {
    static CACHE: OnceLock<EigenCache> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Cached per-axis eigendecomposition for `(n, q)`.
pub fn axis_eigen(n: usize, q: usize) -> Result<Arc<AxisEigen>> {
    if let Some(e) = eigen_cache()
        .read()
        .expect("eigen cache poisoned")
        .get(&(n, q))
    {
        return Ok(Arc::clone(e));
    }
    let fresh = Arc::new(compute_axis_eigen(n, q)?);
    let mut w = eigen_cache().write().expect("eigen cache poisoned");
    Ok(Arc::clone(w.entry((n, q)).or_insert(fresh)))
}

#[derive(Debug)]
struct TemplateInner {
    shape: Vec<usize>,
    orders: Vec<usize>,
    axes: Vec<Arc<AxisEigen>>,
    /// Unscaled components: `DᵀD` (1D) or `I⊗DxᵀDx`, `DzᵀDz⊗I` (2D).
    components: Vec<DMatrix<f64>>,
}

/// Grid shape, difference orders, and precomputed unscaled penalty pieces.
#[derive(Debug, Clone)]
pub struct PenaltyTemplate {
    inner: Arc<TemplateInner>,
}

impl PenaltyTemplate {
    pub fn one_d(n: usize, q: usize) -> Result<Self> {
        let ax = axis_eigen(n, q)?;
        let components = vec![ax.gram.clone()];
        Ok(Self {
            inner: Arc::new(TemplateInner {
                shape: vec![n],
                orders: vec![q],
                axes: vec![ax],
                components,
            }),
        })
    }

    pub fn two_d(nx: usize, nz: usize, qx: usize, qz: usize) -> Result<Self> {
        let ax = axis_eigen(nx, qx)?;
        let az = axis_eigen(nz, qz)?;
        let cx = kron(&DMatrix::identity(nz, nz), &ax.gram);
        let cz = kron(&az.gram, &DMatrix::identity(nx, nx));
        Ok(Self {
            inner: Arc::new(TemplateInner {
                shape: vec![nx, nz],
                orders: vec![qx, qz],
                axes: vec![ax, az],
                components: vec![cx, cz],
            }),
        })
    }

    /// Template matching a grid, with one order per axis.
    pub fn for_grid(grid: &Grid, orders: &[usize]) -> Result<Self> {
        match (grid.shape().as_slice(), orders) {
            ([n], [q]) => Self::one_d(*n, *q),
            ([nx, nz], [qx, qz]) => Self::two_d(*nx, *nz, *qx, *qz),
            _ => Err(WhError::InvalidParameter(format!(
                "{} order(s) supplied for a {}D grid",
                orders.len(),
                grid.dim()
            ))),
        }
    }

    /// Number of grid cells.
    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of axes (1 or 2).
    pub fn dim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn orders(&self) -> &[usize] {
        &self.inner.orders
    }

    pub fn axis(&self, k: usize) -> &Arc<AxisEigen> {
        &self.inner.axes[k]
    }

    pub fn components(&self) -> &[DMatrix<f64>] {
        &self.inner.components
    }

    /// Dimension of the polynomial null space when every λ > 0.
    pub fn polynomial_null_dim(&self) -> usize {
        self.inner.orders.iter().product()
    }

    fn check_lambdas(&self, lambdas: &[f64]) -> Result<()> {
        if lambdas.len() != self.dim() {
            return Err(WhError::InvalidParameter(format!(
                "expected {} smoothing parameter(s), got {}",
                self.dim(),
                lambdas.len()
            )));
        }
        if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(WhError::InvalidParameter(format!(
                "smoothing parameters must be finite and >= 0, got {l}"
            )));
        }
        Ok(())
    }

    /// Assembles `P_λ` without building a full operator.
    pub fn assemble(&self, lambdas: &[f64]) -> Result<DMatrix<f64>> {
        self.check_lambdas(lambdas)?;
        let n = self.len();
        let mut p = DMatrix::zeros(n, n);
        for (c, &l) in self.inner.components.iter().zip(lambdas) {
            if l != 0.0 {
                p += c * l;
            }
        }
        Ok(p)
    }

    /// Eigenvalues of `P_λ`, in Kronecker order (index `j·n_x + i` in 2D).
    pub fn combined_eigenvalues(&self, lambdas: &[f64]) -> Result<Vec<f64>> {
        self.check_lambdas(lambdas)?;
        Ok(match self.inner.axes.as_slice() {
            [a] => a.s.iter().map(|s| lambdas[0] * s).collect(),
            [ax, az] => az
                .s
                .iter()
                .flat_map(|sz| ax.s.iter().map(move |sx| lambdas[0] * sx + lambdas[1] * sz))
                .collect(),
            _ => unreachable!("templates are 1D or 2D"),
        })
    }

    /// `(ln|P_λ|₊, number of zero eigenvalues)`.
    pub fn log_pdet_and_null_dim(&self, lambdas: &[f64]) -> Result<(f64, usize)> {
        let ev = self.combined_eigenvalues(lambdas)?;
        if lambdas.iter().all(|l| *l == 0.0) {
            return Err(WhError::UndefinedPdet);
        }
        Ok(log_pdet_of(&ev))
    }

    pub fn with_lambdas(&self, lambdas: &[f64]) -> Result<PenaltyOperator> {
        let matrix = self.assemble(lambdas)?;
        Ok(PenaltyOperator {
            template: self.clone(),
            lambdas: lambdas.to_vec(),
            matrix,
        })
    }
}

/// Sum of logs of the positive eigenvalues, and the zero count.
///
/// Structural zeros are stored as exact `0.0`, so no threshold is needed.
pub(crate) fn log_pdet_of(eigenvalues: &[f64]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut zeros = 0;
    for &v in eigenvalues {
        if v > 0.0 {
            sum += v.ln();
        } else {
            zeros += 1;
        }
    }
    (sum, zeros)
}

/// A penalty matrix `P_λ` bound to its smoothing parameters.
#[derive(Debug, Clone)]
pub struct PenaltyOperator {
    template: PenaltyTemplate,
    lambdas: Vec<f64>,
    matrix: DMatrix<f64>,
}

impl PenaltyOperator {
    pub fn template(&self) -> &PenaltyTemplate {
        &self.template
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn log_pdet(&self) -> Result<f64> {
        log_pdet(self)
    }

    /// Number of zero eigenvalues of `P_λ`.
    pub fn null_space_dim(&self) -> usize {
        let ev = self
            .template
            .combined_eigenvalues(&self.lambdas)
            .expect("lambdas validated at construction");
        if self.lambdas.iter().all(|l| *l == 0.0) {
            return ev.len();
        }
        log_pdet_of(&ev).1
    }

    /// `θᵀ P_λ θ`.
    pub fn quad(&self, theta: &DVector<f64>) -> f64 {
        theta.dot(&(&self.matrix * theta))
    }
}

/// `P_λ = λ·DᵀD` on a grid of length `n`.
pub fn penalty_1d(n: usize, q: usize, lambda: f64) -> Result<PenaltyOperator> {
    PenaltyTemplate::one_d(n, q)?.with_lambdas(&[lambda])
}

/// `P_λ = λx·I_{nz}⊗DxᵀDx + λz·DzᵀDz⊗I_{nx}`.
pub fn penalty_2d(
    nx: usize,
    nz: usize,
    qx: usize,
    qz: usize,
    lambda_x: f64,
    lambda_z: f64,
) -> Result<PenaltyOperator> {
    PenaltyTemplate::two_d(nx, nz, qx, qz)?.with_lambdas(&[lambda_x, lambda_z])
}

/// ln|P_λ|₊ from the cached per-axis eigenvalues.
pub fn log_pdet(op: &PenaltyOperator) -> Result<f64> {
    Ok(op.template.log_pdet_and_null_dim(&op.lambdas)?.0)
}
