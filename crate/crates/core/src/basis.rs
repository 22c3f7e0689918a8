//! Penalized normal equations in the eigenbasis of the penalty.
//!
//! With `DᵀD = U·Diag(s)·Uᵀ` per axis, every smoother in this crate solves
//!
//! ```text
//! (UᵀWU + S_λ) β = UᵀW y,      ŷ = U β
//! ```
//!
//! where `S_λ` is diagonal. With all columns kept this is an exact change of
//! coordinates for `(W + P_λ) ŷ = W y`; keeping only the leading columns
//! gives the reduced-rank estimator. Working in these coordinates keeps the
//! null-space block free of `λ`-sized rounding, so large smoothing
//! parameters stay accurate.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, WhError};
use crate::linalg::SpdFactor;
use crate::penalty::PenaltyTemplate;

/// Leading eigenvectors of the penalty, per axis and combined.
///
/// In 2D, column `j·p_x + i` is `u_z,j ⊗ u_x,i` with eigenvalue
/// `λ_x·s_x,i + λ_z·s_z,j`.
#[derive(Debug)]
pub struct EigenBasis {
    shape: Vec<usize>,
    orders: Vec<usize>,
    dims: Vec<usize>,
    axis_u: Vec<DMatrix<f64>>,
    axis_s: Vec<DVector<f64>>,
    u: DMatrix<f64>,
}

type BasisCache = RwLock<HashMap<(Vec<usize>, Vec<usize>, Vec<usize>), Arc<EigenBasis>>>;

fn basis_cache() -> &'static BasisCache {
    static CACHE: OnceLock<BasisCache> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

impl EigenBasis {
    /// Basis keeping the first `dims[k]` eigenvectors of axis `k` (cached).
    pub fn new(template: &PenaltyTemplate, dims: &[usize]) -> Result<Arc<Self>> {
        if dims.len() != template.dim() {
            return Err(WhError::InvalidParameter(format!(
                "expected {} basis size(s), got {}",
                template.dim(),
                dims.len()
            )));
        }
        for (k, &p) in dims.iter().enumerate() {
            let q = template.orders()[k];
            if p < q {
                return Err(WhError::InvalidReduction { p, q });
            }
            if p > template.shape()[k] {
                return Err(WhError::InvalidParameter(format!(
                    "basis size {p} exceeds axis length {}",
                    template.shape()[k]
                )));
            }
        }
        let key = (template.shape().to_vec(), template.orders().to_vec(), dims.to_vec());
        if let Some(b) = basis_cache().read().expect("basis cache poisoned").get(&key) {
            return Ok(Arc::clone(b));
        }
        let axis_u: Vec<DMatrix<f64>> = dims
            .iter()
            .enumerate()
            .map(|(k, &p)| template.axis(k).u.columns(0, p).into_owned())
            .collect();
        let axis_s: Vec<DVector<f64>> = dims
            .iter()
            .enumerate()
            .map(|(k, &p)| template.axis(k).s.rows(0, p).into_owned())
            .collect();
        let u = match axis_u.as_slice() {
            [ux] => ux.clone(),
            [ux, uz] => uz.kronecker(ux),
            _ => unreachable!("templates are 1D or 2D"),
        };
        let fresh = Arc::new(Self {
            shape: template.shape().to_vec(),
            orders: template.orders().to_vec(),
            dims: dims.to_vec(),
            axis_u,
            axis_s,
            u,
        });
        let mut w = basis_cache().write().expect("basis cache poisoned");
        Ok(Arc::clone(w.entry(key).or_insert(fresh)))
    }

    /// All eigenvectors: an orthogonal change of coordinates.
    pub fn full(template: &PenaltyTemplate) -> Result<Arc<Self>> {
        Self::new(template, template.shape())
    }

    /// Number of grid cells.
    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of basis vectors.
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_full(&self) -> bool {
        self.rank() == self.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn axis_u(&self, k: usize) -> &DMatrix<f64> {
        &self.axis_u[k]
    }

    /// Unscaled eigenvalues of axis `k`, ascending.
    pub fn axis_s(&self, k: usize) -> &DVector<f64> {
        &self.axis_s[k]
    }

    /// Diagonal of `S_λ` in column order.
    pub fn eigenvalues(&self, lambdas: &[f64]) -> DVector<f64> {
        match self.axis_s.as_slice() {
            [s] => s * lambdas[0],
            [sx, sz] => {
                let (px, pz) = (sx.len(), sz.len());
                DVector::from_fn(px * pz, |k, _| {
                    lambdas[0] * sx[k % px] + lambdas[1] * sz[k / px]
                })
            }
            _ => unreachable!("templates are 1D or 2D"),
        }
    }

    /// `UᵀWU` for diagonal `W`.
    pub fn weighted_gram(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut uw = self.u.clone();
        for (i, wi) in w.iter().enumerate() {
            uw.row_mut(i).scale_mut(*wi);
        }
        self.u.tr_mul(&uw)
    }

    /// `Uᵀv`.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        self.u.tr_mul(v)
    }

    /// `Uβ`.
    pub fn expand(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.u * beta
    }

    /// `Uβ` through the axis factors without forming the Kronecker product:
    /// in 2D, reshape `β` to `p_x × p_z` and return `U_x·B·U_zᵀ` flattened.
    pub fn expand_structured(&self, beta: &DVector<f64>) -> DVector<f64> {
        match self.axis_u.as_slice() {
            [ux] => ux * beta,
            [ux, uz] => {
                let b = DMatrix::from_column_slice(ux.ncols(), uz.ncols(), beta.as_slice());
                let m = ux * b * uz.transpose();
                DVector::from_column_slice(m.as_slice())
            }
            _ => unreachable!("templates are 1D or 2D"),
        }
    }
}

/// A factorized system `UᵀWU + S_λ` for fixed weights and smoothing parameters.
#[derive(Debug, Clone)]
pub struct PenalizedSystem {
    basis: Arc<EigenBasis>,
    eig: DVector<f64>,
    factor: SpdFactor,
}

pub(crate) const SINGULAR_CONTEXT: &str = "W + P_lambda is not invertible: the nonzero weights must \
     pin down the penalty null space (at least q cells in 1D; in 2D a set of cells on which no \
     nonzero polynomial of the null space vanishes)";

impl PenalizedSystem {
    /// Factorizes `gram + Diag(S_λ)` where `gram = UᵀWU`.
    pub fn new(basis: Arc<EigenBasis>, gram: &DMatrix<f64>, lambdas: &[f64]) -> Result<Self> {
        let eig = basis.eigenvalues(lambdas);
        let mut m = gram.clone();
        for (i, e) in eig.iter().enumerate() {
            m[(i, i)] += e;
        }
        let factor = SpdFactor::new(m, SINGULAR_CONTEXT)?;
        Ok(Self { basis, eig, factor })
    }

    pub fn basis(&self) -> &Arc<EigenBasis> {
        &self.basis
    }

    /// Diagonal of `S_λ`.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eig
    }

    /// Solves `(UᵀWU + S_λ) β = rhs` in coordinates.
    pub fn solve_coords(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(rhs)
    }

    /// `U (UᵀWU + S_λ)⁻¹ Uᵀ b`, which is `(W + P_λ)⁻¹ b` for a full basis.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.basis.expand(&self.factor.solve(&self.basis.project(b)))
    }

    /// `ln|UᵀWU + S_λ|`, equal to `ln|W + P_λ|` for a full basis.
    pub fn ln_det(&self) -> f64 {
        self.factor.ln_det()
    }

    /// `βᵀ S_λ β`.
    pub fn penalty_quad(&self, beta: &DVector<f64>) -> f64 {
        beta.iter().zip(self.eig.iter()).map(|(b, e)| e * b * b).sum()
    }

    /// `(UᵀWU + S_λ)⁻¹`.
    pub fn coords_inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    /// `Ψ = U (UᵀWU + S_λ)⁻¹ Uᵀ`, the posterior covariance.
    pub fn psi(&self) -> DMatrix<f64> {
        let u = self.basis.u();
        let um = u * self.factor.inverse();
        um * u.transpose()
    }

    /// `diag(Ψ)` without forming the full matrix.
    pub fn psi_diagonal(&self) -> DVector<f64> {
        let u = self.basis.u();
        let um = u * self.factor.inverse();
        DVector::from_fn(u.nrows(), |i, _| um.row(i).dot(&u.row(i)))
    }

    /// Per-coordinate degrees of freedom `diag(F)`, `F = (UᵀWU + S_λ)⁻¹ UᵀWU`.
    pub fn edf_components(&self, gram: &DMatrix<f64>) -> DVector<f64> {
        let f = self.factor.solve_mat(gram);
        f.diagonal()
    }
}
