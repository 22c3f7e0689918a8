//! Reduced-rank smoothing in the leading penalty eigenvectors.
//!
//! Keeping the `p` smoothest eigenvectors `U_p` gives
//! `ŷ_p = U_p (U_pᵀWU_p + S_λ)⁻¹ U_pᵀW y`, a `p × p` problem instead of
//! `n × n`. It is used to speed up smoothing-parameter selection; the final
//! fit is always computed at full rank.

use std::sync::Arc;

use nalgebra::DVector;

use crate::basis::PenalizedSystem;
pub use crate::basis::EigenBasis;
use crate::error::{Result, WhError};
use crate::generalized::{select_lambda_performance_in, CountData, Selection, SelectionOptions};
use crate::penalty::PenaltyTemplate;

/// Per-eigenvector degrees of freedom `diag(F)` and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfReport {
    pub components: DVector<f64>,
    pub total: f64,
}

/// Basis sizes for a budget of `p_max` coefficients.
///
/// 1D: `min(p_max, n)`. 2D: `p_k = floor(min(κ, 1)·n_k)` with
/// `κ = sqrt(p_max / (n_x·n_z))`. Sizes never drop below the difference
/// orders.
pub fn choose_p(template: &PenaltyTemplate, p_max: usize) -> Vec<usize> {
    let shape = template.shape();
    let orders = template.orders();
    match shape {
        [n] => vec![p_max.min(*n).max(orders[0])],
        [nx, nz] => {
            let kappa = (p_max as f64 / (nx * nz) as f64).sqrt().min(1.0);
            vec![
                ((kappa * *nx as f64).floor() as usize).max(orders[0]),
                ((kappa * *nz as f64).floor() as usize).max(orders[1]),
            ]
        }
        _ => unreachable!("templates are 1D or 2D"),
    }
}

/// Result of a reduced-rank Gaussian fit.
#[derive(Debug, Clone)]
pub struct ReducedFit {
    pub beta: DVector<f64>,
    pub y_hat: DVector<f64>,
    pub edf: EdfReport,
    pub system: PenalizedSystem,
}

/// Weighted smoothing of `y` restricted to the span of `basis`.
pub fn fit_reduced(
    y: &DVector<f64>,
    w: &DVector<f64>,
    basis: &Arc<EigenBasis>,
    lambdas: &[f64],
) -> Result<ReducedFit> {
    let n = basis.len();
    if y.len() != n || w.len() != n {
        return Err(WhError::InvalidParameter(format!(
            "expected vectors of length {n}, got y: {}, w: {}",
            y.len(),
            w.len()
        )));
    }
    if lambdas.len() != basis.dims().len() || lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(WhError::InvalidParameter(format!(
            "expected {} finite nonnegative smoothing parameter(s)",
            basis.dims().len()
        )));
    }
    let mut wy = DVector::zeros(n);
    for i in 0..n {
        if !(w[i] >= 0.0) || !w[i].is_finite() {
            return Err(WhError::InvalidParameter(format!("invalid weight at {i}")));
        }
        if w[i] > 0.0 {
            wy[i] = w[i] * y[i];
        }
    }
    let gram = basis.weighted_gram(w);
    let system = PenalizedSystem::new(Arc::clone(basis), &gram, lambdas)?;
    let beta = system.solve_coords(&basis.project(&wy));
    let y_hat = basis.expand(&beta);
    let components = system.edf_components(&gram);
    let total = components.sum();
    Ok(ReducedFit {
        beta,
        y_hat,
        edf: EdfReport { components, total },
        system,
    })
}

/// Performance iteration with inner problems in a basis of at most `p_max`
/// coefficients (see [`choose_p`]); the returned fit is full rank.
pub fn select_lambda_reduced(
    data: &CountData,
    template: &PenaltyTemplate,
    p_max: usize,
    opts: &SelectionOptions,
) -> Result<Selection> {
    let basis = EigenBasis::new(template, &choose_p(template, p_max))?;
    select_lambda_performance_in(data, template, basis, opts)
}
