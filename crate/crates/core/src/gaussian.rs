//! Original (Gaussian) Whittaker-Henderson smoothing.
//!
//! `ŷ = (W + P_λ)⁻¹ W y`, its posterior covariance `Ψ = (W + P_λ)⁻¹`, the
//! effective degrees of freedom `tr[(W + P_λ)⁻¹ W]`, and the restricted
//! marginal likelihood
//!
//! ```text
//! ℓ_norm(λ) = -½ [ (y-ŷ)ᵀW(y-ŷ) + ŷᵀP_λŷ - ln|W|₊ - ln|P_λ|₊
//!                  + ln|W+P_λ| + (n* - q) ln 2π ]
//! ```
//!
//! with `n*` the number of positive weights and `q` the number of zero
//! eigenvalues of `P_λ`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{EigenBasis, PenalizedSystem};
use crate::error::{Result, WhError};
use crate::optimize::{search_log10, SearchConfig};
use crate::penalty::{PenaltyOperator, PenaltyTemplate};

/// Data-side pieces of a Gaussian smoothing problem that do not depend on λ.
#[derive(Debug, Clone)]
pub struct GaussianProblem {
    template: PenaltyTemplate,
    basis: Arc<EigenBasis>,
    y: DVector<f64>,
    w: DVector<f64>,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    log_det_w: f64,
    n_star: usize,
}

/// Solution of a [`GaussianProblem`] at one λ.
#[derive(Debug, Clone)]
pub struct GaussianSolution {
    pub lambdas: Vec<f64>,
    pub system: PenalizedSystem,
    /// Coordinates in the eigenbasis.
    pub beta: DVector<f64>,
    pub theta_hat: DVector<f64>,
    /// `None` when every λ is zero (the improper prior is undefined).
    pub marginal_loglik: Option<f64>,
}

impl GaussianProblem {
    pub fn new(y: &DVector<f64>, w: &DVector<f64>, template: &PenaltyTemplate) -> Result<Self> {
        Self::with_basis(y, w, template, EigenBasis::full(template)?)
    }

    /// Problem restricted to the span of `basis` (reduced rank if not full).
    pub fn with_basis(
        y: &DVector<f64>,
        w: &DVector<f64>,
        template: &PenaltyTemplate,
        basis: Arc<EigenBasis>,
    ) -> Result<Self> {
        let n = template.len();
        if y.len() != n || w.len() != n {
            return Err(WhError::InvalidParameter(format!(
                "expected vectors of length {n}, got y: {}, w: {}",
                y.len(),
                w.len()
            )));
        }
        if basis.len() != n {
            return Err(WhError::InvalidParameter("basis does not match the grid".into()));
        }
        let mut y_eff = DVector::zeros(n);
        let mut log_det_w = 0.0;
        let mut n_star = 0;
        for i in 0..n {
            let wi = w[i];
            if !(wi >= 0.0) || !wi.is_finite() {
                return Err(WhError::InvalidParameter(format!(
                    "weights must be finite and >= 0, got {wi} at {i}"
                )));
            }
            if wi > 0.0 {
                if !y[i].is_finite() {
                    return Err(WhError::InvalidParameter(format!(
                        "observation {i} is not finite but has positive weight"
                    )));
                }
                y_eff[i] = y[i];
                log_det_w += wi.ln();
                n_star += 1;
            }
        }
        let gram = basis.weighted_gram(w);
        let rhs = basis.project(&w.component_mul(&y_eff));
        Ok(Self {
            template: template.clone(),
            basis,
            y: y_eff,
            w: w.clone(),
            gram,
            rhs,
            log_det_w,
            n_star,
        })
    }

    pub fn template(&self) -> &PenaltyTemplate {
        &self.template
    }

    pub fn basis(&self) -> &Arc<EigenBasis> {
        &self.basis
    }

    /// Observations, with zero-weight cells set to 0.
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn w(&self) -> &DVector<f64> {
        &self.w
    }

    /// `UᵀWU`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn n_star(&self) -> usize {
        self.n_star
    }

    pub fn solve(&self, lambdas: &[f64]) -> Result<GaussianSolution> {
        self.template.assemble_check(lambdas)?;
        let system = PenalizedSystem::new(Arc::clone(&self.basis), &self.gram, lambdas)?;
        let beta = system.solve_coords(&self.rhs);
        let theta_hat = self.basis.expand(&beta);
        let marginal_loglik = if lambdas.iter().any(|l| *l > 0.0) {
            Some(self.marginal_from(&system, &beta, &theta_hat))
        } else {
            None
        };
        Ok(GaussianSolution {
            lambdas: lambdas.to_vec(),
            system,
            beta,
            theta_hat,
            marginal_loglik,
        })
    }

    fn marginal_from(
        &self,
        system: &PenalizedSystem,
        beta: &DVector<f64>,
        theta_hat: &DVector<f64>,
    ) -> f64 {
        let resid: f64 = (0..self.y.len())
            .map(|i| {
                let r = self.y[i] - theta_hat[i];
                self.w[i] * r * r
            })
            .sum();
        let quad = resid + system.penalty_quad(beta);
        let (log_pdet, q) = log_pdet_of_diag(system.eigenvalues());
        -0.5 * (quad - self.log_det_w - log_pdet
            + system.ln_det()
            + (self.n_star as f64 - q as f64) * (2.0 * PI).ln())
    }

    /// ℓ_norm at `lambdas`.
    pub fn marginal_loglik(&self, lambdas: &[f64]) -> Result<f64> {
        if lambdas.iter().all(|l| *l == 0.0) {
            return Err(WhError::UndefinedPdet);
        }
        Ok(self.solve(lambdas)?.marginal_loglik.expect("some lambda is positive"))
    }

    /// Maximizes ℓ_norm over `log10(λ)`; returns `λ̂` and the optimum value.
    pub fn select_lambda(&self, config: &SearchConfig) -> Result<(Vec<f64>, f64)> {
        let opt = search_log10(self.template.dim(), config, |u| {
            let l: Vec<f64> = u.iter().map(|v| 10f64.powf(*v)).collect();
            self.marginal_loglik(&l).map_err(|e| e.with_lambda(&l))
        })?;
        Ok((opt.x.iter().map(|v| 10f64.powf(*v)).collect(), opt.f))
    }
}

impl PenaltyTemplate {
    pub(crate) fn assemble_check(&self, lambdas: &[f64]) -> Result<()> {
        self.combined_eigenvalues(lambdas).map(|_| ())
    }
}

/// `(Σ ln s_i over s_i > 0, #zeros)` for the diagonal of `S_λ`.
pub(crate) fn log_pdet_of_diag(eig: &DVector<f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut zeros = 0;
    for &v in eig.iter() {
        if v > 0.0 {
            sum += v.ln();
        } else {
            zeros += 1;
        }
    }
    (sum, zeros)
}

/// A Gaussian smoothing fit at fixed λ.
#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub penalty: PenaltyOperator,
    pub theta_hat: DVector<f64>,
    /// Factorization of `W + P_λ` (in eigen-coordinates).
    pub system: PenalizedSystem,
    /// `diag((W + P_λ)⁻¹)`.
    pub psi_diag: DVector<f64>,
    pub edf: f64,
    /// `None` when every λ is zero.
    pub marginal_loglik: Option<f64>,
    pub n_star: usize,
}

impl GaussianFit {
    fn from_solution(problem: &GaussianProblem, sol: GaussianSolution) -> Result<Self> {
        let psi_diag = sol.system.psi_diagonal();
        let edf = psi_diag.dot(problem.w());
        Ok(Self {
            y: problem.y().clone(),
            w: problem.w().clone(),
            penalty: problem.template().with_lambdas(&sol.lambdas)?,
            theta_hat: sol.theta_hat,
            system: sol.system,
            psi_diag,
            edf,
            marginal_loglik: sol.marginal_loglik,
            n_star: problem.n_star(),
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        self.penalty.lambdas()
    }

    /// `Ψ = (W + P_λ)⁻¹`.
    pub fn psi(&self) -> DMatrix<f64> {
        self.system.psi()
    }
}

/// Solves `(W + P_λ) ŷ = W y`.
pub fn fit_gaussian(
    y: &DVector<f64>,
    w: &DVector<f64>,
    penalty: &PenaltyOperator,
) -> Result<GaussianFit> {
    let problem = GaussianProblem::new(y, w, penalty.template())?;
    let sol = problem.solve(penalty.lambdas())?;
    GaussianFit::from_solution(&problem, sol)
}

/// Standard normal quantile `Φ⁻¹(1 - α/2)`.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(WhError::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(1.0 - alpha / 2.0))
}

/// Pointwise credible band `ŷ ± Φ⁻¹(1 - α/2)·sqrt(diag Ψ)`.
pub fn credible_intervals(fit: &GaussianFit, alpha: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    band(&fit.theta_hat, &fit.psi_diag, alpha)
}

pub(crate) fn band(
    center: &DVector<f64>,
    var: &DVector<f64>,
    alpha: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let z = normal_quantile(alpha)?;
    let half = var.map(|v| z * v.max(0.0).sqrt());
    Ok((center - &half, center + &half))
}

/// ℓ_norm(λ) for the given data.
pub fn marginal_loglik_norm(
    lambdas: &[f64],
    y: &DVector<f64>,
    w: &DVector<f64>,
    template: &PenaltyTemplate,
) -> Result<f64> {
    GaussianProblem::new(y, w, template)?.marginal_loglik(lambdas)
}

/// Selects λ by maximizing ℓ_norm and returns the fit at `λ̂`.
pub fn select_lambda_norm(
    y: &DVector<f64>,
    w: &DVector<f64>,
    template: &PenaltyTemplate,
    config: &SearchConfig,
) -> Result<(Vec<f64>, GaussianFit)> {
    let problem = GaussianProblem::new(y, w, template)?;
    let (lambda_hat, _) = problem.select_lambda(config)?;
    let sol = problem.solve(&lambda_hat)?;
    Ok((lambda_hat.clone(), GaussianFit::from_solution(&problem, sol)?))
}

/// Generalized cross-validation score, for diagnostics only:
/// `n*·RSS_w / (n* - tr H)²` with `RSS_w = Σ w_i (y_i - ŷ_i)²`.
pub fn gcv(
    lambdas: &[f64],
    y: &DVector<f64>,
    w: &DVector<f64>,
    template: &PenaltyTemplate,
) -> Result<f64> {
    let problem = GaussianProblem::new(y, w, template)?;
    let sol = problem.solve(lambdas)?;
    let edf = sol.system.psi_diagonal().dot(problem.w());
    let n_star = problem.n_star() as f64;
    let denom = n_star - edf;
    if !(denom > 1e-8 * n_star) {
        return Err(WhError::Undefined(format!(
            "GCV denominator n* - tr H = {denom:.3e} is numerically zero"
        )));
    }
    let rss: f64 = (0..y.len())
        .map(|i| {
            let r = problem.y()[i] - sol.theta_hat[i];
            problem.w()[i] * r * r
        })
        .sum();
    Ok(n_star * rss / (denom * denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalty::{penalty_1d, penalty_2d};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    /// Weighted least-squares polynomial fit of degree `< q` through `(i, y_i)`,
    /// via normal equations in a centered monomial basis.
    fn wls_polynomial(y: &DVector<f64>, w: &DVector<f64>, q: usize) -> DVector<f64> {
        let n = y.len();
        let c = (n as f64 - 1.0) / 2.0;
        let x = DMatrix::from_fn(n, q, |i, k| ((i as f64 - c) / n as f64).powi(k as i32));
        let xtw = x.transpose() * DMatrix::from_diagonal(w);
        let a = &xtw * &x;
        let b = &xtw * y;
        let coef = a.lu().solve(&b).unwrap();
        x * coef
    }

    #[test]
    fn zero_lambda_returns_data() {
        let y = v(&[0.3, -1.0, 2.5, 0.0, 1.0]);
        let w = v(&[1.0, 2.0, 0.5, 3.0, 1.0]);
        let fit = fit_gaussian(&y, &w, &penalty_1d(5, 2, 0.0).unwrap()).unwrap();
        assert!((&fit.theta_hat - &y).amax() < 1e-12);
        assert!(fit.marginal_loglik.is_none());
    }

    #[test]
    fn two_point_case() {
        let fit = fit_gaussian(&v(&[0.0, 1.0]), &v(&[1.0, 1.0]), &penalty_1d(2, 1, 1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(fit.theta_hat[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.theta_hat[1], 2.0 / 3.0, epsilon = 1e-14);

        let (lo, hi) = credible_intervals(&fit, 0.05).unwrap();
        let half = 1.959_963_984_540_054 * (2.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(hi[0] - fit.theta_hat[0], half, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.theta_hat[1] - lo[1], half, epsilon = 1e-12);

        let want = -0.5 * (1.0 / 3.0 - 0.0 - 2f64.ln() + 3f64.ln() + (2.0 * PI).ln());
        assert_abs_diff_eq!(fit.marginal_loglik.unwrap(), want, epsilon = 1e-13);
    }

    #[test]
    fn alpha_must_be_inside_unit_interval() {
        let fit = fit_gaussian(&v(&[0.0, 1.0]), &v(&[1.0, 1.0]), &penalty_1d(2, 1, 1.0).unwrap()).unwrap();
        assert!(credible_intervals(&fit, 1.0).is_err());
        assert!(credible_intervals(&fit, 0.0).is_err());
    }

    #[test]
    fn zero_lambda_interval_width() {
        let y = v(&[1.0, 2.0, 3.0]);
        let w = v(&[4.0, 4.0, 4.0]);
        let fit = fit_gaussian(&y, &w, &penalty_1d(3, 1, 0.0).unwrap()).unwrap();
        let (lo, hi) = credible_intervals(&fit, 0.1).unwrap();
        let z = normal_quantile(0.1).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(hi[i] - lo[i], 2.0 * z * 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn huge_lambda_gives_weighted_line() {
        let n = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let w = DVector::from_fn(n, |i, _| 0.5 + (i % 4) as f64);
        let fit = fit_gaussian(&y, &w, &penalty_1d(n, 2, 1e12).unwrap()).unwrap();
        let line = wls_polynomial(&y, &w, 2);
        assert!((&fit.theta_hat - line).amax() < 1e-4);
    }

    #[test]
    fn singular_system_is_reported() {
        // q = 2 but a single positive weight cannot pin down a line
        let w = v(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        let y = v(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        let r = fit_gaussian(&y, &w, &penalty_1d(5, 2, 10.0).unwrap());
        assert!(matches!(r, Err(WhError::SingularSystem(_))), "{r:?}");
    }

    #[test]
    fn zero_weight_cells_ignore_y() {
        let w = v(&[1.0, 0.0, 1.0, 1.0]);
        let a = fit_gaussian(&v(&[1.0, f64::NAN, 0.5, 2.0]), &w, &penalty_1d(4, 2, 3.0).unwrap()).unwrap();
        let b = fit_gaussian(&v(&[1.0, 1e6, 0.5, 2.0]), &w, &penalty_1d(4, 2, 3.0).unwrap()).unwrap();
        assert!((&a.theta_hat - &b.theta_hat).amax() < 1e-12);
        assert_eq!(a.n_star, 3);
        assert_eq!(a.marginal_loglik, b.marginal_loglik);
    }

    /// ln ∫ exp(-½[(y-θ)ᵀW(y-θ) + θᵀPθ]) dθ over the coordinates of the
    /// eigenbasis of P, by tensor Simpson quadrature, plus normalizing
    /// constants of likelihood and improper prior.
    fn quadrature_marginal(y: &DVector<f64>, w: &DVector<f64>, p: &DMatrix<f64>) -> f64 {
        let n = y.len();
        let (s, v) = crate::linalg::sym_eigen_sorted(p);
        let a_mat = DMatrix::from_diagonal(w) + p;
        let mode = a_mat.clone().lu().solve(&(DMatrix::from_diagonal(w) * y)).unwrap();
        let center = v.transpose() * &mode;
        let cov = (v.transpose() * a_mat * &v).try_inverse().unwrap();
        let m = 120usize;
        let half: Vec<f64> = (0..n).map(|k| 9.0 * cov[(k, k)].sqrt()).collect();
        let h: Vec<f64> = half.iter().map(|hw| 2.0 * hw / m as f64).collect();
        let simpson = |i: usize| if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let energy = |a: &DVector<f64>| {
            let th = &v * a;
            let r = y - &th;
            let mut e = 0.0;
            for i in 0..n {
                e += w[i] * r[i] * r[i];
            }
            for k in 0..n {
                e += s[k].max(0.0) * a[k] * a[k];
            }
            e
        };
        let e0 = energy(&center);
        let mut total = 0.0;
        let mut idx = vec![0usize; n];
        loop {
            let a = DVector::from_fn(n, |k, _| center[k] - half[k] + idx[k] as f64 * h[k]);
            let wt: f64 = idx.iter().map(|&i| simpson(i)).product();
            total += wt * (-0.5 * (energy(&a) - e0)).exp();
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] <= m {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
        let vol: f64 = h.iter().map(|hk| hk / 3.0).product();
        let ln_int = (total * vol).ln() - 0.5 * e0;
        let zero_tol = s.max() * 1e-10;
        let q = s.iter().filter(|x| **x <= zero_tol).count();
        let ln_pdet: f64 = s.iter().filter(|x| **x > zero_tol).map(|x| x.ln()).sum();
        let ln_w: f64 = w.iter().filter(|x| **x > 0.0).map(|x| x.ln()).sum();
        let n_star = w.iter().filter(|x| **x > 0.0).count();
        0.5 * ln_w - 0.5 * n_star as f64 * (2.0 * PI).ln() + 0.5 * ln_pdet
            - 0.5 * (n - q) as f64 * (2.0 * PI).ln()
            + ln_int
    }

    #[test]
    fn marginal_matches_quadrature_oracle() {
        let cases = [
            (v(&[0.0, 1.0]), v(&[1.0, 1.0]), 1usize, 1.0),
            (v(&[0.4, -0.3]), v(&[2.0, 0.5]), 1, 7.0),
            (v(&[0.2, 1.1, 0.7]), v(&[1.0, 0.3, 2.0]), 1, 0.8),
            (v(&[0.2, 1.1, 0.7]), v(&[1.0, 0.3, 2.0]), 2, 3.0),
        ];
        for (y, w, q, lambda) in cases {
            let pen = penalty_1d(y.len(), q, lambda).unwrap();
            let got = marginal_loglik_norm(&[lambda], &y, &w, pen.template()).unwrap();
            let want = quadrature_marginal(&y, &w, pen.matrix());
            assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn linear_data_pushes_lambda_to_upper_bound() {
        let n = 25;
        let y = DVector::from_fn(n, |i, _| 0.3 - 0.07 * i as f64);
        let w = DVector::from_fn(n, |i, _| 1.0 + (i % 3) as f64);
        let t = PenaltyTemplate::one_d(n, 2).unwrap();
        let problem = GaussianProblem::new(&y, &w, &t).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=180 {
            let u = -6.0 + 0.1 * k as f64;
            let l = problem.marginal_loglik(&[10f64.powf(u)]).unwrap();
            assert!(l >= prev - 1e-9 * prev.abs().max(1.0), "drop at log10 λ = {u}");
            prev = l;
        }
        let (lambda_hat, _) = select_lambda_norm(&y, &w, &t, &SearchConfig::default()).unwrap();
        assert_eq!(lambda_hat[0], 1e12);
    }

    #[test]
    fn pure_noise_selects_fewer_than_half_the_degrees_of_freedom() {
        let n = 50;
        let t = PenaltyTemplate::one_d(n, 2).unwrap();
        let w = DVector::from_element(n, 1.0);
        let mut edfs = Vec::new();
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let (_, fit) = select_lambda_norm(&y, &w, &t, &SearchConfig::default()).unwrap();
            edfs.push(fit.edf);
        }
        eprintln!("pure-noise selected edf: {edfs:.2?}");
        assert!(edfs.iter().all(|e| *e < n as f64 / 2.0));
    }

    #[test]
    fn symmetric_2d_problem() {
        let (nx, nz) = (7, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid: Vec<f64> = (0..nx * nz)
            .map(|k| {
                let (i, j) = ((k % nx) as f64, (k / nx) as f64);
                let e: f64 = StandardNormal.sample(&mut rng);
                0.1 * i - 0.05 * j * j / 7.0 + 0.3 * e
            })
            .collect();
        let y = DVector::from_vec(grid.clone());
        let yt = DVector::from_fn(nx * nz, |k, _| grid[(k % nx) * nx + k / nx]);
        let w = DVector::from_element(nx * nz, 1.0);
        let t = PenaltyTemplate::two_d(nx, nz, 2, 2).unwrap();
        let cfg = SearchConfig { tol: 1e-6, max_evals: 1000, ..SearchConfig::default() };
        let (a, _) = select_lambda_norm(&y, &w, &t, &cfg).unwrap();
        let (b, _) = select_lambda_norm(&yt, &w, &t, &cfg).unwrap();
        assert!((a[0].log10() - b[1].log10()).abs() < 1e-3, "{a:?} {b:?}");
        assert!((a[1].log10() - b[0].log10()).abs() < 1e-3, "{a:?} {b:?}");
    }

    #[test]
    fn small_lambda_limit_is_linear() {
        let y = v(&[0.3, -1.0, 2.5, 0.0, 1.0, 0.2]);
        let w = v(&[1.0, 2.0, 0.5, 3.0, 1.0, 1.5]);
        let err = |l: f64| (fit_gaussian(&y, &w, &penalty_1d(6, 2, l).unwrap()).unwrap().theta_hat - &y).amax();
        let r = err(1e-5) / err(1e-6);
        assert!((r - 10.0).abs() < 0.01, "ratio {r}");
    }

    #[test]
    fn gcv_guard_and_scale_invariance() {
        let y = v(&[0.3, -1.0, 2.5, 0.0, 1.0, 0.2]);
        let w = v(&[1.0, 2.0, 0.5, 3.0, 1.0, 1.5]);
        let t = PenaltyTemplate::one_d(6, 2).unwrap();
        assert!(matches!(gcv(&[1e-13], &y, &w, &t), Err(WhError::Undefined(_))));
        assert!(matches!(gcv(&[0.0], &y, &w, &t), Err(WhError::Undefined(_))));
        let a = fit_gaussian(&y, &w, &t.with_lambdas(&[2.0]).unwrap()).unwrap();
        let b = fit_gaussian(&y, &(&w * 7.0), &t.with_lambdas(&[14.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(a.edf, b.edf, epsilon = 1e-12);
        assert!((a.theta_hat - b.theta_hat).amax() < 1e-12);
    }

    fn arb_case() -> impl Strategy<Value = (DVector<f64>, DVector<f64>, usize, f64)> {
        (4usize..40, 1usize..4, -3.0f64..6.0, any::<u64>()).prop_map(|(n, q, lu, seed)| {
            let q = q.min(n - 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let w = DVector::from_fn(n, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (0.5 * z).exp()
            });
            (y, w, q, 10f64.powf(lu))
        })
    }

    proptest! {
        #[test]
        fn normal_equations_hold((y, w, q, lambda) in arb_case()) {
            let pen = penalty_1d(y.len(), q, lambda).unwrap();
            let fit = fit_gaussian(&y, &w, &pen).unwrap();
            let wy = w.component_mul(&y);
            let lhs = w.component_mul(&fit.theta_hat) + pen.matrix() * &fit.theta_hat;
            prop_assert!((lhs - &wy).amax() <= 1e-8 * wy.amax());
            prop_assert!(fit.edf > 0.0 && fit.edf <= y.len() as f64 + 1e-9);
            prop_assert!(fit.edf >= q as f64 - 1e-9);
        }

        #[test]
        fn polynomials_are_reproduced(n in 5usize..40, q in 1usize..4, c in prop::collection::vec(-2.0f64..2.0, 3), lu in 0.0f64..8.0) {
            let y = DVector::from_fn(n, |i, _| {
                let x = i as f64 / n as f64;
                (0..q).map(|k| c[k] * x.powi(k as i32)).sum::<f64>()
            });
            let w = DVector::from_fn(n, |i, _| 0.2 + (i % 5) as f64);
            let fit = fit_gaussian(&y, &w, &penalty_1d(n, q, 10f64.powf(lu)).unwrap()).unwrap();
            prop_assert!((&fit.theta_hat - &y).amax() <= 1e-8);
        }

        #[test]
        fn two_d_normal_equations(nx in 3usize..8, nz in 3usize..8, lx in -2.0f64..4.0, lz in -2.0f64..4.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = nx * nz;
            let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let w = DVector::from_fn(n, |_, _| 0.5 + rand::Rng::random::<f64>(&mut rng));
            let pen = penalty_2d(nx, nz, 2, 2, 10f64.powf(lx), 10f64.powf(lz)).unwrap();
            let fit = fit_gaussian(&y, &w, &pen).unwrap();
            let wy = w.component_mul(&y);
            let lhs = w.component_mul(&fit.theta_hat) + pen.matrix() * &fit.theta_hat;
            prop_assert!((lhs - &wy).amax() <= 1e-8 * wy.amax());
        }
    }
}
