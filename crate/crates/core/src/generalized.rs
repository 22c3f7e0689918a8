//! Generalized Whittaker-Henderson smoothing of event counts.
//!
//! With `θ = ln μ` the log-hazard on each cell, events `d` and central
//! exposures `e_c`,
//!
//! ```text
//! ℓ(θ)   = θᵀd - exp(θ)ᵀe_c
//! ℓ_P(θ) = ℓ(θ) - ½ θᵀP_λθ
//! ```
//!
//! `ℓ_P` is maximized by Newton's method written as repeated weighted
//! smoothing of the working vector `z_k = θ_k + W_k⁻¹(d - exp(θ_k)⊙e_c)`
//! with weights `W_k = Diag(exp(θ_k)⊙e_c)`. Smoothing parameters are chosen
//! by maximizing the Laplace approximation of the marginal likelihood,
//! either around a full Newton solve ("outer" iteration) or inside each
//! Newton step on the working data ("performance" iteration).

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::{EigenBasis, PenalizedSystem};
use crate::error::{Result, WhError};
use crate::gaussian::{band, log_pdet_of_diag, GaussianProblem};
use crate::optimize::{search_log10, SearchConfig};
use crate::penalty::{PenaltyOperator, PenaltyTemplate};

/// Validated event counts and exposures.
#[derive(Debug, Clone, PartialEq)]
pub struct CountData {
    pub d: DVector<f64>,
    pub ec: DVector<f64>,
}

impl CountData {
    pub fn new(d: DVector<f64>, ec: DVector<f64>) -> Result<Self> {
        if d.len() != ec.len() {
            return Err(WhError::InvalidParameter(format!(
                "d has length {} but e_c has length {}",
                d.len(),
                ec.len()
            )));
        }
        for i in 0..d.len() {
            if !(d[i] >= 0.0) || !d[i].is_finite() || !(ec[i] >= 0.0) || !ec[i].is_finite() {
                return Err(WhError::InvalidParameter(format!(
                    "d and e_c must be finite and >= 0 (cell {i})"
                )));
            }
            if d[i] > 0.0 && ec[i] == 0.0 {
                return Err(WhError::DataInconsistency { index: i, d: d[i] });
            }
        }
        Ok(Self { d, ec })
    }

    pub fn from_slices(d: &[f64], ec: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(d), DVector::from_column_slice(ec))
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn total_events(&self) -> f64 {
        self.d.sum()
    }

    fn require_events(&self) -> Result<()> {
        if self.total_events() > 0.0 {
            Ok(())
        } else {
            Err(WhError::InvalidParameter(
                "no events observed: the log-hazard is not identifiable".into(),
            ))
        }
    }

    /// `ℓ(θ) = θᵀd - exp(θ)ᵀe_c`.
    pub fn loglik(&self, theta: &DVector<f64>) -> f64 {
        let mut l = 0.0;
        for i in 0..self.len() {
            if self.d[i] > 0.0 {
                l += theta[i] * self.d[i];
            }
            if self.ec[i] > 0.0 {
                l -= theta[i].exp() * self.ec[i];
            }
        }
        l
    }

    /// `W_θ = exp(θ)⊙e_c`.
    pub fn weights(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| {
            if self.ec[i] > 0.0 {
                theta[i].exp() * self.ec[i]
            } else {
                0.0
            }
        })
    }

    /// Score of the unpenalized likelihood, `d - exp(θ)⊙e_c`.
    pub fn score(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.d - self.weights(theta)
    }

    /// Starting point: `ln(d/e_c)` where `d > 0`, `ln((d+½)/(e_c+½))` where
    /// `d = 0 < e_c`, and the global crude rate where `e_c = 0`.
    pub fn initial_theta(&self) -> DVector<f64> {
        let global = (self.d.sum() / self.ec.sum()).ln();
        DVector::from_fn(self.len(), |i, _| {
            let (d, e) = (self.d[i], self.ec[i]);
            if e == 0.0 {
                global
            } else if d > 0.0 {
                (d / e).ln()
            } else {
                ((d + 0.5) / (e + 0.5)).ln()
            }
        })
    }

    /// Working observations `z = θ + W⁻¹(d - W)` with weights `W`; cells with
    /// zero weight get `z = 0`.
    pub fn working_data(&self, theta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let w = self.weights(theta);
        let z = DVector::from_fn(self.len(), |i, _| {
            if w[i] > 0.0 {
                theta[i] + (self.d[i] - w[i]) / w[i]
            } else {
                0.0
            }
        });
        (z, w)
    }
}

/// `ℓ_P(θ) = θᵀd - exp(θ)ᵀe_c - ½θᵀP_λθ`.
pub fn penalized_loglik(
    theta: &DVector<f64>,
    d: &DVector<f64>,
    ec: &DVector<f64>,
    penalty: &PenaltyOperator,
) -> Result<f64> {
    let data = CountData::new(d.clone(), ec.clone())?;
    check_len(theta.len(), penalty.len())?;
    Ok(data.loglik(theta) - 0.5 * penalty_quad(penalty.template(), penalty.lambdas(), theta)?)
}

/// Gradient of `ℓ_P`: `d - exp(θ)⊙e_c - P_λθ`.
pub fn gradient(
    theta: &DVector<f64>,
    d: &DVector<f64>,
    ec: &DVector<f64>,
    penalty: &PenaltyOperator,
) -> Result<DVector<f64>> {
    let data = CountData::new(d.clone(), ec.clone())?;
    check_len(theta.len(), penalty.len())?;
    Ok(data.score(theta) - penalty.matrix() * theta)
}

/// Hessian of `ℓ_P`: `-(Diag(exp(θ)⊙e_c) + P_λ)`.
pub fn hessian(
    theta: &DVector<f64>,
    ec: &DVector<f64>,
    penalty: &PenaltyOperator,
) -> Result<DMatrix<f64>> {
    check_len(theta.len(), penalty.len())?;
    check_len(ec.len(), penalty.len())?;
    let mut h = penalty.matrix().clone();
    for i in 0..theta.len() {
        if ec[i] > 0.0 {
            h[(i, i)] += theta[i].exp() * ec[i];
        }
    }
    Ok(-h)
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(WhError::InvalidParameter(format!(
            "expected a vector of length {want}, got {got}"
        )));
    }
    Ok(())
}

/// `θᵀP_λθ` evaluated in eigen-coordinates (exactly zero on the null space).
pub fn penalty_quad(template: &PenaltyTemplate, lambdas: &[f64], theta: &DVector<f64>) -> Result<f64> {
    let basis = EigenBasis::full(template)?;
    let beta = basis.project(theta);
    let eig = basis.eigenvalues(lambdas);
    Ok(beta.iter().zip(eig.iter()).map(|(b, e)| e * b * b).sum())
}

/// Settings for the Newton solver.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOptions {
    /// Stop once the gain in `ℓ_P` falls below `eps_l·sum(d)`.
    pub eps_l: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Starting point; [`CountData::initial_theta`] when `None`.
    pub theta0: Option<DVector<f64>>,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            eps_l: 1e-8,
            max_iter: 50,
            max_halvings: 10,
            theta0: None,
        }
    }
}

/// Result of maximizing `ℓ_P` at fixed λ.
#[derive(Debug, Clone)]
pub struct GeneralizedFit {
    pub data: CountData,
    pub penalty: PenaltyOperator,
    pub theta_hat: DVector<f64>,
    /// Factorization of `W_θ̂ + P_λ`.
    pub system: PenalizedSystem,
    /// `W_θ̂ = exp(θ̂)⊙e_c`.
    pub weights: DVector<f64>,
    pub loglik: f64,
    pub penalized_loglik: f64,
    /// Laplace approximation `ℓ_ML(λ)`; `None` when every λ is zero.
    pub laplace_marginal: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `ℓ_P` at the start point and after each accepted step.
    pub trace: Vec<f64>,
}

impl GeneralizedFit {
    pub fn lambdas(&self) -> &[f64] {
        self.penalty.lambdas()
    }

    /// `diag((W_θ̂ + P_λ)⁻¹)`, the posterior variances of `θ`.
    pub fn psi_diag(&self) -> DVector<f64> {
        self.system.psi_diagonal()
    }

    pub fn psi(&self) -> DMatrix<f64> {
        self.system.psi()
    }

    /// Effective degrees of freedom `tr[(W_θ̂ + P_λ)⁻¹ W_θ̂]`.
    pub fn edf(&self) -> f64 {
        self.psi_diag().dot(&self.weights)
    }

    /// Working data `(z, W)` at `θ̂`.
    pub fn working_data(&self) -> (DVector<f64>, DVector<f64>) {
        self.data.working_data(&self.theta_hat)
    }

    /// Pointwise credible band for `θ`.
    pub fn credible_intervals(&self, alpha: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        band(&self.theta_hat, &self.psi_diag(), alpha)
    }

    /// `‖d - exp(θ̂)⊙e_c - P_λθ̂‖∞`.
    pub fn gradient_norm(&self) -> f64 {
        (self.data.score(&self.theta_hat) - self.penalty.matrix() * &self.theta_hat).amax()
    }
}

/// One Newton step `(W_k + P_λ)⁻¹ W_k z_k` from `theta`, without step control.
pub fn newton_step(theta: &DVector<f64>, data: &CountData, penalty: &PenaltyOperator) -> Result<DVector<f64>> {
    let basis = EigenBasis::full(penalty.template())?;
    Ok(NewtonState::new(theta.clone(), data, &basis, penalty.lambdas())?.next_theta)
}

struct NewtonState {
    next_theta: DVector<f64>,
}

impl NewtonState {
    fn new(theta: DVector<f64>, data: &CountData, basis: &Arc<EigenBasis>, lambdas: &[f64]) -> Result<Self> {
        let w = data.weights(&theta);
        let gram = basis.weighted_gram(&w);
        let system = PenalizedSystem::new(Arc::clone(basis), &gram, lambdas)?;
        // W_k z_k = W_k θ_k + (d - W_k)
        let wz = w.component_mul(&theta) + &data.d - &w;
        let next_theta = basis.expand(&system.solve_coords(&basis.project(&wz)));
        Ok(Self { next_theta })
    }
}

fn penalized_value(data: &CountData, basis: &EigenBasis, eig: &DVector<f64>, theta: &DVector<f64>) -> f64 {
    let beta = basis.project(theta);
    let quad: f64 = beta.iter().zip(eig.iter()).map(|(b, e)| e * b * b).sum();
    data.loglik(theta) - 0.5 * quad
}

/// Maximizes `ℓ_P` by Newton iterations with step halving.
pub fn newton_fit(data: &CountData, penalty: &PenaltyOperator, options: &NewtonOptions) -> Result<GeneralizedFit> {
    check_len(data.len(), penalty.len())?;
    data.require_events()?;
    let lambdas = penalty.lambdas();
    let basis = EigenBasis::full(penalty.template())?;
    let eig = basis.eigenvalues(lambdas);
    let threshold = options.eps_l * data.total_events();

    let mut theta = match &options.theta0 {
        Some(t) => {
            check_len(t.len(), data.len())?;
            t.clone()
        }
        None => data.initial_theta(),
    };
    let mut l_cur = penalized_value(data, &basis, &eig, &theta);
    let mut trace = vec![l_cur];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iter {
        iterations += 1;
        let state = NewtonState::new(theta.clone(), data, &basis, lambdas)
            .map_err(|e| e.with_lambda(lambdas))?;
        let step = &state.next_theta - &theta;
        let mut t = 1.0;
        let mut cand = state.next_theta;
        let mut l_new = penalized_value(data, &basis, &eig, &cand);
        let mut halvings = 0;
        while !(l_new >= l_cur) && halvings < options.max_halvings {
            t *= 0.5;
            halvings += 1;
            cand = &theta + &step * t;
            l_new = penalized_value(data, &basis, &eig, &cand);
        }
        if !(l_new >= l_cur) {
            if l_cur - l_new < threshold && l_new.is_finite() {
                // no ascent direction left above rounding level
                converged = true;
                break;
            }
            return Err(WhError::Convergence {
                iterations,
                trace,
                lambda: Some(lambdas.to_vec()),
                reason: "step halving could not increase the penalized likelihood".into(),
            });
        }
        // first pass compares against l_0 = -inf
        let gain = if iterations == 1 { f64::INFINITY } else { l_new - l_cur };
        theta = cand;
        l_cur = l_new;
        trace.push(l_cur);
        if gain < threshold {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(WhError::Convergence {
            iterations,
            trace,
            lambda: Some(lambdas.to_vec()),
            reason: format!("no convergence within {} iterations", options.max_iter),
        });
    }
    finish_fit(data, penalty, &basis, theta, iterations, trace)
}

fn finish_fit(
    data: &CountData,
    penalty: &PenaltyOperator,
    basis: &Arc<EigenBasis>,
    theta: DVector<f64>,
    iterations: usize,
    trace: Vec<f64>,
) -> Result<GeneralizedFit> {
    let lambdas = penalty.lambdas();
    let weights = data.weights(&theta);
    let gram = basis.weighted_gram(&weights);
    let system = PenalizedSystem::new(Arc::clone(basis), &gram, lambdas).map_err(|e| e.with_lambda(lambdas))?;
    let beta = basis.project(&theta);
    let quad = system.penalty_quad(&beta);
    let loglik = data.loglik(&theta);
    let laplace_marginal = if lambdas.iter().any(|l| *l > 0.0) {
        let (log_pdet, q) = log_pdet_of_diag(system.eigenvalues());
        Some(loglik - 0.5 * (quad - log_pdet + system.ln_det() - q as f64 * (2.0 * PI).ln()))
    } else {
        None
    };
    Ok(GeneralizedFit {
        data: data.clone(),
        penalty: penalty.clone(),
        theta_hat: theta,
        system,
        weights,
        loglik,
        penalized_loglik: loglik - 0.5 * quad,
        laplace_marginal,
        iterations,
        converged: true,
        trace,
    })
}

/// `ℓ_ML(λ) = ℓ(θ̂) - ½[θ̂ᵀP_λθ̂ - ln|P_λ|₊ + ln|W_θ̂ + P_λ| - q ln 2π]`.
pub fn laplace_marginal_loglik(fit: &GeneralizedFit) -> Result<f64> {
    if !fit.converged {
        return Err(WhError::InvalidParameter(
            "the Laplace approximation needs a converged fit".into(),
        ));
    }
    fit.laplace_marginal.ok_or(WhError::UndefinedPdet)
}

/// Settings for smoothing-parameter selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOptions {
    pub newton: NewtonOptions,
    /// Marginal-likelihood tolerance, scaled by `sum(d)`.
    pub eps_ml: f64,
    pub search: SearchConfig,
    /// Outer iteration: start each Newton solve from the previous `θ̂`.
    pub warm_start: bool,
    /// Performance iteration: give up after this many consecutive
    /// decreases of `ℓ_P`.
    pub max_decreases: usize,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            newton: NewtonOptions::default(),
            eps_ml: 1e-8,
            search: SearchConfig::default(),
            warm_start: false,
            max_decreases: 3,
        }
    }
}

/// Selected smoothing parameters and the full-rank fit at them.
#[derive(Debug, Clone)]
pub struct Selection {
    pub lambda: Vec<f64>,
    pub fit: GeneralizedFit,
    /// Objective evaluations (outer) or Gaussian selections (performance).
    pub evaluations: usize,
    /// Performance iteration: λ selected at each step.
    pub lambda_trace: Vec<Vec<f64>>,
    pub hit_max_evals: bool,
}

fn search_config_for(data: &CountData, opts: &SelectionOptions, dim: usize) -> SearchConfig {
    let mut cfg = opts.search.clone();
    if dim == 2 && cfg.ftol.is_none() {
        cfg.ftol = Some(opts.eps_ml * data.total_events());
    }
    cfg
}

/// λ selection with a full Newton solve per candidate (outer iteration).
pub fn select_lambda_outer(
    data: &CountData,
    template: &PenaltyTemplate,
    opts: &SelectionOptions,
) -> Result<Selection> {
    check_len(data.len(), template.len())?;
    data.require_events()?;
    let cfg = search_config_for(data, opts, template.dim());
    let mut last_theta: Option<DVector<f64>> = None;
    let mut evaluations = 0;
    let opt = search_log10(template.dim(), &cfg, |u| {
        let l: Vec<f64> = u.iter().map(|v| 10f64.powf(*v)).collect();
        let pen = template.with_lambdas(&l)?;
        let mut nopts = opts.newton.clone();
        if opts.warm_start {
            if let Some(t) = &last_theta {
                nopts.theta0 = Some(t.clone());
            }
        }
        evaluations += 1;
        let fit = newton_fit(data, &pen, &nopts).map_err(|e| e.with_lambda(&l))?;
        let ml = laplace_marginal_loglik(&fit)?;
        last_theta = Some(fit.theta_hat);
        Ok(ml)
    })?;
    let lambda: Vec<f64> = opt.x.iter().map(|v| 10f64.powf(*v)).collect();
    let fit = newton_fit(data, &template.with_lambdas(&lambda)?, &opts.newton)?;
    Ok(Selection {
        lambda: lambda.clone(),
        fit,
        evaluations,
        lambda_trace: vec![lambda],
        hit_max_evals: opt.hit_max_evals,
    })
}

/// λ selection re-done on the working data at every Newton step
/// (performance iteration), with inner Gaussian problems in `basis`
/// (full or reduced). The returned fit is always a full-rank Newton solve.
pub fn select_lambda_performance_in(
    data: &CountData,
    template: &PenaltyTemplate,
    basis: Arc<EigenBasis>,
    opts: &SelectionOptions,
) -> Result<Selection> {
    check_len(data.len(), template.len())?;
    data.require_events()?;
    let cfg = search_config_for(data, opts, template.dim());
    let full = EigenBasis::full(template)?;
    let threshold = opts.newton.eps_l * data.total_events();

    let mut theta = match &opts.newton.theta0 {
        Some(t) => t.clone(),
        None => data.initial_theta(),
    };
    let mut l_prev = f64::NEG_INFINITY;
    let mut trace = Vec::new();
    let mut lambda_trace = Vec::new();
    let mut decreases = 0;
    let mut converged = false;
    let mut lambda = Vec::new();

    for it in 1..=opts.newton.max_iter {
        let (z, w) = data.working_data(&theta);
        let problem = GaussianProblem::with_basis(&z, &w, template, Arc::clone(&basis))?;
        let (lk, _) = problem.select_lambda(&cfg)?;
        let sol = problem.solve(&lk).map_err(|e| e.with_lambda(&lk))?;
        let eig = full.eigenvalues(&lk);
        let l_new = penalized_value(data, &full, &eig, &sol.theta_hat);
        let gain = l_new - l_prev;
        theta = sol.theta_hat;
        lambda = lk.clone();
        lambda_trace.push(lk);
        trace.push(l_new);
        if gain.abs() < threshold {
            converged = true;
            break;
        }
        if gain < 0.0 {
            decreases += 1;
            if decreases >= opts.max_decreases {
                return Err(WhError::Convergence {
                    iterations: it,
                    trace,
                    lambda: Some(lambda),
                    reason: format!(
                        "penalized likelihood decreased {} times in a row",
                        opts.max_decreases
                    ),
                });
            }
        } else {
            decreases = 0;
        }
        l_prev = l_new;
    }
    if !converged {
        return Err(WhError::Convergence {
            iterations: opts.newton.max_iter,
            trace,
            lambda: Some(lambda),
            reason: "performance iteration did not settle".into(),
        });
    }
    let fit = newton_fit(data, &template.with_lambdas(&lambda)?, &opts.newton)?;
    Ok(Selection {
        lambda,
        fit,
        evaluations: lambda_trace.len(),
        lambda_trace,
        hit_max_evals: false,
    })
}

/// Performance iteration with full-rank inner problems.
pub fn select_lambda_performance(
    data: &CountData,
    template: &PenaltyTemplate,
    opts: &SelectionOptions,
) -> Result<Selection> {
    select_lambda_performance_in(data, template, EigenBasis::full(template)?, opts)
}

/// Maximum-likelihood fit restricted to the penalty null space
/// (the limit of infinite smoothing).
#[derive(Debug, Clone)]
pub struct InfinityFit {
    pub theta: DVector<f64>,
    /// Coordinates in the orthonormal null-space basis.
    pub coefficients: DVector<f64>,
    pub loglik: f64,
    pub weights: DVector<f64>,
    pub iterations: usize,
}

/// Polynomial (null-space) maximum-likelihood fit, by Newton's method in
/// an orthonormal basis of the null space.
pub fn theta_infinity(data: &CountData, template: &PenaltyTemplate, options: &NewtonOptions) -> Result<InfinityFit> {
    check_len(data.len(), template.len())?;
    data.require_events()?;
    let nb = EigenBasis::new(template, template.orders())?;
    let n_basis = nb.u();
    let global = (data.d.sum() / data.ec.sum()).ln();
    let mut a = n_basis.tr_mul(&DVector::from_element(data.len(), global));
    let mut theta = n_basis * &a;
    let mut l_cur = data.loglik(&theta);
    let threshold = options.eps_l * data.total_events();
    let mut trace = vec![l_cur];
    for it in 1..=options.max_iter {
        let w = data.weights(&theta);
        let g = n_basis.tr_mul(&data.score(&theta));
        let h = nb.weighted_gram(&w);
        let factor = crate::linalg::SpdFactor::new(h, "polynomial fit information matrix")?;
        let step = factor.solve(&g);
        let mut t = 1.0;
        let mut a_new = &a + &step;
        let mut th_new = n_basis * &a_new;
        let mut l_new = data.loglik(&th_new);
        let mut halvings = 0;
        while !(l_new >= l_cur) && halvings < options.max_halvings {
            t *= 0.5;
            halvings += 1;
            a_new = &a + &step * t;
            th_new = n_basis * &a_new;
            l_new = data.loglik(&th_new);
        }
        if !(l_new >= l_cur) {
            if l_cur - l_new < threshold {
                return Ok(InfinityFit { weights: data.weights(&theta), theta, coefficients: a, loglik: l_cur, iterations: it });
            }
            return Err(WhError::Convergence {
                iterations: it,
                trace,
                lambda: None,
                reason: "polynomial fit: step halving failed".into(),
            });
        }
        let gain = l_new - l_cur;
        a = a_new;
        theta = th_new;
        l_cur = l_new;
        trace.push(l_cur);
        if gain < threshold {
            return Ok(InfinityFit { weights: data.weights(&theta), theta, coefficients: a, loglik: l_cur, iterations: it });
        }
    }
    Err(WhError::Convergence {
        iterations: options.max_iter,
        trace,
        lambda: None,
        reason: "polynomial fit did not converge".into(),
    })
}

/// `Δ(θ) = [ℓ_P(θ̂_ML) - ℓ_P(θ)] / [ℓ_P(θ̂_ML) - ℓ_P(θ̂_∞)]`, all at the
/// smoothing parameters of `fit_ml`.
pub fn delta_theta(theta_probe: &DVector<f64>, fit_ml: &GeneralizedFit, theta_inf: &InfinityFit) -> Result<f64> {
    check_len(theta_probe.len(), fit_ml.data.len())?;
    let template = fit_ml.penalty.template();
    let lambdas = fit_ml.lambdas();
    let lp = |t: &DVector<f64>| -> Result<f64> {
        Ok(fit_ml.data.loglik(t) - 0.5 * penalty_quad(template, lambdas, t)?)
    };
    let top = fit_ml.penalized_loglik;
    let denom = top - lp(&theta_inf.theta)?;
    if !(denom > 0.0) {
        return Err(WhError::Undefined(format!(
            "Δ(θ) denominator is {denom:.3e}: the polynomial fit is already optimal"
        )));
    }
    Ok((top - lp(theta_probe)?) / denom)
}

/// `ℓ_ML(∞)` at the penalty of `fit_ml`:
/// `ℓ(θ̂_∞) - ½[0 - ln|P_λ|₊ + ln|W_∞ + P_λ| - q ln 2π]`.
pub fn ml_infinity(fit_ml: &GeneralizedFit, theta_inf: &InfinityFit) -> Result<f64> {
    let template = fit_ml.penalty.template();
    let lambdas = fit_ml.lambdas();
    let basis = EigenBasis::full(template)?;
    let gram = basis.weighted_gram(&theta_inf.weights);
    let system = PenalizedSystem::new(basis, &gram, lambdas)?;
    let (log_pdet, q) = log_pdet_of_diag(system.eigenvalues());
    if lambdas.iter().all(|l| *l == 0.0) {
        return Err(WhError::UndefinedPdet);
    }
    Ok(theta_inf.loglik - 0.5 * (-log_pdet + system.ln_det() - q as f64 * (2.0 * PI).ln()))
}

/// Reference quantities for `Δ(λ)`: `ℓ_ML(λ̂_ref)` and `ℓ_ML(∞)`.
#[derive(Debug, Clone)]
pub struct MarginalReference {
    pub lambda_ref: Vec<f64>,
    pub ml_ref: f64,
    pub ml_inf: f64,
    data: CountData,
    template: PenaltyTemplate,
    newton: NewtonOptions,
}

impl MarginalReference {
    pub fn new(
        data: &CountData,
        template: &PenaltyTemplate,
        lambda_ref: &[f64],
        newton: &NewtonOptions,
    ) -> Result<Self> {
        let fit = newton_fit(data, &template.with_lambdas(lambda_ref)?, newton)?;
        Self::from_fit(&fit, newton)
    }

    pub fn from_fit(fit: &GeneralizedFit, newton: &NewtonOptions) -> Result<Self> {
        let template = fit.penalty.template().clone();
        let inf = theta_infinity(&fit.data, &template, newton)?;
        Ok(Self {
            lambda_ref: fit.lambdas().to_vec(),
            ml_ref: laplace_marginal_loglik(fit)?,
            ml_inf: ml_infinity(fit, &inf)?,
            data: fit.data.clone(),
            template,
            newton: newton.clone(),
        })
    }

    /// `Δ(λ)` for a probe λ.
    pub fn delta(&self, lambda_probe: &[f64]) -> Result<f64> {
        let fit = newton_fit(&self.data, &self.template.with_lambdas(lambda_probe)?, &self.newton)?;
        self.delta_from_marginal(laplace_marginal_loglik(&fit)?)
    }

    pub fn delta_from_marginal(&self, ml_probe: f64) -> Result<f64> {
        let denom = self.ml_ref - self.ml_inf;
        if !(denom > 0.0) {
            return Err(WhError::Undefined(format!(
                "Δ(λ) denominator is {denom:.3e}: infinite smoothing is not worse than λ̂"
            )));
        }
        Ok((self.ml_ref - ml_probe) / denom)
    }
}

/// `Δ(λ)` relative to `lambda_ref` (normally the outer-iteration optimum).
pub fn delta_lambda(
    lambda_probe: &[f64],
    lambda_ref: &[f64],
    data: &CountData,
    template: &PenaltyTemplate,
    newton: &NewtonOptions,
) -> Result<f64> {
    MarginalReference::new(data, template, lambda_ref, newton)?.delta(lambda_probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::fit_gaussian;
    use crate::penalty::penalty_1d;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn smooth_data(n: usize, scale: f64) -> CountData {
        let ec = DVector::from_fn(n, |i, _| scale * (1.0 + 0.3 * (i as f64 * 0.7).sin()));
        let d = DVector::from_fn(n, |i, _| {
            let mu = (-4.0 + 0.08 * i as f64 + 0.2 * (i as f64 * 0.9).cos()).exp();
            (mu * ec[i]).round()
        });
        CountData::new(d, ec).unwrap()
    }

    #[test]
    fn zero_theta_gives_minus_total_exposure() {
        let d = v(&[1.0, 2.0, 0.0]);
        let ec = v(&[3.0, 4.0, 5.0]);
        let p = penalty_1d(3, 1, 2.0).unwrap();
        assert_abs_diff_eq!(penalized_loglik(&DVector::zeros(3), &d, &ec, &p).unwrap(), -12.0);
    }

    #[test]
    fn events_without_exposure_are_rejected() {
        let r = CountData::from_slices(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(matches!(r, Err(WhError::DataInconsistency { index: 0, .. })));
    }

    #[test]
    fn zero_lambda_recovers_crude_rates() {
        let data = CountData::from_slices(&[3.0, 5.0, 2.0, 8.0], &[100.0, 120.0, 90.0, 150.0]).unwrap();
        let fit = newton_fit(&data, &penalty_1d(4, 2, 0.0).unwrap(), &NewtonOptions::default()).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(fit.theta_hat[i], (data.d[i] / data.ec[i]).ln(), epsilon = 1e-10);
        }
        assert!(fit.laplace_marginal.is_none());
    }

    #[test]
    fn log_linear_data_is_a_fixed_point() {
        let n = 15;
        let ec = DVector::from_fn(n, |i, _| 50.0 + 10.0 * i as f64);
        let d = DVector::from_fn(n, |i, _| (-3.0 + 0.05 * i as f64).exp() * ec[i]);
        let data = CountData::new(d, ec).unwrap();
        for lambda in [0.1, 1e3, 1e8] {
            let fit = newton_fit(&data, &penalty_1d(n, 2, lambda).unwrap(), &NewtonOptions::default()).unwrap();
            for i in 0..n {
                assert_abs_diff_eq!(fit.theta_hat[i], -3.0 + 0.05 * i as f64, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn first_newton_step_is_the_gaussian_fit() {
        let data = smooth_data(30, 400.0);
        assert!(data.d.iter().all(|d| *d > 0.0));
        let pen = penalty_1d(30, 2, 50.0).unwrap();
        let theta0 = data.initial_theta();
        let step = newton_step(&theta0, &data, &pen).unwrap();
        let g = fit_gaussian(&theta0, &data.d, &pen).unwrap();
        assert!((step - g.theta_hat).amax() < 1e-10);
    }

    #[test]
    fn trace_is_nondecreasing_and_gradient_vanishes() {
        let data = smooth_data(40, 60.0);
        let fit = newton_fit(&data, &penalty_1d(40, 2, 30.0).unwrap(), &NewtonOptions::default()).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let tol_g = 1e-6 * data.d.amax().max(1.0);
        assert!(fit.gradient_norm() <= tol_g, "{}", fit.gradient_norm());
        assert!(fit.iterations < 15);
    }

    #[test]
    fn sparse_cells_start_finite() {
        let data = CountData::from_slices(&[0.0, 1.0, 0.0, 0.0, 2.0], &[10.0, 12.0, 0.0, 8.0, 9.0]).unwrap();
        let t0 = data.initial_theta();
        assert!(t0.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(t0[0], (0.5f64 / 10.5).ln());
        assert_abs_diff_eq!(t0[2], (3.0f64 / 39.0).ln());
        let fit = newton_fit(&data, &penalty_1d(5, 2, 5.0).unwrap(), &NewtonOptions::default()).unwrap();
        assert!(fit.theta_hat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn constant_polynomial_limit() {
        let data = smooth_data(20, 80.0);
        let t = PenaltyTemplate::one_d(20, 1).unwrap();
        let inf = theta_infinity(&data, &t, &NewtonOptions::default()).unwrap();
        let want = (data.d.sum() / data.ec.sum()).ln();
        assert!(inf.theta.iter().all(|v| (v - want).abs() < 1e-10));
    }

    #[test]
    fn line_limit_recovers_log_linear_law() {
        let n = 25;
        let ec = DVector::from_fn(n, |i, _| 100.0 + 3.0 * i as f64);
        let d = DVector::from_fn(n, |i, _| (-2.5 + 0.04 * i as f64).exp() * ec[i]);
        let data = CountData::new(d, ec).unwrap();
        let t = PenaltyTemplate::one_d(n, 2).unwrap();
        let inf = theta_infinity(&data, &t, &NewtonOptions::default()).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(inf.theta[i], -2.5 + 0.04 * i as f64, epsilon = 1e-6);
        }
    }

    #[test]
    fn infinite_smoothing_matches_huge_lambda() {
        let data = smooth_data(30, 50.0);
        for q in [1, 2, 3] {
            let t = PenaltyTemplate::one_d(30, q).unwrap();
            let inf = theta_infinity(&data, &t, &NewtonOptions::default()).unwrap();
            let fit = newton_fit(&data, &t.with_lambdas(&[1e14]).unwrap(), &NewtonOptions::default()).unwrap();
            assert!((inf.theta.clone() - fit.theta_hat).amax() < 1e-3, "q = {q}");
        }
    }

    #[test]
    fn delta_endpoints() {
        let data = smooth_data(30, 50.0);
        let t = PenaltyTemplate::one_d(30, 2).unwrap();
        let fit = newton_fit(&data, &t.with_lambdas(&[20.0]).unwrap(), &NewtonOptions::default()).unwrap();
        let inf = theta_infinity(&data, &t, &NewtonOptions::default()).unwrap();
        assert_abs_diff_eq!(delta_theta(&fit.theta_hat, &fit, &inf).unwrap(), 0.0);
        assert_abs_diff_eq!(delta_theta(&inf.theta, &fit, &inf).unwrap(), 1.0, epsilon = 1e-12);

        let r = MarginalReference::from_fit(&fit, &NewtonOptions::default()).unwrap();
        assert_abs_diff_eq!(r.delta(&[20.0]).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.delta_from_marginal(r.ml_inf).unwrap(), 1.0);
    }

    #[test]
    fn warm_and_cold_outer_agree() {
        let data = smooth_data(40, 30.0);
        let t = PenaltyTemplate::one_d(40, 2).unwrap();
        let cold = select_lambda_outer(&data, &t, &SelectionOptions::default()).unwrap();
        let warm = select_lambda_outer(&data, &t, &SelectionOptions { warm_start: true, ..Default::default() }).unwrap();
        assert!((cold.lambda[0].log10() - warm.lambda[0].log10()).abs() <= 1e-3);
    }

    #[test]
    fn log_linear_counts_push_lambda_to_upper_bound() {
        let n = 20;
        let ec = DVector::from_fn(n, |i, _| 500.0 + 20.0 * i as f64);
        let d = DVector::from_fn(n, |i, _| (-3.0 + 0.06 * i as f64).exp() * ec[i]);
        let data = CountData::new(d, ec).unwrap();
        let t = PenaltyTemplate::one_d(n, 2).unwrap();
        let sel = select_lambda_outer(&data, &t, &SelectionOptions::default()).unwrap();
        assert_eq!(sel.lambda[0], 1e12);
    }

    #[test]
    fn performance_first_lambda_is_gaussian_selection() {
        let data = smooth_data(30, 200.0);
        let t = PenaltyTemplate::one_d(30, 2).unwrap();
        let opts = SelectionOptions::default();
        let sel = select_lambda_performance(&data, &t, &opts).unwrap();
        let y = data.initial_theta();
        let (l0, _) = crate::gaussian::select_lambda_norm(&y, &data.d, &t, &opts.search).unwrap();
        assert!((sel.lambda_trace[0][0].log10() - l0[0].log10()).abs() < 1e-6);
    }

    // exact ln ∫exp(ℓ_P) with the normalization of the Laplace formula, for
    // n = 2 and q = 1: the null direction integrates to √2·Γ(D)/E(t)^D
    fn two_cell_marginal(d: [f64; 2], e: [f64; 2], lambda: f64) -> f64 {
        use statrs::function::gamma::ln_gamma;
        let total = d[0] + d[1];
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let g = |t: f64| {
            let big_e = e[0] * (-t * r).exp() + e[1] * (t * r).exp();
            0.5 * 2f64.ln() + ln_gamma(total) - total * big_e.ln() + (d[1] - d[0]) * t * r - lambda * t * t
        };
        let (lo, hi, m) = (-6.0, 6.0, 4000);
        let h = (hi - lo) / m as f64;
        let vals: Vec<f64> = (0..=m).map(|k| g(lo + h * k as f64)).collect();
        let top = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = 0.0;
        for (k, v) in vals.iter().enumerate() {
            let c = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += c * (v - top).exp();
        }
        let ln_int = top + (acc * h / 3.0).ln();
        ln_int + 0.5 * (2.0 * lambda).ln() - 0.5 * (2.0 * PI).ln()
    }

    #[test]
    fn laplace_matches_two_cell_quadrature() {
        let (d, e) = ([50.0, 80.0], [1000.0, 1200.0]);
        let data = CountData::from_slices(&d, &e).unwrap();
        for lambda in [0.5, 5.0, 50.0, 500.0] {
            let fit = newton_fit(&data, &penalty_1d(2, 1, lambda).unwrap(), &NewtonOptions::default()).unwrap();
            let approx = laplace_marginal_loglik(&fit).unwrap();
            let exact = two_cell_marginal(d, e, lambda);
            assert!((approx - exact).abs() <= 1e-3 * exact.abs(), "λ={lambda}: {approx} vs {exact}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn derivatives_match_finite_differences(seed in any::<u64>(), lu in -1.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 8;
            let ec = DVector::from_fn(n, |_, _| rng.random_range(5.0..50.0));
            let d = DVector::from_fn(n, |_, _| rng.random_range(0..6) as f64);
            let theta = DVector::from_fn(n, |_, _| rng.random_range(-2.5..-0.5));
            let pen = penalty_1d(n, 2, 10f64.powf(lu)).unwrap();
            let g = gradient(&theta, &d, &ec, &pen).unwrap();
            let h = hessian(&theta, &ec, &pen).unwrap();
            let f = |t: &DVector<f64>| penalized_loglik(t, &d, &ec, &pen).unwrap();
            let eps = 1e-5;
            for k in 0..n {
                let mut tp = theta.clone(); tp[k] += eps;
                let mut tm = theta.clone(); tm[k] -= eps;
                let fd = (f(&tp) - f(&tm)) / (2.0 * eps);
                prop_assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0));
                let gp = gradient(&tp, &d, &ec, &pen).unwrap();
                let gm = gradient(&tm, &d, &ec, &pen).unwrap();
                for j in 0..n {
                    let fd2 = (gp[j] - gm[j]) / (2.0 * eps);
                    prop_assert!((fd2 - h[(j, k)]).abs() <= 1e-4 * h[(j, k)].abs().max(1.0));
                }
            }
        }
    }
}
