//! Extrapolation of a fitted smoothing to a larger grid.
//!
//! The extended grid carries zero weight on new positions. With `Q` the
//! permutation moving original positions first, the extended penalty
//! splits as
//!
//! ```text
//! Q P₊ Qᵀ = [ P_λ + P₊¹¹   P₊¹² ]
//!           [ P₊²¹         P₊²² ]
//! ```
//!
//! The unconstrained solution re-solves the smoothing on the extended grid.
//! The constrained solution keeps the original fit and sets the new
//! positions to `-(P₊²²)⁻¹P₊²¹ŷ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, WhError};
use crate::gaussian::{band, GaussianFit, GaussianProblem};
use crate::generalized::GeneralizedFit;
use crate::grid::Grid;
use crate::linalg::SpdFactor;
use crate::penalty::PenaltyTemplate;

/// Position of an original grid inside an extended one.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEmbedding {
    pub grid: Grid,
    pub grid_plus: Grid,
    /// Extended index of each original cell, in original order.
    pub original: Vec<usize>,
    /// Extended indices of the new cells, ascending.
    pub new: Vec<usize>,
}

impl GridEmbedding {
    pub fn new(grid: &Grid, grid_plus: &Grid) -> Result<Self> {
        if !grid.is_subgrid_of(grid_plus) {
            return Err(WhError::InvalidEmbedding(format!(
                "grid {grid} is not contained in {grid_plus}"
            )));
        }
        let original: Vec<usize> = grid
            .coords()
            .into_iter()
            .map(|(x, z)| {
                grid_plus
                    .index_of(x, z)
                    .ok_or_else(|| WhError::InvalidEmbedding(format!("cell ({x}, {z:?}) is outside {grid_plus}")))
            })
            .collect::<Result<_>>()?;
        let mut is_orig = vec![false; grid_plus.len()];
        for &k in &original {
            is_orig[k] = true;
        }
        let new = (0..grid_plus.len()).filter(|k| !is_orig[*k]).collect();
        Ok(Self {
            grid: *grid,
            grid_plus: *grid_plus,
            original,
            new,
        })
    }

    pub fn n(&self) -> usize {
        self.original.len()
    }

    pub fn n_plus(&self) -> usize {
        self.grid_plus.len()
    }

    /// Original positions first, then new ones: `(Qv)_k = v[perm[k]]`.
    pub fn permutation(&self) -> Vec<usize> {
        self.original.iter().chain(self.new.iter()).copied().collect()
    }

    /// Selection matrix `C` (`n × n₊`).
    pub fn c(&self) -> DMatrix<f64> {
        selector(&self.original, self.n_plus())
    }

    /// Complement selector `C̄`.
    pub fn c_bar(&self) -> DMatrix<f64> {
        selector(&self.new, self.n_plus())
    }

    /// `Q = [C; C̄]`.
    pub fn q(&self) -> DMatrix<f64> {
        selector(&self.permutation(), self.n_plus())
    }

    /// `Cᵀy`: values at original positions, zero elsewhere.
    pub fn scatter(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_plus());
        for (i, &k) in self.original.iter().enumerate() {
            out[k] = y[i];
        }
        out
    }

    /// `Cv`.
    pub fn gather(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.original.iter().map(|&k| v[k]))
    }

    /// `C̄v`.
    pub fn gather_new(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.new.len(), self.new.iter().map(|&k| v[k]))
    }
}

fn selector(rows: &[usize], n_plus: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), n_plus);
    for (r, &k) in rows.iter().enumerate() {
        m[(r, k)] = 1.0;
    }
    m
}

fn submatrix(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

/// Extended penalty and its blocks in permuted order.
#[derive(Debug, Clone)]
pub struct ExtendedPenalty {
    pub template_plus: PenaltyTemplate,
    pub lambdas: Vec<f64>,
    pub p_plus: DMatrix<f64>,
    /// Original-position block minus `P_λ`.
    pub p11: DMatrix<f64>,
    pub p12: DMatrix<f64>,
    pub p21: DMatrix<f64>,
    pub p22: DMatrix<f64>,
}

impl ExtendedPenalty {
    /// `P₊¹¹ - P₊¹²(P₊²²)⁻¹P₊²¹`: zero in 1D, generally not in 2D.
    pub fn schur_residual(&self) -> Result<DMatrix<f64>> {
        if self.p22.nrows() == 0 {
            return Ok(self.p11.clone());
        }
        let f = SpdFactor::new(self.p22.clone(), P22_CONTEXT)?;
        Ok(&self.p11 - &self.p12 * f.solve_mat(&self.p21))
    }
}

const P22_CONTEXT: &str = "the extended penalty restricted to new positions is singular \
     (a smoothing parameter may be zero)";

pub fn extended_penalty(embedding: &GridEmbedding, orders: &[usize], lambdas: &[f64]) -> Result<ExtendedPenalty> {
    let template = PenaltyTemplate::for_grid(&embedding.grid, orders)?;
    let template_plus = PenaltyTemplate::for_grid(&embedding.grid_plus, orders)?;
    let p = template.assemble(lambdas)?;
    let p_plus = template_plus.assemble(lambdas)?;
    let (o, m) = (&embedding.original, &embedding.new);
    Ok(ExtendedPenalty {
        template_plus,
        lambdas: lambdas.to_vec(),
        p11: submatrix(&p_plus, o, o) - p,
        p12: submatrix(&p_plus, o, m),
        p21: submatrix(&p_plus, m, o),
        p22: submatrix(&p_plus, m, m),
        p_plus,
    })
}

/// What extrapolation needs from a fit: data, weights, fitted values,
/// posterior covariance and smoothing parameters.
#[derive(Debug, Clone)]
pub struct ExtrapolationInput {
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub y_hat: DVector<f64>,
    pub psi: DMatrix<f64>,
    pub orders: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl ExtrapolationInput {
    pub fn from_gaussian(fit: &GaussianFit) -> Self {
        Self {
            y: fit.y.clone(),
            w: fit.w.clone(),
            y_hat: fit.theta_hat.clone(),
            psi: fit.psi(),
            orders: fit.penalty.template().orders().to_vec(),
            lambdas: fit.lambdas().to_vec(),
        }
    }

    /// Uses the working data and weights at `θ̂`.
    pub fn from_generalized(fit: &GeneralizedFit) -> Self {
        let (z, w) = fit.working_data();
        Self {
            y: z,
            w,
            y_hat: fit.theta_hat.clone(),
            psi: fit.psi(),
            orders: fit.penalty.template().orders().to_vec(),
            lambdas: fit.lambdas().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Unconstrained,
    Constrained,
}

#[derive(Debug, Clone)]
pub struct ExtrapolationResult {
    pub mode: Mode,
    pub y_plus: DVector<f64>,
    pub psi_plus: DMatrix<f64>,
    /// Constrained mode: `A₊*ΨA₊*ᵀ`, the covariance without innovation error.
    pub psi_without_innovation: Option<DMatrix<f64>>,
    pub blocks: ExtendedPenalty,
}

impl ExtrapolationResult {
    pub fn credible_intervals(&self, alpha: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        band(&self.y_plus, &self.psi_plus.diagonal(), alpha)
    }
}

fn check_input(input: &ExtrapolationInput, embedding: &GridEmbedding) -> Result<()> {
    let n = embedding.n();
    if input.y.len() != n || input.w.len() != n || input.y_hat.len() != n || input.psi.shape() != (n, n) {
        return Err(WhError::InvalidParameter(format!(
            "fit does not match the original grid of {n} cells"
        )));
    }
    Ok(())
}

/// Smoothing re-solved on the extended grid with zero weight on new cells.
pub fn extrapolate_unconstrained(input: &ExtrapolationInput, embedding: &GridEmbedding) -> Result<ExtrapolationResult> {
    check_input(input, embedding)?;
    let blocks = extended_penalty(embedding, &input.orders, &input.lambdas)?;
    let y_plus = embedding.scatter(&input.y);
    let w_plus = embedding.scatter(&input.w);
    let problem = GaussianProblem::new(&y_plus, &w_plus, &blocks.template_plus)?;
    let sol = problem.solve(&input.lambdas)?;
    Ok(ExtrapolationResult {
        mode: Mode::Unconstrained,
        y_plus: sol.theta_hat,
        psi_plus: sol.system.psi(),
        psi_without_innovation: None,
        blocks,
    })
}

/// Extension that keeps the original fit at its positions.
pub fn extrapolate_constrained(input: &ExtrapolationInput, embedding: &GridEmbedding) -> Result<ExtrapolationResult> {
    check_input(input, embedding)?;
    let blocks = extended_penalty(embedding, &input.orders, &input.lambdas)?;
    let n = embedding.n();
    let m = embedding.new.len();
    let n_plus = embedding.n_plus();
    // permuted-order pieces, mapped back through the permutation at the end
    let (new_vals, cross, innovation) = if m == 0 {
        (DVector::zeros(0), DMatrix::zeros(0, n), DMatrix::zeros(0, 0))
    } else {
        let f = SpdFactor::new(blocks.p22.clone(), P22_CONTEXT)?;
        let b = -f.solve_mat(&blocks.p21);
        (&b * &input.y_hat, b, f.inverse())
    };
    let bpsi = &cross * &input.psi;
    let mut stacked_free = DMatrix::zeros(n_plus, n_plus);
    stacked_free.view_mut((0, 0), (n, n)).copy_from(&input.psi);
    stacked_free.view_mut((0, n), (n, m)).copy_from(&bpsi.transpose());
    stacked_free.view_mut((n, 0), (m, n)).copy_from(&bpsi);
    stacked_free.view_mut((n, n), (m, m)).copy_from(&(&bpsi * cross.transpose()));
    let mut stacked = stacked_free.clone();
    let mut lower = stacked.view_mut((n, n), (m, m));
    lower += &innovation;

    let perm = embedding.permutation();
    let unpermute = |s: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(n_plus, n_plus);
        for (a, &ka) in perm.iter().enumerate() {
            for (b, &kb) in perm.iter().enumerate() {
                out[(ka, kb)] = s[(a, b)];
            }
        }
        out
    };
    let mut y_plus = DVector::zeros(n_plus);
    for (i, &k) in embedding.original.iter().enumerate() {
        y_plus[k] = input.y_hat[i];
    }
    for (j, &k) in embedding.new.iter().enumerate() {
        y_plus[k] = new_vals[j];
    }
    Ok(ExtrapolationResult {
        mode: Mode::Constrained,
        y_plus,
        psi_plus: unpermute(&stacked),
        psi_without_innovation: Some(unpermute(&stacked_free)),
        blocks,
    })
}

pub fn credible_intervals_extended(result: &ExtrapolationResult, alpha: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    result.credible_intervals(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{credible_intervals, fit_gaussian};
    use crate::generalized::{newton_fit, CountData, NewtonOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fit_1d(n: usize, q: usize, lambda: f64, seed: u64) -> GaussianFit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DVector::from_fn(n, |i, _| (i as f64 * 0.4).sin() + rng.random_range(-0.2..0.2));
        let w = DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0));
        let t = PenaltyTemplate::one_d(n, q).unwrap();
        fit_gaussian(&y, &w, &t.with_lambdas(&[lambda]).unwrap()).unwrap()
    }

    fn fit_2d(seed: u64) -> GaussianFit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nx, nz) = (8, 6);
        let y = DVector::from_fn(nx * nz, |k, _| {
            let (i, j) = ((k % nx) as f64, (k / nx) as f64);
            (0.5 * i).sin() + 0.3 * j + 0.1 * i * j / 5.0 + rng.random_range(-0.2..0.2)
        });
        let w = DVector::from_fn(nx * nz, |_, _| rng.random_range(0.5..2.0));
        let t = PenaltyTemplate::two_d(nx, nz, 2, 2).unwrap();
        fit_gaussian(&y, &w, &t.with_lambdas(&[3.0, 8.0]).unwrap()).unwrap()
    }

    fn emb_2d() -> GridEmbedding {
        GridEmbedding::new(&Grid::two((0, 7), (0, 5)).unwrap(), &Grid::two((-2, 9), (0, 8)).unwrap()).unwrap()
    }

    #[test]
    fn embedding_selectors() {
        let e = GridEmbedding::new(&Grid::one(2, 4).unwrap(), &Grid::one(0, 6).unwrap()).unwrap();
        assert_eq!(e.original, vec![2, 3, 4]);
        let c = e.c();
        assert_eq!(&c * c.transpose(), DMatrix::identity(3, 3));
        let q = e.q();
        assert_eq!(&q * q.transpose(), DMatrix::identity(7, 7));
        assert_eq!(e.scatter(&DVector::from_row_slice(&[1.0, 2.0, 3.0])).as_slice(), &[0.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0]);
        let same = GridEmbedding::new(&Grid::one(2, 4).unwrap(), &Grid::one(2, 4).unwrap()).unwrap();
        assert!(same.new.is_empty());
        assert_eq!(same.q(), DMatrix::identity(3, 3));
    }

    #[test]
    fn embedding_requires_superset() {
        let r = GridEmbedding::new(&Grid::one(0, 6).unwrap(), &Grid::one(2, 4).unwrap());
        assert!(matches!(r, Err(WhError::InvalidEmbedding(_))));
        let r = GridEmbedding::new(&Grid::one(0, 6).unwrap(), &Grid::two((0, 6), (0, 1)).unwrap());
        assert!(matches!(r, Err(WhError::InvalidEmbedding(_))));
    }

    #[test]
    fn schur_residual_vanishes_in_1d_only() {
        let e = GridEmbedding::new(&Grid::one(0, 9).unwrap(), &Grid::one(-3, 14).unwrap()).unwrap();
        for q in 1..=3 {
            let b = extended_penalty(&e, &[q], &[5.0]).unwrap();
            assert!(b.schur_residual().unwrap().amax() < 1e-8, "q = {q}");
        }
        let b = extended_penalty(&emb_2d(), &[2, 2], &[3.0, 8.0]).unwrap();
        assert!(b.schur_residual().unwrap().amax() > 1e-6);
    }

    #[test]
    fn one_d_extension_preserves_and_continues_polynomially() {
        let e = GridEmbedding::new(&Grid::one(0, 29).unwrap(), &Grid::one(-5, 37).unwrap()).unwrap();
        for q in 1..=3 {
            let fit = fit_1d(30, q, 50.0, q as u64);
            let input = ExtrapolationInput::from_gaussian(&fit);
            let un = extrapolate_unconstrained(&input, &e).unwrap();
            let tol = 1e-8 * (1.0 + fit.theta_hat.amax());
            assert!((e.gather(&un.y_plus) - &fit.theta_hat).amax() <= tol, "q = {q}");
            let con = extrapolate_constrained(&input, &e).unwrap();
            assert!((&con.y_plus - &un.y_plus).amax() < 1e-8);
            assert!((&con.psi_plus - &un.psi_plus).amax() < 1e-8);
            // continuation: q-th differences vanish on each extended tail
            // together with the q boundary points of the fit
            let yp = &con.y_plus;
            let left: Vec<f64> = (0..5 + q).map(|k| yp[k]).collect();
            let right: Vec<f64> = (43 - 8 - q..43).map(|k| yp[k]).collect();
            for seg in [left, right] {
                let mut diff = seg.clone();
                for _ in 0..q {
                    diff = diff.windows(2).map(|p| p[1] - p[0]).collect();
                }
                assert!(diff.iter().all(|d| d.abs() < 1e-6), "q = {q}: {diff:?}");
            }
        }
    }

    #[test]
    fn same_grid_is_identity() {
        let fit = fit_1d(20, 2, 10.0, 9);
        let e = GridEmbedding::new(&Grid::one(0, 19).unwrap(), &Grid::one(0, 19).unwrap()).unwrap();
        let input = ExtrapolationInput::from_gaussian(&fit);
        for r in [extrapolate_unconstrained(&input, &e).unwrap(), extrapolate_constrained(&input, &e).unwrap()] {
            assert!((&r.y_plus - &fit.theta_hat).amax() < 1e-10);
            assert!((&r.psi_plus - fit.psi()).amax() < 1e-10);
            let (lo, hi) = r.credible_intervals(0.05).unwrap();
            let (lo0, hi0) = credible_intervals(&fit, 0.05).unwrap();
            assert!((lo - lo0).amax() < 1e-9 && (hi - hi0).amax() < 1e-9);
        }
    }

    #[test]
    fn two_d_constrained_keeps_fit_and_unconstrained_moves_it() {
        let fit = fit_2d(4);
        let e = emb_2d();
        let input = ExtrapolationInput::from_gaussian(&fit);
        let un = extrapolate_unconstrained(&input, &e).unwrap();
        let con = extrapolate_constrained(&input, &e).unwrap();
        assert!((e.gather(&con.y_plus) - &fit.theta_hat).amax() <= 1e-8 * (1.0 + fit.theta_hat.amax()));
        assert!((e.gather(&un.y_plus) - &fit.theta_hat).amax() > 1e-6);
    }

    #[test]
    fn innovation_term_is_psd_on_new_positions() {
        let fit = fit_2d(5);
        let e = emb_2d();
        let con = extrapolate_constrained(&ExtrapolationInput::from_gaussian(&fit), &e).unwrap();
        let diff = &con.psi_plus - con.psi_without_innovation.as_ref().unwrap();
        for &i in &e.original {
            for k in 0..e.n_plus() {
                assert_eq!(diff[(i, k)], 0.0);
                assert_eq!(diff[(k, i)], 0.0);
            }
        }
        let sub = submatrix(&diff, &e.new, &e.new);
        let min_eig = sub.symmetric_eigenvalues().min();
        assert!(min_eig > -1e-10);
        let widths = con.psi_plus.diagonal();
        let free = con.psi_without_innovation.unwrap().diagonal();
        for &k in &e.new {
            assert!(widths[k] >= free[k]);
        }
        for (i, &k) in e.original.iter().enumerate() {
            assert!((widths[k] - fit.psi_diag[i]).abs() < 1e-12);
        }
        let all = con.psi_plus.symmetric_eigenvalues().min();
        assert!(all > -1e-8);
    }

    #[test]
    fn constrained_solution_identities() {
        let fit = fit_2d(6);
        let e = emb_2d();
        let con = extrapolate_constrained(&ExtrapolationInput::from_gaussian(&fit), &e).unwrap();
        let wy_plus = e.scatter(&fit.w.component_mul(&fit.y));
        assert!((&con.psi_plus * &wy_plus - &con.y_plus).amax() < 1e-8);

        // Lagrange form: the term multiplying W₊y₊ vanishes
        let w_plus = e.scatter(&fit.w);
        let m = DMatrix::from_diagonal(&w_plus) + &con.blocks.p_plus;
        let minv = m.clone().cholesky().unwrap().inverse();
        let c = e.c();
        let inner = (&c * &minv * c.transpose()).try_inverse().unwrap();
        let proj = DMatrix::identity(e.n_plus(), e.n_plus()) - c.transpose() * &inner * &c * &minv;
        let first = &minv * proj * &wy_plus;
        assert!(first.amax() < 1e-8);
        let second = &minv * c.transpose() * inner * &fit.theta_hat;
        assert!((second - &con.y_plus).amax() < 1e-8);
    }

    #[test]
    fn generalized_fit_extension_in_1d() {
        let n = 25;
        let ec = DVector::from_fn(n, |i, _| 200.0 + 10.0 * i as f64);
        let d = DVector::from_fn(n, |i, _| ((-3.0 + 0.05 * i as f64 + 0.2 * (0.6 * i as f64).sin()).exp() * ec[i]).round());
        let data = CountData::new(d, ec).unwrap();
        let t = PenaltyTemplate::one_d(n, 2).unwrap();
        let fit = newton_fit(&data, &t.with_lambdas(&[40.0]).unwrap(), &NewtonOptions::default()).unwrap();
        let e = GridEmbedding::new(&Grid::one(0, 24).unwrap(), &Grid::one(0, 34).unwrap()).unwrap();
        let input = ExtrapolationInput::from_generalized(&fit);
        let un = extrapolate_unconstrained(&input, &e).unwrap();
        let con = extrapolate_constrained(&input, &e).unwrap();
        assert!((e.gather(&un.y_plus) - &fit.theta_hat).amax() < 1e-6);
        assert!((&un.y_plus - &con.y_plus).amax() < 1e-6);
    }
}
