//! Synthetic portfolios with known piecewise-constant hazards.
//!
//! Each individual enters at a random point, is censored after a random
//! duration (capped by a horizon) and experiences the event at a time drawn
//! exactly from the piecewise-exponential law along its trajectory. In 2D
//! both axes advance on the same clock.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::duration::PortfolioRecord;
use crate::error::{Result, WhError};
use crate::grid::Grid;

/// Log-hazard on unit cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HazardLaw {
    /// Same hazard everywhere (1D or 2D).
    Constant { mu: f64 },
    /// `ln μ(x) = a + b·⌊x⌋`.
    Gompertz { a: f64, b: f64 },
    /// `μ(x) = c + exp(a + b·⌊x⌋)`.
    Makeham { a: f64, b: f64, c: f64 },
    /// `ln μ(x, z) = c + b_x·⌊x⌋ + g[⌊z⌋ - z0]`, with `g` held constant past
    /// its ends.
    Additive { c: f64, bx: f64, z0: i64, g: Vec<f64> },
    /// Tabulated log-hazard on `grid`, held constant past its edges.
    Table { grid: Grid, log_mu: Vec<f64> },
}

impl HazardLaw {
    /// Default 1D law: Gompertz with `a = -9`, `b = 0.085` plus a constant
    /// `c = 0.01`, so that the log-hazard is not a straight line.
    pub fn default_1d() -> Self {
        HazardLaw::Makeham { a: -9.0, b: 0.085, c: 0.01 }
    }

    /// Default 2D law: Gompertz in `x` with a decreasing duration profile
    /// over `z = 0..14`.
    pub fn default_2d() -> Self {
        let g = (0..15).map(|z| 1.6 * (-(z as f64) / 2.5).exp() - 0.2).collect();
        HazardLaw::Additive { c: -6.4, bx: 0.06, z0: 0, g }
    }

    /// Number of axes the law needs, `None` if it works for both.
    pub fn dim(&self) -> Option<usize> {
        match self {
            HazardLaw::Constant { .. } => None,
            HazardLaw::Gompertz { .. } | HazardLaw::Makeham { .. } => Some(1),
            HazardLaw::Additive { .. } => Some(2),
            HazardLaw::Table { grid, .. } => Some(grid.dim()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            HazardLaw::Constant { mu } => *mu >= 0.0 && mu.is_finite(),
            HazardLaw::Gompertz { a, b } => a.is_finite() && b.is_finite(),
            HazardLaw::Makeham { a, b, c } => a.is_finite() && b.is_finite() && *c >= 0.0 && c.is_finite(),
            HazardLaw::Additive { c, bx, g, .. } => {
                c.is_finite() && bx.is_finite() && !g.is_empty() && g.iter().all(|v| v.is_finite())
            }
            HazardLaw::Table { grid, log_mu } => {
                log_mu.len() == grid.len() && log_mu.iter().all(|v| v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(WhError::InvalidParameter("malformed hazard law".into()))
        }
    }

    /// Hazard on the cell `[x, x+1) × [z, z+1)`.
    pub fn hazard(&self, x: i64, z: Option<i64>) -> f64 {
        match self {
            HazardLaw::Constant { mu } => *mu,
            _ => self.log_hazard(x, z).exp(),
        }
    }

    pub fn log_hazard(&self, x: i64, z: Option<i64>) -> f64 {
        match self {
            HazardLaw::Constant { mu } => mu.ln(),
            HazardLaw::Gompertz { a, b } => a + b * x as f64,
            HazardLaw::Makeham { a, b, c } => (c + (a + b * x as f64).exp()).ln(),
            HazardLaw::Additive { c, bx, z0, g } => {
                let k = (z.unwrap_or(*z0) - z0).clamp(0, g.len() as i64 - 1) as usize;
                c + bx * x as f64 + g[k]
            }
            HazardLaw::Table { grid, log_mu } => {
                let xr = grid.x_range();
                let xc = x.clamp(xr.min, xr.max);
                let zc = grid.z_range().map(|zr| z.unwrap_or(zr.min).clamp(zr.min, zr.max));
                log_mu[grid.index_of(xc, zc).expect("clamped into the grid")]
            }
        }
    }

    /// True log-hazard on every cell of `grid`, in grid order.
    pub fn true_log_hazard(&self, grid: &Grid) -> DVector<f64> {
        let coords = grid.coords();
        DVector::from_iterator(coords.len(), coords.into_iter().map(|(x, z)| self.log_hazard(x, z)))
    }
}

/// Observation-duration law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Censoring {
    /// Only the horizon ends observation.
    None,
    /// Uniform on `(0, max]`.
    Uniform { max: f64 },
    /// Exponential with the given rate.
    Exponential { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Head count.
    pub m: usize,
    /// Entry value of `x`, uniform on `[lo, hi)`.
    pub entry_x: (f64, f64),
    /// Entry value of `z` (2D), uniform on `[lo, hi)`.
    pub entry_z: Option<(f64, f64)>,
    pub censoring: Censoring,
    /// Maximum observation duration.
    pub horizon: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let cens_ok = match self.censoring {
            Censoring::None => true,
            Censoring::Uniform { max } => max > 0.0 && max.is_finite(),
            Censoring::Exponential { rate } => rate > 0.0 && rate.is_finite(),
        };
        if self.m == 0
            || !range_ok(self.entry_x)
            || !self.entry_z.is_none_or(range_ok)
            || !cens_ok
            || !(self.horizon > 0.0 && self.horizon.is_finite())
        {
            return Err(WhError::InvalidParameter("invalid simulation settings".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        if self.entry_z.is_some() {
            2
        } else {
            1
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws an event time along `(x0 + u, z0 + u)`, or `None` if the
/// cumulative hazard stays below the exponential threshold up to `limit`.
fn event_time(law: &HazardLaw, x0: f64, z0: Option<f64>, limit: f64, threshold: f64) -> Option<f64> {
    let mut u = 0.0;
    let mut cum = 0.0;
    while u < limit {
        let x = x0 + u;
        let mut step = x.floor() + 1.0 - x;
        if let Some(z0) = z0 {
            let z = z0 + u;
            step = step.min(z.floor() + 1.0 - z);
        }
        let end = (u + step.max(f64::EPSILON * (1.0 + x.abs()))).min(limit);
        let mid = 0.5 * (u + end);
        let mu = law.hazard((x0 + mid).floor() as i64, z0.map(|z| (z + mid).floor() as i64));
        let add = mu * (end - u);
        if cum + add >= threshold && mu > 0.0 {
            return Some(u + (threshold - cum) / mu);
        }
        cum += add;
        u = end;
    }
    None
}

/// Simulates `config.m` individuals under `law`.
pub fn simulate(config: &SimConfig, law: &HazardLaw) -> Result<Vec<PortfolioRecord>> {
    config.validate()?;
    law.validate()?;
    if let Some(d) = law.dim() {
        if d != config.dim() {
            return Err(WhError::InvalidParameter(format!(
                "{d}D hazard law with {}D entry distribution",
                config.dim()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.m);
    for _ in 0..config.m {
        let x0 = uniform(&mut rng, config.entry_x);
        let z0 = config.entry_z.map(|r| uniform(&mut rng, r));
        let censor = match config.censoring {
            Censoring::None => f64::INFINITY,
            Censoring::Uniform { max } => max * (1.0 - rng.random::<f64>()),
            Censoring::Exponential { rate } => {
                let e: f64 = Exp1.sample(&mut rng);
                e / rate
            }
        };
        let limit = censor.min(config.horizon);
        let threshold: f64 = Exp1.sample(&mut rng);
        let (t, event) = match event_time(law, x0, z0, limit, threshold) {
            Some(te) if te < limit => (te, true),
            _ => (limit, false),
        };
        out.push(PortfolioRecord::new(x0, z0, t.max(f64::MIN_POSITIVE), event)?);
    }
    Ok(out)
}

/// Total at-risk time of `records` inside `grid`.
pub fn total_time_in_window(records: &[PortfolioRecord], grid: &Grid) -> f64 {
    records.iter().map(|r| r.time_in_window(grid)).sum()
}

/// Child seed for replicate `index`: a fresh ChaCha stream of `seed`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.random()
}
