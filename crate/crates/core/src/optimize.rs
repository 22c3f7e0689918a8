//! Derivative-free maximizers used for smoothing-parameter selection.
//!
//! Both work on whatever coordinates the caller supplies (in practice
//! `log10(lambda)`). Objective values that are not finite are treated as
//! `-inf`, so a failed probe simply loses every comparison.

use crate::error::{Result, WhError};

/// Search settings shared by the scalar and simplex maximizers.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Scalar search interval `[lo, hi]`.
    pub bracket: (f64, f64),
    /// Simplex starting point.
    pub start: Vec<f64>,
    /// Absolute tolerance in parameter space.
    pub tol: f64,
    pub max_evals: usize,
    /// Optional objective-spread requirement for the simplex stop.
    pub ftol: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            bracket: (-6.0, 12.0),
            start: vec![2.0, 2.0],
            tol: 1e-3,
            max_evals: 200,
            ftol: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(WhError::InvalidParameter(format!(
                "search tolerance must be > 0, got {}",
                self.tol
            )));
        }
        let (lo, hi) = self.bracket;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(WhError::InvalidParameter(format!(
                "search bracket must satisfy lower < upper, got [{lo}, {hi}]"
            )));
        }
        if self.start.iter().any(|v| !v.is_finite()) {
            return Err(WhError::InvalidParameter("simplex start must be finite".into()));
        }
        if self.max_evals < 3 {
            return Err(WhError::InvalidParameter("max_evals must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    /// Set when the evaluation budget ran out before the stopping rule held.
    pub hit_max_evals: bool,
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

struct Budget<F> {
    f: F,
    evals: usize,
    max: usize,
}

impl<F: FnMut(&[f64]) -> Result<f64>> Budget<F> {
    /// `Ok(None)` once the budget is spent.
    fn eval(&mut self, x: &[f64]) -> Result<Option<f64>> {
        if self.evals >= self.max {
            return Ok(None);
        }
        self.evals += 1;
        Ok(Some(sanitize((self.f)(x)?)))
    }
}

/// Brent's parabolic-interpolation / golden-section search, maximizing.
///
/// The bracket ends are probed first and the best point seen is returned,
/// so a monotone objective yields the boundary itself.
pub fn brent_maximize<F>(f: F, bracket: (f64, f64), tol: f64, max_evals: usize) -> Result<Optimum>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut f = f;
    let mut b = Budget {
        f: move |x: &[f64]| f(x[0]),
        evals: 0,
        max: max_evals,
    };
    let (lo, hi) = bracket;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    let consider = |x: f64, fx: f64, best: &mut (f64, f64)| {
        if best.0.is_nan() || fx > best.1 {
            *best = (x, fx);
        }
    };

    let mut hit = false;
    for end in [lo, hi] {
        match b.eval(&[end])? {
            Some(v) => consider(end, v, &mut best),
            None => hit = true,
        }
    }

    // minimize g = -f on [a, bb]
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let eps = f64::EPSILON.sqrt();
    let (mut a, mut bb) = (lo, hi);
    let mut x = a + GOLD * (bb - a);
    let (mut w, mut v) = (x, x);
    let (mut d, mut e) = (0.0_f64, 0.0_f64);
    let mut gx = match b.eval(&[x])? {
        Some(fx) => {
            consider(x, fx, &mut best);
            -fx
        }
        None => {
            hit = true;
            f64::INFINITY
        }
    };
    let (mut gw, mut gv) = (gx, gx);

    while !hit {
        let xm = 0.5 * (a + bb);
        let tol1 = eps * x.abs() + tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (bb - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (gx - gv);
            let mut q = (x - v) * (gx - gw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_old = e;
            if p.abs() < (0.5 * q * e_old).abs() && p > q * (a - x) && p < q * (bb - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if (u - a) < tol2 || (bb - u) < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { bb - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let gu = match b.eval(&[u])? {
            Some(fu) => {
                consider(u, fu, &mut best);
                -fu
            }
            None => {
                hit = true;
                break;
            }
        };
        if gu <= gx {
            if u >= x {
                a = x;
            } else {
                bb = x;
            }
            v = w;
            gv = gw;
            w = x;
            gw = gx;
            x = u;
            gx = gu;
        } else {
            if u < x {
                a = u;
            } else {
                bb = u;
            }
            if gu <= gw || w == x {
                v = w;
                gv = gw;
                w = u;
                gw = gu;
            } else if gu <= gv || v == x || v == w {
                v = u;
                gv = gu;
            }
        }
    }

    if best.0.is_nan() {
        return Err(WhError::SelectionFailure("no objective evaluation was possible".into()));
    }
    Ok(Optimum {
        x: vec![best.0],
        f: best.1,
        evals: b.evals,
        hit_max_evals: hit,
    })
}

/// Nelder-Mead simplex search, maximizing.
///
/// Coefficients: reflection 1, expansion 2, contraction 0.5, shrink 0.5.
/// The initial simplex is the start point plus a unit step along each
/// coordinate. Stops once the largest vertex-to-vertex distance is at most
/// `tol` (and, if `ftol` is given, the objective spread is at most `ftol`).
pub fn nelder_mead_maximize<F>(
    f: F,
    start: &[f64],
    tol: f64,
    ftol: Option<f64>,
    max_evals: usize,
) -> Result<Optimum>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let n = start.len();
    if n == 0 {
        return Err(WhError::InvalidParameter("empty simplex start".into()));
    }
    let mut b = Budget {
        f,
        evals: 0,
        max: max_evals,
    };
    let mut verts: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut hit = false;
    for k in 0..=n {
        let mut p = start.to_vec();
        if k > 0 {
            p[k - 1] += 1.0;
        }
        match b.eval(&p)? {
            Some(v) => verts.push((p, v)),
            None => {
                hit = true;
                break;
            }
        }
    }

    let combine = |c: &[f64], dir: &[f64], t: f64| -> Vec<f64> {
        c.iter().zip(dir).map(|(ci, di)| ci + t * (di - ci)).collect()
    };

    while !hit {
        // best first; stable sort keeps ties in insertion order
        verts.sort_by(|p, q| q.1.total_cmp(&p.1));
        let diam = diameter(&verts);
        let spread = verts[0].1 - verts[n].1;
        let spread_ok = match ftol {
            Some(t) => spread.is_finite() && spread <= t,
            None => true,
        };
        if diam <= tol && spread_ok {
            break;
        }
        if diam <= tol * 1e-6 {
            // simplex has collapsed; further contraction cannot help
            break;
        }

        let mut c = vec![0.0; n];
        for (p, _) in &verts[..n] {
            for (ci, pi) in c.iter_mut().zip(p) {
                *ci += pi / n as f64;
            }
        }
        let worst = verts[n].clone();
        let xr = combine(&c, &worst.0, -1.0);
        let Some(fr) = b.eval(&xr)? else {
            hit = true;
            break;
        };

        if fr > verts[0].1 {
            let xe = combine(&c, &xr, 2.0);
            let Some(fe) = b.eval(&xe)? else {
                verts[n] = (xr, fr);
                hit = true;
                break;
            };
            verts[n] = if fe > fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr > verts[n - 1].1 {
            verts[n] = (xr, fr);
            continue;
        }
        let (xc, outside) = if fr > worst.1 {
            (combine(&c, &xr, 0.5), true)
        } else {
            (combine(&c, &worst.0, 0.5), false)
        };
        let Some(fc) = b.eval(&xc)? else {
            if outside {
                verts[n] = (xr, fr);
            }
            hit = true;
            break;
        };
        let accept = if outside { fc >= fr } else { fc > worst.1 };
        if accept {
            verts[n] = (xc, fc);
            continue;
        }
        let best = verts[0].0.clone();
        for vert in verts.iter_mut().skip(1) {
            let p = combine(&best, &vert.0, 0.5);
            match b.eval(&p)? {
                Some(v) => *vert = (p, v),
                None => {
                    hit = true;
                    break;
                }
            }
        }
    }

    verts.sort_by(|p, q| q.1.total_cmp(&p.1));
    let Some((x, fx)) = verts.first().cloned() else {
        return Err(WhError::SelectionFailure("no objective evaluation was possible".into()));
    };
    Ok(Optimum {
        x,
        f: fx,
        evals: b.evals,
        hit_max_evals: hit,
    })
}

/// Maximizes `f` over `log10(lambda)` coordinates: Brent on
/// `config.bracket` for one parameter, Nelder-Mead from `config.start`
/// for two. Fails if no probe produced a finite value.
pub fn search_log10<F>(dim: usize, config: &SearchConfig, mut f: F) -> Result<Optimum>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    config.validate()?;
    let opt = match dim {
        1 => brent_maximize(|u| f(&[u]), config.bracket, config.tol, config.max_evals)?,
        2 => {
            if config.start.len() != 2 {
                return Err(WhError::InvalidParameter(
                    "2D search needs a two-component start point".into(),
                ));
            }
            // probes outside the bracket box are evaluated at its projection
            let (lo, hi) = config.bracket;
            let mut opt = nelder_mead_maximize(
                |u| {
                    let c: Vec<f64> = u.iter().map(|v| v.clamp(lo, hi)).collect();
                    f(&c)
                },
                &config.start,
                config.tol,
                config.ftol,
                config.max_evals,
            )?;
            for v in opt.x.iter_mut() {
                *v = v.clamp(lo, hi);
            }
            opt
        }
        _ => {
            return Err(WhError::InvalidParameter(format!(
                "search dimension must be 1 or 2, got {dim}"
            )))
        }
    };
    if !opt.f.is_finite() {
        return Err(WhError::SelectionFailure(
            "objective was not finite at any probe".into(),
        ));
    }
    Ok(opt)
}

fn diameter(verts: &[(Vec<f64>, f64)]) -> f64 {
    let mut d = 0.0_f64;
    for i in 0..verts.len() {
        for j in (i + 1)..verts.len() {
            let s: f64 = verts[i]
                .0
                .iter()
                .zip(&verts[j].0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d = d.max(s.sqrt());
        }
    }
    d
}
