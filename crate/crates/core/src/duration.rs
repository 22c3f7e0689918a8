//! Aggregation of individual longitudinal records into event counts and
//! central exposures on integer grids, and the crude-rates estimator.
//!
//! The hazard is piecewise constant on unit cells. For a record entering at
//! `x_i` and observed for `t_i` years,
//!
//! ```text
//! d(x)   = Σ δ_i · 1(x <= x_i + t_i < x + 1)
//! e_c(x) = Σ [min(t_i, x - x_i + 1) - max(0, x - x_i)]⁺
//! ```
//!
//! In two dimensions both axes advance on the same clock, so at elapsed time
//! `u` the individual sits at `(x_i + u, z_i + u)`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WhError};
use crate::grid::{AxisRange, Grid};
use crate::io::{fmt_count, fmt_real, parse_f64};

/// One individual's observation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortfolioRecord {
    /// Value of the first axis (age) at the start of observation.
    pub x_entry: f64,
    /// Value of the second axis at the start of observation (2D only).
    pub z_entry: Option<f64>,
    /// Observation duration in years, `> 0`.
    pub t: f64,
    /// Whether the observation ended with the event of interest.
    pub event: bool,
}

impl PortfolioRecord {
    pub fn new(x_entry: f64, z_entry: Option<f64>, t: f64, event: bool) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(WhError::InvalidParameter(format!(
                "observation duration must be > 0, got {t}"
            )));
        }
        if !x_entry.is_finite() || z_entry.is_some_and(|z| !z.is_finite()) {
            return Err(WhError::InvalidParameter(
                "entry coordinates must be finite".into(),
            ));
        }
        Ok(Self {
            x_entry,
            z_entry,
            t,
            event,
        })
    }

    pub fn one_d(x_entry: f64, t: f64, event: bool) -> Self {
        Self {
            x_entry,
            z_entry: None,
            t,
            event,
        }
    }

    pub fn two_d(x_entry: f64, z_entry: f64, t: f64, event: bool) -> Self {
        Self {
            x_entry,
            z_entry: Some(z_entry),
            t,
            event,
        }
    }

    /// Time spent inside the grid window (the union of its cells).
    pub fn time_in_window(&self, grid: &Grid) -> f64 {
        let (lo, hi) = elapsed_window(self.x_entry, self.t, grid.x_range());
        let (lo, hi) = match (grid.z_range(), self.z_entry) {
            (Some(zr), Some(z0)) => {
                let (zlo, zhi) = elapsed_window(z0, self.t, zr);
                (lo.max(zlo), hi.min(zhi))
            }
            _ => (lo, hi),
        };
        (hi - lo).max(0.0)
    }
}

/// Elapsed-time interval during which `start + u` lies in `[min, max + 1)`.
fn elapsed_window(start: f64, t: f64, range: AxisRange) -> (f64, f64) {
    let lo = (range.min as f64 - start).max(0.0);
    let hi = (range.max as f64 + 1.0 - start).min(t);
    (lo, hi)
}

/// Event counts and central exposures on a grid, in vectorization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedExposure {
    pub grid: Grid,
    pub d: Vec<f64>,
    pub ec: Vec<f64>,
}

impl AggregatedExposure {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            d: vec![0.0; n],
            ec: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn total_events(&self) -> f64 {
        self.d.iter().sum()
    }

    pub fn total_exposure(&self) -> f64 {
        self.ec.iter().sum()
    }

    /// Elementwise sum of two aggregates on the same grid.
    pub fn merge(&mut self, other: &AggregatedExposure) -> Result<()> {
        if self.grid != other.grid {
            return Err(WhError::InvalidParameter(
                "cannot merge aggregates on different grids".into(),
            ));
        }
        for (a, b) in self.d.iter_mut().zip(&other.d) {
            *a += b;
        }
        for (a, b) in self.ec.iter_mut().zip(&other.ec) {
            *a += b;
        }
        Ok(())
    }

    fn add_record(&mut self, r: &PortfolioRecord) -> Result<()> {
        match self.grid {
            Grid::One(xr) => {
                add_record_1d(&mut self.d, &mut self.ec, xr, r);
                Ok(())
            }
            Grid::Two { x, z } => {
                let z0 = r.z_entry.ok_or_else(|| {
                    WhError::InvalidParameter("2D aggregation needs a z entry on every record".into())
                })?;
                add_record_2d(&mut self.d, &mut self.ec, x, z, r.x_entry, z0, r.t, r.event);
                Ok(())
            }
        }
    }
}

fn add_record_1d(d: &mut [f64], ec: &mut [f64], xr: AxisRange, r: &PortfolioRecord) {
    let (x0, t) = (r.x_entry, r.t);
    let exit = x0 + t;
    let first = (x0.floor() as i64).max(xr.min);
    let last = (exit.floor() as i64).min(xr.max);
    for x in first..=last {
        let xf = x as f64;
        let e = (t.min(xf - x0 + 1.0) - (xf - x0).max(0.0)).max(0.0);
        if e > 0.0 {
            ec[(x - xr.min) as usize] += e;
        }
    }
    if r.event {
        let cell = exit.floor() as i64;
        if xr.contains(cell) {
            d[(cell - xr.min) as usize] += 1.0;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn add_record_2d(
    d: &mut [f64],
    ec: &mut [f64],
    xr: AxisRange,
    zr: AxisRange,
    x0: f64,
    z0: f64,
    t: f64,
    event: bool,
) {
    let nx = xr.len();
    let x_first = (x0.floor() as i64).max(xr.min);
    let x_last = ((x0 + t).floor() as i64).min(xr.max);
    let z_first = (z0.floor() as i64).max(zr.min);
    let z_last = ((z0 + t).floor() as i64).min(zr.max);
    for z in z_first..=z_last {
        let zf = z as f64;
        for x in x_first..=x_last {
            let xf = x as f64;
            let hi = t.min(xf + 1.0 - x0).min(zf + 1.0 - z0);
            let lo = (xf - x0).max(zf - z0).max(0.0);
            let e = hi - lo;
            if e > 0.0 {
                ec[(z - zr.min) as usize * nx + (x - xr.min) as usize] += e;
            }
        }
    }
    if event {
        let cx = (x0 + t).floor() as i64;
        let cz = (z0 + t).floor() as i64;
        if xr.contains(cx) && zr.contains(cz) {
            d[(cz - zr.min) as usize * nx + (cx - xr.min) as usize] += 1.0;
        }
    }
}

/// Aggregates records on an arbitrary 1D or 2D grid.
pub fn aggregate(records: &[PortfolioRecord], grid: Grid) -> Result<AggregatedExposure> {
    let mut agg = AggregatedExposure::zeros(grid);
    for r in records {
        agg.add_record(r)?;
    }
    Ok(agg)
}

pub fn aggregate_1d(
    records: &[PortfolioRecord],
    x_min: i64,
    x_max: i64,
) -> Result<AggregatedExposure> {
    aggregate(records, Grid::one(x_min, x_max)?)
}

pub fn aggregate_2d(
    records: &[PortfolioRecord],
    x_min: i64,
    x_max: i64,
    z_min: i64,
    z_max: i64,
) -> Result<AggregatedExposure> {
    aggregate(records, Grid::two((x_min, x_max), (z_min, z_max))?)
}

/// Parallel aggregation with a fixed reduction order.
///
/// Records are split into consecutive chunks of `chunk_size`; each chunk is
/// aggregated independently and the partial tables are then summed in chunk
/// order. The result depends on `chunk_size` but not on the number of
/// threads, so it is bitwise reproducible for a given chunk size.
pub fn aggregate_chunked(
    records: &[PortfolioRecord],
    grid: Grid,
    chunk_size: usize,
) -> Result<AggregatedExposure> {
    let chunk_size = chunk_size.max(1);
    let partials: Vec<AggregatedExposure> = records
        .par_chunks(chunk_size)
        .map(|c| aggregate(c, grid))
        .collect::<Result<_>>()?;
    let mut total = AggregatedExposure::zeros(grid);
    for p in &partials {
        total.merge(p)?;
    }
    Ok(total)
}

/// Crude log-rates `ln(d / e_c)`; `None` where `d = 0` or `e_c = 0`.
pub fn crude_rates(agg: &AggregatedExposure) -> Vec<Option<f64>> {
    agg.d
        .iter()
        .zip(&agg.ec)
        .map(|(&d, &e)| (d > 0.0 && e > 0.0).then(|| (d / e).ln()))
        .collect()
}

/// Observation and weight vectors for Gaussian smoothing of crude rates:
/// `y = ln(d / e_c)` and `w = d`, with `y = 0, w = 0` on undefined cells.
pub fn crude_rate_inputs(agg: &AggregatedExposure) -> (Vec<f64>, Vec<f64>) {
    let rates = crude_rates(agg);
    let y = rates.iter().map(|r| r.unwrap_or(0.0)).collect();
    let w = rates
        .iter()
        .zip(&agg.d)
        .map(|(r, &d)| if r.is_some() { d } else { 0.0 })
        .collect();
    (y, w)
}

fn csv_err(e: csv::Error) -> WhError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    WhError::Parse {
        line,
        message: e.to_string(),
    }
}

/// Reads records from CSV with header `x,t,delta` (1D) or `x,z,t,delta` (2D).
///
/// Returns the records and the dimension implied by the header.
pub fn read_records<R: Read>(reader: R) -> Result<(Vec<PortfolioRecord>, usize)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let dim = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["x", "t", "delta"] => 1,
        ["x", "z", "t", "delta"] => 2,
        _ => {
            return Err(WhError::Parse {
                line: 1,
                message: format!(
                    "expected header 'x,t,delta' or 'x,z,t,delta', got '{}'",
                    header.join(",")
                ),
            })
        }
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let f = |k: usize| parse_f64(&rec[k], line, &header[k]);
        let (x, z, t, delta) = if dim == 1 {
            (f(0)?, None, f(1)?, f(2)?)
        } else {
            (f(0)?, Some(f(1)?), f(2)?, f(3)?)
        };
        let event = match delta {
            0.0 => false,
            1.0 => true,
            v => {
                return Err(WhError::Parse {
                    line,
                    message: format!("delta must be 0 or 1, got {v}"),
                })
            }
        };
        let r = PortfolioRecord::new(x, z, t, event).map_err(|e| WhError::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok((out, dim))
}

pub fn write_records<W: Write>(records: &[PortfolioRecord], dim: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| WhError::Io(e.to_string());
    if dim == 1 {
        w.write_record(["x", "t", "delta"]).map_err(io)?;
    } else {
        w.write_record(["x", "z", "t", "delta"]).map_err(io)?;
    }
    for r in records {
        let delta = if r.event { "1" } else { "0" };
        if dim == 1 {
            w.write_record([fmt_real(r.x_entry), fmt_real(r.t), delta.into()])
                .map_err(io)?;
        } else {
            let z = r.z_entry.unwrap_or(0.0);
            w.write_record([fmt_real(r.x_entry), fmt_real(z), fmt_real(r.t), delta.into()])
                .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes aggregates as CSV with header `x[,z],d,ec`.
pub fn write_aggregates<W: Write>(agg: &AggregatedExposure, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| WhError::Io(e.to_string());
    match agg.grid {
        Grid::One(_) => w.write_record(["x", "d", "ec"]).map_err(io)?,
        Grid::Two { .. } => w.write_record(["x", "z", "d", "ec"]).map_err(io)?,
    }
    for (k, (x, z)) in agg.grid.coords().into_iter().enumerate() {
        let mut row = vec![x.to_string()];
        if let Some(z) = z {
            row.push(z.to_string());
        }
        row.push(fmt_count(agg.d[k]));
        row.push(fmt_real(agg.ec[k]));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an aggregate table; rows must cover a full rectangular grid.
pub fn read_aggregates<R: Read>(reader: R) -> Result<AggregatedExposure> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let dim = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["x", "d", "ec", ..] => 1,
        ["x", "z", "d", "ec", ..] => 2,
        _ => {
            return Err(WhError::Parse {
                line: 1,
                message: format!(
                    "expected header starting 'x,d,ec' or 'x,z,d,ec', got '{}'",
                    header.join(",")
                ),
            })
        }
    };
    let mut rows: Vec<(i64, Option<i64>, f64, f64, u64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let int = |k: usize| {
            rec[k].trim().parse::<i64>().map_err(|_| WhError::Parse {
                line,
                message: format!("column '{}': expected an integer, got '{}'", header[k], &rec[k]),
            })
        };
        let (x, z, off) = if dim == 1 {
            (int(0)?, None, 1)
        } else {
            (int(0)?, Some(int(1)?), 2)
        };
        let d = parse_f64(&rec[off], line, "d")?;
        let ec = parse_f64(&rec[off + 1], line, "ec")?;
        if d < 0.0 || ec < 0.0 {
            return Err(WhError::Parse {
                line,
                message: "d and ec must be nonnegative".into(),
            });
        }
        rows.push((x, z, d, ec, line));
    }
    if rows.is_empty() {
        return Err(WhError::Parse {
            line: 1,
            message: "aggregate table has no rows".into(),
        });
    }
    let xmin = rows.iter().map(|r| r.0).min().unwrap();
    let xmax = rows.iter().map(|r| r.0).max().unwrap();
    let grid = if dim == 1 {
        Grid::one(xmin, xmax)?
    } else {
        let zmin = rows.iter().filter_map(|r| r.1).min().unwrap();
        let zmax = rows.iter().filter_map(|r| r.1).max().unwrap();
        Grid::two((xmin, xmax), (zmin, zmax))?
    };
    let mut agg = AggregatedExposure::zeros(grid);
    let mut seen = vec![false; grid.len()];
    for (x, z, d, ec, line) in rows {
        let k = grid.index_of(x, z).expect("coordinates inside computed bounds");
        if seen[k] {
            return Err(WhError::Parse {
                line,
                message: format!("duplicate cell ({x}{})", z.map(|z| format!(",{z}")).unwrap_or_default()),
            });
        }
        seen[k] = true;
        agg.d[k] = d;
        agg.ec[k] = ec;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        let (x, z) = grid.coords()[k];
        return Err(WhError::Parse {
            line: 0,
            message: format!(
                "grid cell ({x}{}) missing from aggregate table",
                z.map(|z| format!(",{z}")).unwrap_or_default()
            ),
        });
    }
    Ok(agg)
}
