//! Integer grids shared by aggregation, smoothing and extrapolation.
//!
//! Two-dimensional tables are vectorized by stacking columns of the
//! `(x, z)` matrix, so the x index varies fastest: cell `(i, j)` sits at
//! position `j * n_x + i`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WhError};

/// Inclusive range of consecutive integers `min..=max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisRange {
    pub min: i64,
    pub max: i64,
}

impl AxisRange {
    pub fn new(min: i64, max: i64) -> Result<Self> {
        if min > max {
            return Err(WhError::InvalidParameter(format!(
                "axis range {min}..{max} is empty"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, v: i64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn contains_range(&self, other: &AxisRange) -> bool {
        other.min >= self.min && other.max <= self.max
    }

    pub fn values(&self) -> impl Iterator<Item = i64> {
        self.min..=self.max
    }
}

impl fmt::Display for AxisRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.min, self.max)
    }
}

impl FromStr for AxisRange {
    type Err = WhError;

    /// Parses `A..B` (inclusive on both ends).
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| WhError::InvalidParameter(format!("expected A..B, got '{s}'")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<i64>()
                .map_err(|_| WhError::InvalidParameter(format!("bad integer '{t}' in '{s}'")))
        };
        AxisRange::new(parse(a)?, parse(b)?)
    }
}

/// A regular 1D or 2D grid of unit cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grid {
    One(AxisRange),
    Two { x: AxisRange, z: AxisRange },
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Grid::One(x) => write!(f, "{x}"),
            Grid::Two { x, z } => write!(f, "{x} x {z}"),
        }
    }
}

impl Grid {
    pub fn one(min: i64, max: i64) -> Result<Self> {
        Ok(Grid::One(AxisRange::new(min, max)?))
    }

    pub fn two(x: (i64, i64), z: (i64, i64)) -> Result<Self> {
        Ok(Grid::Two {
            x: AxisRange::new(x.0, x.1)?,
            z: AxisRange::new(z.0, z.1)?,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Grid::One(x) => x.len(),
            Grid::Two { x, z } => x.len() * z.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        match self {
            Grid::One(_) => 1,
            Grid::Two { .. } => 2,
        }
    }

    /// Axis lengths: `[n]` or `[n_x, n_z]`.
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Grid::One(x) => vec![x.len()],
            Grid::Two { x, z } => vec![x.len(), z.len()],
        }
    }

    pub fn x_range(&self) -> AxisRange {
        match self {
            Grid::One(x) => *x,
            Grid::Two { x, .. } => *x,
        }
    }

    pub fn z_range(&self) -> Option<AxisRange> {
        match self {
            Grid::One(_) => None,
            Grid::Two { z, .. } => Some(*z),
        }
    }

    /// Vector position of the cell with lower corner `(x, z)`.
    pub fn index_of(&self, x: i64, z: Option<i64>) -> Option<usize> {
        match (self, z) {
            (Grid::One(xr), None) if xr.contains(x) => Some((x - xr.min) as usize),
            (Grid::Two { x: xr, z: zr }, Some(z)) if xr.contains(x) && zr.contains(z) => {
                Some((z - zr.min) as usize * xr.len() + (x - xr.min) as usize)
            }
            _ => None,
        }
    }

    /// Cell coordinates in vectorization order.
    pub fn coords(&self) -> Vec<(i64, Option<i64>)> {
        match self {
            Grid::One(x) => x.values().map(|v| (v, None)).collect(),
            Grid::Two { x, z } => z
                .values()
                .flat_map(|zv| x.values().map(move |xv| (xv, Some(zv))))
                .collect(),
        }
    }

    /// Whether `self` is a sub-grid of `other` with matching dimension.
    pub fn is_subgrid_of(&self, other: &Grid) -> bool {
        match (self, other) {
            (Grid::One(a), Grid::One(b)) => b.contains_range(a),
            (Grid::Two { x: ax, z: az }, Grid::Two { x: bx, z: bz }) => {
                bx.contains_range(ax) && bz.contains_range(az)
            }
            _ => false,
        }
    }
}
