use nalgebra::DVector;
use wh_core::gaussian::normal_quantile;
use wh_core::io::{fmt_count, fmt_real};
use wh_core::{Grid, Result};

/// Smoothed log hazards with their posterior variances on a grid.
pub(crate) struct HazardTable<'a> {
    pub grid: &'a Grid,
    pub d: &'a [f64],
    pub ec: &'a [f64],
    pub log_hazard: &'a DVector<f64>,
    pub variance: &'a DVector<f64>,
    /// `true` for cells of the original fit; adds a `region` column.
    pub initial: Option<&'a [bool]>,
}

impl HazardTable<'_> {
    /// CSV `x[,z],d,ec,log_hazard,hazard,std_err,lower,upper[,region]`;
    /// the band is on the log scale.
    pub fn to_csv(&self, alpha: f64) -> Result<String> {
        let z = normal_quantile(alpha)?;
        let mut out = String::new();
        out.push_str(if self.grid.dim() == 1 { "x" } else { "x,z" });
        out.push_str(",d,ec,log_hazard,hazard,std_err,lower,upper");
        if self.initial.is_some() {
            out.push_str(",region");
        }
        out.push('\n');
        for (k, (x, zc)) in self.grid.coords().into_iter().enumerate() {
            let theta = self.log_hazard[k];
            let se = self.variance[k].max(0.0).sqrt();
            let mut row = vec![x.to_string()];
            if let Some(zc) = zc {
                row.push(zc.to_string());
            }
            row.push(fmt_count(self.d[k]));
            row.push(fmt_real(self.ec[k]));
            row.push(fmt_real(theta));
            row.push(fmt_real(theta.exp()));
            row.push(fmt_real(se));
            row.push(fmt_real(theta - z * se));
            row.push(fmt_real(theta + z * se));
            if let Some(initial) = self.initial {
                row.push(if initial[k] { "initial" } else { "extrapolated" }.into());
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        Ok(out)
    }
}
