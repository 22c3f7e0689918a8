//! Replicated simulation experiments.
//!
//! * `normal-approx-bias`: `Δ(θ̂_norm)`, the loss from fitting the Gaussian
//!   approximation on `(ln(d/e_c), d)` instead of the Poisson likelihood, over
//!   a ladder of portfolio sizes in 1D and 2D.
//! * `outer-vs-performance`: `Δ(λ̂_perf)` against the outer-iteration optimum,
//!   with timings.
//! * `rank-reduction-sweep`: `Δ(λ̂_p)` for reduced inner problems over a
//!   range of basis budgets.
//!
//! Metrics are written as long-format CSV and are a deterministic function
//! of the seed. Timings are kept apart so that metric files stay
//! byte-identical across runs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::duration::aggregate;
use crate::error::{Result, WhError};
use crate::gaussian::fit_gaussian;
use crate::generalized::{
    delta_theta, select_lambda_outer, select_lambda_performance, theta_infinity, CountData,
    MarginalReference, NewtonOptions, SelectionOptions,
};
use crate::grid::Grid;
use crate::io::fmt_real;
use crate::penalty::PenaltyTemplate;
use crate::rank_reduction::select_lambda_reduced;
use crate::simulator::{child_seed, simulate, Censoring, HazardLaw, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    NormalApproxBias,
    OuterVsPerformance,
    RankReductionSweep,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::NormalApproxBias => "normal-approx-bias",
            Experiment::OuterVsPerformance => "outer-vs-performance",
            Experiment::RankReductionSweep => "rank-reduction-sweep",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = WhError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal-approx-bias" => Ok(Experiment::NormalApproxBias),
            "outer-vs-performance" => Ok(Experiment::OuterVsPerformance),
            "rank-reduction-sweep" => Ok(Experiment::RankReductionSweep),
            other => Err(WhError::InvalidParameter(format!(
                "unknown experiment '{other}' (expected normal-approx-bias, \
                 outer-vs-performance or rank-reduction-sweep)"
            ))),
        }
    }
}

/// A simulated portfolio design and the grid it is fitted on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub label: String,
    pub grid: Grid,
    pub orders: Vec<usize>,
    pub law: HazardLaw,
    /// `seed` is replaced per replicate.
    pub sim: SimConfig,
}

impl Scenario {
    /// 1D Gompertz-Makeham portfolio on ages 50..99.
    pub fn one_d(label: &str, m: usize) -> Self {
        Self {
            label: label.into(),
            grid: Grid::one(50, 99).expect("valid range"),
            orders: vec![2],
            law: HazardLaw::default_1d(),
            sim: SimConfig {
                m,
                entry_x: (45.0, 95.0),
                entry_z: None,
                censoring: Censoring::Uniform { max: 10.0 },
                horizon: 10.0,
                seed: 0,
            },
        }
    }

    /// 1D Gompertz-Makeham portfolio on ages 30..103 (74 cells).
    pub fn one_d_wide(label: &str, m: usize) -> Self {
        Self {
            label: label.into(),
            grid: Grid::one(30, 103).expect("valid range"),
            orders: vec![2],
            law: HazardLaw::default_1d(),
            sim: SimConfig {
                m,
                entry_x: (25.0, 100.0),
                entry_z: None,
                censoring: Censoring::Uniform { max: 12.0 },
                horizon: 12.0,
                seed: 0,
            },
        }
    }

    /// 2D portfolio on ages 60..79 and durations 0..9.
    pub fn two_d(label: &str, m: usize) -> Self {
        Self {
            label: label.into(),
            grid: Grid::two((60, 79), (0, 9)).expect("valid ranges"),
            orders: vec![2, 2],
            law: HazardLaw::default_2d(),
            sim: SimConfig {
                m,
                entry_x: (55.0, 80.0),
                entry_z: Some((0.0, 1.0)),
                censoring: Censoring::Exponential { rate: 0.1 },
                horizon: 10.0,
                seed: 0,
            },
        }
    }

    /// Simulates and aggregates one replicate.
    pub fn data(&self, seed: u64) -> Result<CountData> {
        let mut cfg = self.sim.clone();
        cfg.seed = seed;
        let records = simulate(&cfg, &self.law)?;
        let agg = aggregate(&records, self.grid)?;
        CountData::new(DVector::from_vec(agg.d), DVector::from_vec(agg.ec))
    }

    pub fn template(&self) -> Result<PenaltyTemplate> {
        PenaltyTemplate::for_grid(&self.grid, &self.orders)
    }
}

/// Everything an experiment run needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentPlan {
    pub experiment: Experiment,
    pub replicates: usize,
    pub seed: u64,
    pub scenarios: Vec<Scenario>,
    /// Basis budgets for the rank-reduction sweep (clamped per scenario).
    pub p_values: Vec<usize>,
    #[serde(skip)]
    pub selection: SelectionOptions,
}

impl ExperimentPlan {
    /// Default designs.
    pub fn new(experiment: Experiment, replicates: usize, seed: u64) -> Self {
        let scenarios = match experiment {
            Experiment::NormalApproxBias => vec![
                Scenario::one_d("1d-small", 2_000),
                Scenario::one_d("1d-medium", 20_000),
                Scenario::one_d("1d-large", 200_000),
                Scenario::two_d("2d-small", 1_000),
                Scenario::two_d("2d-medium", 10_000),
                Scenario::two_d("2d-large", 100_000),
            ],
            Experiment::OuterVsPerformance => vec![Scenario::one_d("1d", 25_000)],
            Experiment::RankReductionSweep => vec![Scenario::one_d_wide("1d", 30_000)],
        };
        Self {
            experiment,
            replicates,
            seed,
            scenarios,
            p_values: vec![2, 3, 5, 10, 20, 40, 74],
            selection: SelectionOptions::default(),
        }
    }
}

/// One metric value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub replicate: usize,
    pub scenario: String,
    pub p: Option<usize>,
    pub metric: String,
    pub value: f64,
}

/// One timed step, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub replicate: usize,
    pub scenario: String,
    pub p: Option<usize>,
    pub step: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub replicate: usize,
    pub scenario: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
struct ReplicateOutput {
    metrics: Vec<MetricRow>,
    timings: Vec<TimingRow>,
}

impl ReplicateOutput {
    fn metric(&mut self, r: usize, s: &str, p: Option<usize>, name: &str, value: f64) {
        self.metrics.push(MetricRow {
            replicate: r,
            scenario: s.into(),
            p,
            metric: name.into(),
            value,
        });
    }

    fn timing(&mut self, r: usize, s: &str, p: Option<usize>, step: &str, seconds: f64) {
        self.timings.push(TimingRow {
            replicate: r,
            scenario: s.into(),
            p,
            step: step.into(),
            seconds,
        });
    }

    fn lambdas(&mut self, r: usize, s: &str, p: Option<usize>, prefix: &str, l: &[f64]) {
        let names = ["x", "z"];
        for (k, v) in l.iter().enumerate() {
            let name = if l.len() == 1 { prefix.to_string() } else { format!("{prefix}_{}", names[k]) };
            self.metric(r, s, p, &name, *v);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub plan: ExperimentPlan,
    pub metrics: Vec<MetricRow>,
    pub timings: Vec<TimingRow>,
    pub failures: Vec<Failure>,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed().as_secs_f64()))
}

fn run_one(plan: &ExperimentPlan, scenario: &Scenario, r: usize, seed: u64) -> Result<ReplicateOutput> {
    let mut out = ReplicateOutput::default();
    let s = scenario.label.as_str();
    let data = scenario.data(seed)?;
    let template = scenario.template()?;
    let opts = &plan.selection;
    let newton = NewtonOptions::default();
    out.metric(r, s, None, "events", data.total_events());
    out.metric(r, s, None, "exposure", data.ec.sum());

    let (outer, t_outer) = timed(|| select_lambda_outer(&data, &template, opts))?;
    out.timing(r, s, None, "outer", t_outer);
    out.lambdas(r, s, None, "lambda_outer", &outer.lambda);

    match plan.experiment {
        Experiment::NormalApproxBias => {
            let inf = theta_infinity(&data, &template, &newton)?;
            let (y, w) = crude_rate_inputs_of(&data);
            let norm = fit_gaussian(&y, &w, &outer.fit.penalty)?;
            out.metric(r, s, None, "delta_theta_norm", delta_theta(&norm.theta_hat, &outer.fit, &inf)?);
            let truth = scenario.law.true_log_hazard(&scenario.grid);
            let rmse = |t: &DVector<f64>| ((t - &truth).norm_squared() / t.len() as f64).sqrt();
            out.metric(r, s, None, "rmse_ml", rmse(&outer.fit.theta_hat));
            out.metric(r, s, None, "rmse_norm", rmse(&norm.theta_hat));
        }
        Experiment::OuterVsPerformance => {
            let (perf, t_perf) = timed(|| select_lambda_performance(&data, &template, opts))?;
            out.timing(r, s, None, "performance", t_perf);
            out.lambdas(r, s, None, "lambda_perf", &perf.lambda);
            let reference = MarginalReference::from_fit(&outer.fit, &newton)?;
            out.metric(r, s, None, "delta_lambda_perf", reference.delta(&perf.lambda)?);
        }
        Experiment::RankReductionSweep => {
            let reference = MarginalReference::from_fit(&outer.fit, &newton)?;
            let mut seen = Vec::new();
            for &p_max in &plan.p_values {
                let dims = crate::rank_reduction::choose_p(&template, p_max);
                let p: usize = dims.iter().product();
                if seen.contains(&p) {
                    continue;
                }
                seen.push(p);
                let (sel, t) = timed(|| select_lambda_reduced(&data, &template, p, opts))?;
                out.timing(r, s, Some(p), "reduced", t);
                out.lambdas(r, s, Some(p), "lambda_reduced", &sel.lambda);
                out.metric(r, s, Some(p), "delta_lambda_reduced", reference.delta(&sel.lambda)?);
            }
        }
    }
    Ok(out)
}

fn crude_rate_inputs_of(data: &CountData) -> (DVector<f64>, DVector<f64>) {
    let n = data.len();
    let y = DVector::from_fn(n, |i, _| if data.d[i] > 0.0 { (data.d[i] / data.ec[i]).ln() } else { 0.0 });
    (y, data.d.clone())
}

/// Runs every (scenario, replicate) pair on up to `threads` threads.
/// Failures are recorded per replicate and do not stop the batch.
pub fn replicate_experiment(plan: &ExperimentPlan, threads: usize) -> Result<ExperimentReport> {
    replicate_experiment_with_progress(plan, threads, &|_: &Progress| {})
}

/// Completion notice for one (scenario, replicate) job.
#[derive(Debug, Clone)]
pub struct Progress<'a> {
    pub scenario: &'a str,
    pub replicate: usize,
    pub done: usize,
    pub total: usize,
    pub error: Option<&'a WhError>,
}

/// [`replicate_experiment`] calling `progress` as each job finishes.
pub fn replicate_experiment_with_progress(
    plan: &ExperimentPlan,
    threads: usize,
    progress: &(dyn Fn(&Progress) + Sync),
) -> Result<ExperimentReport> {
    let jobs: Vec<(usize, usize)> = (0..plan.scenarios.len())
        .flat_map(|s| (0..plan.replicates).map(move |r| (s, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| WhError::InvalidParameter(format!("thread pool: {e}")))?;
    let done = AtomicUsize::new(0);
    let results: Vec<(usize, usize, Result<ReplicateOutput>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, r)| {
                let seed = child_seed(child_seed(plan.seed, s as u64), r as u64);
                let res = run_one(plan, &plan.scenarios[s], r, seed);
                progress(&Progress {
                    scenario: &plan.scenarios[s].label,
                    replicate: r,
                    done: done.fetch_add(1, Ordering::Relaxed) + 1,
                    total: jobs.len(),
                    error: res.as_ref().err(),
                });
                (s, r, res)
            })
            .collect()
    });
    let mut metrics = Vec::new();
    let mut timings = Vec::new();
    let mut failures = Vec::new();
    for (s, r, res) in results {
        match res {
            Ok(o) => {
                metrics.extend(o.metrics);
                timings.extend(o.timings);
            }
            Err(e) => failures.push(Failure {
                replicate: r,
                scenario: plan.scenarios[s].label.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(ExperimentReport {
        plan: plan.clone(),
        metrics,
        timings,
        failures,
    })
}

/// Median of a nonempty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

fn key(scenario: &str, p: Option<usize>, name: &str) -> String {
    match p {
        Some(p) => format!("{scenario}/p={p}/{name}"),
        None => format!("{scenario}/{name}"),
    }
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    schema: u32,
    experiment: &'a str,
    replicates: usize,
    seed: u64,
    scenarios: Vec<&'a str>,
    medians: BTreeMap<String, f64>,
    failures: &'a [Failure],
    timings: &'a str,
}

impl ExperimentReport {
    /// Values of `metric` for `scenario` (and `p`), in replicate order.
    pub fn values(&self, scenario: &str, p: Option<usize>, metric: &str) -> Vec<f64> {
        let mut rows: Vec<&MetricRow> = self
            .metrics
            .iter()
            .filter(|m| m.scenario == scenario && m.p == p && m.metric == metric)
            .collect();
        rows.sort_by_key(|m| m.replicate);
        rows.into_iter().map(|m| m.value).collect()
    }

    pub fn timing_values(&self, scenario: &str, p: Option<usize>, step: &str) -> Vec<f64> {
        let mut rows: Vec<&TimingRow> = self
            .timings
            .iter()
            .filter(|t| t.scenario == scenario && t.p == p && t.step == step)
            .collect();
        rows.sort_by_key(|t| t.replicate);
        rows.into_iter().map(|t| t.seconds).collect()
    }

    pub fn medians(&self) -> BTreeMap<String, f64> {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for m in &self.metrics {
            groups.entry(key(&m.scenario, m.p, &m.metric)).or_default().push(m.value);
        }
        groups.into_iter().filter_map(|(k, v)| median(&v).map(|m| (k, m))).collect()
    }

    pub fn timing_medians(&self) -> BTreeMap<String, f64> {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for t in &self.timings {
            groups.entry(key(&t.scenario, t.p, &t.step)).or_default().push(t.seconds);
        }
        groups.into_iter().filter_map(|(k, v)| median(&v).map(|m| (k, m))).collect()
    }

    fn sorted_metrics(&self) -> Vec<&MetricRow> {
        let order: BTreeMap<&str, usize> =
            self.plan.scenarios.iter().enumerate().map(|(i, s)| (s.label.as_str(), i)).collect();
        let mut rows: Vec<&MetricRow> = self.metrics.iter().collect();
        rows.sort_by_key(|m| (order[m.scenario.as_str()], m.replicate, m.p));
        rows
    }

    /// `replicate,scenario,p,metric,value`.
    pub fn write_metrics<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "scenario", "p", "metric", "value"]).map_err(csv_err)?;
        for m in self.sorted_metrics() {
            let p = m.p.map(|p| p.to_string()).unwrap_or_default();
            w.write_record([m.replicate.to_string(), m.scenario.clone(), p, m.metric.clone(), fmt_real(m.value)])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `replicate,scenario,p,step,seconds` (not deterministic).
    pub fn write_timings<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "scenario", "p", "step", "seconds"]).map_err(csv_err)?;
        for t in &self.timings {
            let p = t.p.map(|p| p.to_string()).unwrap_or_default();
            w.write_record([t.replicate.to_string(), t.scenario.clone(), p, t.step.clone(), fmt_real(t.seconds)])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON summary with metric medians; timings are referenced by file name.
    pub fn write_summary<W: Write>(&self, writer: W, timings_file: &str) -> Result<()> {
        let mut failures = self.failures.clone();
        failures.sort_by(|a, b| (&a.scenario, a.replicate).cmp(&(&b.scenario, b.replicate)));
        let summary = Summary {
            schema: 1,
            experiment: self.plan.experiment.name(),
            replicates: self.plan.replicates,
            seed: self.plan.seed,
            scenarios: self.plan.scenarios.iter().map(|s| s.label.as_str()).collect(),
            medians: self.medians(),
            failures: &failures,
            timings: timings_file,
        };
        serde_json::to_writer_pretty(writer, &summary).map_err(|e| WhError::Io(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> WhError {
    WhError::Io(e.to_string())
}
