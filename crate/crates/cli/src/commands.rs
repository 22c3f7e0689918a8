use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use wh_core::basis::{EigenBasis, PenalizedSystem};
use wh_core::duration::{aggregate, read_aggregates, read_records, write_aggregates, write_records, AggregatedExposure};
use wh_core::experiments::{replicate_experiment_with_progress, Experiment, ExperimentPlan, Progress, Scenario};
use wh_core::extrapolation::{
    extrapolate_constrained, extrapolate_unconstrained, ExtrapolationInput, ExtrapolationResult, GridEmbedding,
};
use wh_core::generalized::{
    newton_fit, select_lambda_outer, select_lambda_performance, CountData, GeneralizedFit, MarginalReference,
    Selection, SelectionOptions,
};
use wh_core::io::fmt_real;
use wh_core::penalty::PenaltyTemplate;
use wh_core::rank_reduction::select_lambda_reduced;
use wh_core::simulator::simulate;
use wh_core::{Grid, Result, WhError};

use crate::table::HazardTable;
use crate::{AggregateArgs, ExtrapolateArgs, ExtrapolationMode, FitArgs, Method, ReplicateArgs, ScenarioName, SimulateArgs};

const SCHEMA: u32 = 1;

/// What `fit` stores for later extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub schema: u32,
    pub grid: Grid,
    pub orders: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub alpha: f64,
    pub d: Vec<f64>,
    pub ec: Vec<f64>,
    pub theta_hat: Vec<f64>,
}

fn io_err(path: &Path, e: std::io::Error) -> WhError {
    WhError::Io(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_artifact(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io_err(&path, e))
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| WhError::Io(e.to_string()))?;
    text.push('\n');
    write_artifact(dir, name, text)
}

pub fn run_aggregate(args: &AggregateArgs) -> Result<()> {
    let grid = match args.z {
        Some(z) => Grid::Two { x: args.x, z },
        None => Grid::One(args.x),
    };
    let text = read_text(&args.input)?;
    let agg = if text.trim().is_empty() {
        eprintln!("warning: {} is empty, writing a zero table", args.input.display());
        AggregatedExposure::zeros(grid)
    } else {
        let (records, dim) = read_records(text.as_bytes())?;
        if dim != grid.dim() {
            return Err(WhError::InvalidParameter(format!(
                "records are {dim}D but the bounds describe a {}D grid",
                grid.dim()
            )));
        }
        if records.is_empty() {
            eprintln!("warning: {} has no records, writing a zero table", args.input.display());
        }
        aggregate(&records, grid)?
    };
    let mut buf = Vec::new();
    write_aggregates(&agg, &mut buf)?;
    write_artifact(&args.out, "aggregates.csv", buf)
}

/// `(W_θ + P_λ)⁻¹` at the stored estimate, as used for every hazard table.
fn posterior_covariance(template: &PenaltyTemplate, data: &CountData, theta: &DVector<f64>, lambdas: &[f64]) -> Result<DMatrix<f64>> {
    let basis = EigenBasis::full(template)?;
    let gram = basis.weighted_gram(&data.weights(theta));
    Ok(PenalizedSystem::new(basis, &gram, lambdas)?.psi())
}

fn orders_for(args: &FitArgs, dim: usize) -> Result<Vec<usize>> {
    if dim == 1 {
        if args.qx.is_some() || args.qz.is_some() {
            return Err(WhError::InvalidParameter("--qx/--qz apply to 2D tables only".into()));
        }
        Ok(vec![args.q])
    } else {
        Ok(vec![args.qx.unwrap_or(args.q), args.qz.unwrap_or(args.q)])
    }
}

fn fixed_lambdas(args: &FitArgs, dim: usize) -> Result<Option<Vec<f64>>> {
    if dim == 1 {
        if args.lambda_x.is_some() || args.lambda_z.is_some() {
            return Err(WhError::InvalidParameter("--lambda-x/--lambda-z apply to 2D tables only; use --lambda".into()));
        }
        return Ok(args.lambda.map(|l| vec![l]));
    }
    match (args.lambda_x.or(args.lambda), args.lambda_z.or(args.lambda)) {
        (None, None) => Ok(None),
        (Some(x), Some(z)) => Ok(Some(vec![x, z])),
        _ => Err(WhError::InvalidParameter(
            "a fixed 2D fit needs both --lambda-x and --lambda-z (or --lambda)".into(),
        )),
    }
}

struct FitOutcome {
    fit: GeneralizedFit,
    method: &'static str,
    selection: Option<Selection>,
    comparison: Option<Value>,
}

fn fit_failure_diagnostics(e: &WhError) -> Value {
    let mut v = json!({
        "schema": SCHEMA,
        "command": "fit",
        "status": "failed",
        "error": e.to_string(),
        "exit_code": crate::exit_code(e),
    });
    if let WhError::Convergence { iterations, trace, lambda, reason } = e {
        v["iterations"] = json!(iterations);
        v["trace"] = json!(trace);
        v["lambda"] = json!(lambda);
        v["reason"] = json!(reason);
    }
    v
}

fn compare_with_outer(data: &CountData, template: &PenaltyTemplate, opts: &SelectionOptions, lambda: &[f64]) -> Value {
    let run = || -> Result<(Vec<f64>, f64)> {
        let outer = select_lambda_outer(data, template, opts)?;
        let reference = MarginalReference::from_fit(&outer.fit, &opts.newton)?;
        Ok((outer.lambda, reference.delta(lambda)?))
    };
    match run() {
        Ok((lambda_outer, delta)) => json!({ "lambda_outer": lambda_outer, "delta_lambda_vs_outer": delta }),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn fit_table(args: &FitArgs, data: &CountData, template: &PenaltyTemplate) -> Result<FitOutcome> {
    let dim = template.dim();
    let opts = SelectionOptions::default();
    if let Some(lambdas) = fixed_lambdas(args, dim)? {
        if args.pmax.is_some() {
            return Err(WhError::InvalidParameter("--pmax needs automatic smoothing-parameter selection".into()));
        }
        let penalty = template.with_lambdas(&lambdas)?;
        let fit = newton_fit(data, &penalty, &opts.newton)?;
        return Ok(FitOutcome { fit, method: "fixed", selection: None, comparison: None });
    }
    let (method, selection) = match (args.method, args.pmax) {
        (Method::Outer, Some(_)) => {
            return Err(WhError::InvalidParameter("--pmax is only available with --method perf".into()))
        }
        (Method::Outer, None) => ("outer", select_lambda_outer(data, template, &opts)?),
        (Method::Perf, None) => ("performance", select_lambda_performance(data, template, &opts)?),
        (Method::Perf, Some(p)) => ("performance", select_lambda_reduced(data, template, p, &opts)?),
    };
    let comparison = (method == "performance").then(|| compare_with_outer(data, template, &opts, &selection.lambda));
    Ok(FitOutcome { fit: selection.fit.clone(), method, selection: Some(selection), comparison })
}

pub fn run_fit(args: &FitArgs) -> Result<()> {
    let start = Instant::now();
    normal_quantile_check(args.alpha)?;
    let agg = read_aggregates(read_text(&args.input)?.as_bytes())?;
    let dim = agg.grid.dim();
    if let Some(expected) = args.dim {
        if expected as usize != dim {
            return Err(WhError::InvalidParameter(format!("--dim {expected} but the input is a {dim}D table")));
        }
    }
    let orders = orders_for(args, dim)?;
    let template = PenaltyTemplate::for_grid(&agg.grid, &orders)?;
    let data = CountData::from_slices(&agg.d, &agg.ec)?;
    let outcome = match fit_table(args, &data, &template) {
        Ok(o) => o,
        Err(e) => {
            write_json(&args.out, "diagnostics.json", &fit_failure_diagnostics(&e))?;
            return Err(e);
        }
    };
    let fit = &outcome.fit;
    let lambdas = fit.lambdas().to_vec();
    let psi = posterior_covariance(&template, &data, &fit.theta_hat, &lambdas)?;

    let table = HazardTable {
        grid: &agg.grid,
        d: &agg.d,
        ec: &agg.ec,
        log_hazard: &fit.theta_hat,
        variance: &psi.diagonal(),
        initial: None,
    };
    write_artifact(&args.out, "fit.csv", table.to_csv(args.alpha)?)?;

    let mut diag = json!({
        "schema": SCHEMA,
        "command": "fit",
        "status": "ok",
        "grid": agg.grid.to_string(),
        "dimension": dim,
        "orders": orders,
        "method": outcome.method,
        "pmax": args.pmax,
        "alpha": args.alpha,
        "lambda": lambdas,
        "log10_lambda": lambdas.iter().map(|l| l.log10()).collect::<Vec<_>>(),
        "edf": fit.edf(),
        "loglik": fit.loglik,
        "penalized_loglik": fit.penalized_loglik,
        "laplace_marginal_loglik": fit.laplace_marginal,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "trace": fit.trace,
        "gradient_norm": fit.gradient_norm(),
        "total_events": data.total_events(),
        "total_exposure": data.ec.sum(),
    });
    if let Some(sel) = &outcome.selection {
        diag["selection"] = json!({
            "evaluations": sel.evaluations,
            "lambda_trace": sel.lambda_trace,
            "hit_max_evals": sel.hit_max_evals,
        });
    }
    if let Some(cmp) = outcome.comparison {
        diag["comparison"] = cmp;
    }
    write_json(&args.out, "diagnostics.json", &diag)?;

    let state = FitState {
        schema: SCHEMA,
        grid: agg.grid,
        orders,
        lambdas,
        alpha: args.alpha,
        d: agg.d.clone(),
        ec: agg.ec.clone(),
        theta_hat: fit.theta_hat.iter().copied().collect(),
    };
    write_json(&args.out, "fit_state.json", &serde_json::to_value(&state).map_err(|e| WhError::Io(e.to_string()))?)?;
    write_json(
        &args.out,
        "timing.json",
        &json!({ "schema": SCHEMA, "command": "fit", "wall_clock_seconds": start.elapsed().as_secs_f64() }),
    )
}

fn normal_quantile_check(alpha: f64) -> Result<()> {
    wh_core::gaussian::normal_quantile(alpha).map(|_| ())
}

fn read_state(dir: &Path) -> Result<FitState> {
    let path = dir.join("fit_state.json");
    let state: FitState = serde_json::from_str(&read_text(&path)?).map_err(|e| WhError::Parse {
        line: e.line() as u64,
        message: format!("{}: {e}", path.display()),
    })?;
    let n = state.grid.len();
    if state.schema != SCHEMA || state.d.len() != n || state.ec.len() != n || state.theta_hat.len() != n {
        return Err(WhError::InvalidParameter(format!("{} is inconsistent", path.display())));
    }
    Ok(state)
}

fn extended_grid(grid: &Grid, args: &ExtrapolateArgs) -> Result<Grid> {
    match grid {
        Grid::One(x) => {
            if args.extend_z.is_some() {
                return Err(WhError::InvalidParameter("--extend-z applies to 2D fits only".into()));
            }
            Ok(Grid::One(args.extend_x.unwrap_or(*x)))
        }
        Grid::Two { x, z } => Ok(Grid::Two {
            x: args.extend_x.unwrap_or(*x),
            z: args.extend_z.unwrap_or(*z),
        }),
    }
}

pub fn run_extrapolate(args: &ExtrapolateArgs) -> Result<()> {
    let state = read_state(&args.fit)?;
    let alpha = args.alpha.unwrap_or(state.alpha);
    normal_quantile_check(alpha)?;
    let template = PenaltyTemplate::for_grid(&state.grid, &state.orders)?;
    let data = CountData::from_slices(&state.d, &state.ec)?;
    let theta = DVector::from_column_slice(&state.theta_hat);
    let psi = posterior_covariance(&template, &data, &theta, &state.lambdas)?;
    let (z, w) = data.working_data(&theta);
    let input = ExtrapolationInput {
        y: z,
        w,
        y_hat: theta,
        psi,
        orders: state.orders.clone(),
        lambdas: state.lambdas.clone(),
    };
    let grid_plus = extended_grid(&state.grid, args)?;
    let emb = GridEmbedding::new(&state.grid, &grid_plus)?;
    let run = |mode: ExtrapolationMode| match mode {
        ExtrapolationMode::Constrained => extrapolate_constrained(&input, &emb),
        ExtrapolationMode::Unconstrained => extrapolate_unconstrained(&input, &emb),
    };
    let result = run(args.mode)?;

    let d_plus: Vec<f64> = emb.scatter(&data.d).iter().copied().collect();
    let ec_plus: Vec<f64> = emb.scatter(&data.ec).iter().copied().collect();
    let mut initial = vec![false; emb.n_plus()];
    for &k in &emb.original {
        initial[k] = true;
    }
    let table = HazardTable {
        grid: &grid_plus,
        d: &d_plus,
        ec: &ec_plus,
        log_hazard: &result.y_plus,
        variance: &result.psi_plus.diagonal(),
        initial: Some(&initial),
    };
    write_artifact(&args.out, "extrapolated.csv", table.to_csv(alpha)?)?;

    if args.compare {
        let (c, u) = match args.mode {
            ExtrapolationMode::Constrained => (result, run(ExtrapolationMode::Unconstrained)?),
            ExtrapolationMode::Unconstrained => (run(ExtrapolationMode::Constrained)?, result),
        };
        write_artifact(&args.out, "ratio.csv", ratio_csv(&grid_plus, &initial, &c, &u))?;
    }
    Ok(())
}

/// Unconstrained over constrained hazards and standard errors.
fn ratio_csv(grid: &Grid, initial: &[bool], c: &ExtrapolationResult, u: &ExtrapolationResult) -> String {
    let mut out = String::from(if grid.dim() == 1 { "x" } else { "x,z" });
    out.push_str(",region,hazard_ratio,std_err_ratio\n");
    let (vc, vu) = (c.psi_plus.diagonal(), u.psi_plus.diagonal());
    for (k, (x, z)) in grid.coords().into_iter().enumerate() {
        let mut row = vec![x.to_string()];
        if let Some(z) = z {
            row.push(z.to_string());
        }
        row.push(if initial[k] { "initial" } else { "extrapolated" }.into());
        row.push(fmt_real((u.y_plus[k] - c.y_plus[k]).exp()));
        row.push(fmt_real((vu[k].max(0.0) / vc[k].max(0.0)).sqrt()));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn max_threads() -> Result<usize> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("WH_MAX_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(available)),
            _ => Err(WhError::InvalidParameter(format!("WH_MAX_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(available),
    }
}

pub fn run_replicate(args: &ReplicateArgs) -> Result<()> {
    let experiment: Experiment = args.experiment.parse()?;
    if args.n == 0 {
        return Err(WhError::InvalidParameter("--n must be at least 1".into()));
    }
    let threads = max_threads()?;
    let plan = ExperimentPlan::new(experiment, args.n, args.seed);
    eprintln!(
        "{experiment}: {} scenario(s) x {} replicate(s) on {threads} thread(s)",
        plan.scenarios.len(),
        args.n
    );
    let progress = |p: &Progress| match p.error {
        None => eprintln!("[{}/{}] {} replicate {} done", p.done, p.total, p.scenario, p.replicate),
        Some(e) => eprintln!("[{}/{}] {} replicate {} failed: {e}", p.done, p.total, p.scenario, p.replicate),
    };
    let report = replicate_experiment_with_progress(&plan, threads, &progress)?;
    let mut metrics = Vec::new();
    report.write_metrics(&mut metrics)?;
    write_artifact(&args.out, "metrics.csv", metrics)?;
    let mut timings = Vec::new();
    report.write_timings(&mut timings)?;
    write_artifact(&args.out, "timings.csv", timings)?;
    let mut summary = Vec::new();
    report.write_summary(&mut summary, "timings.csv")?;
    summary.push(b'\n');
    write_artifact(&args.out, "summary.json", summary)?;
    if !report.failures.is_empty() {
        eprintln!("warning: {} replicate(s) failed, see summary.json", report.failures.len());
    }
    Ok(())
}

pub fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let scenario = match args.scenario {
        ScenarioName::OneD => Scenario::one_d("1d", args.m.unwrap_or(25_000)),
        ScenarioName::OneDWide => Scenario::one_d_wide("1d-wide", args.m.unwrap_or(30_000)),
        ScenarioName::TwoD => Scenario::two_d("2d", args.m.unwrap_or(10_000)),
    };
    let mut cfg = scenario.sim.clone();
    cfg.seed = args.seed;
    let records = simulate(&cfg, &scenario.law)?;
    let mut buf = Vec::new();
    write_records(&records, cfg.dim(), &mut buf)?;
    write_artifact(&args.out, "records.csv", buf)?;

    let truth = scenario.law.true_log_hazard(&scenario.grid);
    let mut out = String::from(if scenario.grid.dim() == 1 { "x,log_hazard\n" } else { "x,z,log_hazard\n" });
    for (k, (x, z)) in scenario.grid.coords().into_iter().enumerate() {
        match z {
            Some(z) => out.push_str(&format!("{x},{z},{}\n", fmt_real(truth[k]))),
            None => out.push_str(&format!("{x},{}\n", fmt_real(truth[k]))),
        }
    }
    write_artifact(&args.out, "truth.csv", out)
}
