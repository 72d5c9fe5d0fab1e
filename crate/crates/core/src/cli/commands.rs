use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extremal::{
    matched_channel, verify_extremal, verify_monotone, verify_proof_chain, weighted_sum_lower_bound, ChainReport,
    ExtremalReport, GaussianTestChannel, PathReport,
};
use crate::fisher::{run_lemma_suite, LemmaSuiteReport};
use crate::model::{d_bounds, validate, ProblemInstance};
use crate::solver::{
    check_kkt, oracle_grid, recover_multipliers, solve_bt, BTSolution, KKTCertificate, KKTReport, SolveStatus,
    SolverOptions,
};
use crate::spectral::{decompose, verify_theorem2, SpectralDecomposition, SpectralReport};

use super::output::{csv_text, emit, emit_json, nats_to_bits, num, Format};
use super::{Command, OutputArgs, SolveArgs, SweepVar, EXIT_FAILURE, EXIT_INPUT, EXIT_PASS};

/// Gamma values at which the bound chain is evaluated.
pub const CHAIN_GAMMAS: [f64; 3] = [0.25, 0.5, 0.75];

pub fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Solve { instance, solve, output } => cmd_solve(&instance, &solve, &output),
        Command::Sweep {
            instance,
            var,
            lo,
            hi,
            steps,
            json,
            solve,
            output,
        } => cmd_sweep(&instance, var, lo, hi, steps, json.as_deref(), &solve, &output),
        Command::Kkt {
            instance,
            solution,
            check_tol,
            solve,
            output,
        } => cmd_kkt(&instance, solution.as_deref(), check_tol, &solve, &output),
        Command::Decompose {
            instance,
            solution,
            check_tol,
            solve,
            output,
        } => cmd_decompose(&instance, solution.as_deref(), check_tol, &solve, &output),
        Command::VerifyExtremal {
            instance,
            solution,
            channel,
            grid,
            path_csv,
            solve,
            output,
        } => cmd_verify_extremal(
            &instance,
            solution.as_deref(),
            channel.as_deref(),
            grid,
            path_csv.as_deref(),
            &solve,
            &output,
        ),
        Command::Lemmas { draws, seed, output } => cmd_lemmas(draws, seed, &output),
        Command::Pipeline {
            instance,
            check_tol,
            grid,
            solve,
            output,
        } => cmd_pipeline(&instance, check_tol, grid, &solve, &output),
    }
}

/// Reads and validates an instance; validation failures go to standard error.
fn load_instance(path: &Path) -> Result<std::result::Result<ProblemInstance, i32>> {
    let text = std::fs::read_to_string(path)?;
    let inst = ProblemInstance::from_json(&text)?;
    let report = validate(&inst);
    if !report.ok {
        eprintln!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(Err(EXIT_INPUT));
    }
    Ok(Ok(inst))
}

macro_rules! instance_or_exit {
    ($path:expr) => {
        match load_instance($path)? {
            Ok(inst) => inst,
            Err(code) => return Ok(code),
        }
    };
}

fn options(args: &SolveArgs) -> SolverOptions {
    SolverOptions {
        starts: args.starts,
        tol: args.tol,
        max_iters: args.max_iters,
        seed: args.seed,
        oracle_resolution: args.oracle_resolution,
    }
}

fn run_solver(inst: &ProblemInstance, args: &SolveArgs) -> Result<BTSolution> {
    if args.oracle {
        oracle_grid(inst, args.oracle_resolution)
    } else {
        solve_bt(inst, &options(args))
    }
}

/// A solution from file, or a fresh solve.
fn obtain_solution(inst: &ProblemInstance, file: Option<&Path>, args: &SolveArgs) -> Result<BTSolution> {
    match file {
        Some(path) => {
            let sol: BTSolution = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            if sol.point.len() != inst.l || !sol.point.is_valid_for(inst, 1e-9) {
                return Err(Error::InvalidInput("solution does not fit the instance".into()));
            }
            Ok(sol)
        }
        None => run_solver(inst, args),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOutput {
    #[serde(flatten)]
    pub solution: BTSolution,
    pub rate_nats: f64,
    pub rate_bits: f64,
    pub trace_c1: f64,
}

impl SolveOutput {
    pub fn new(solution: BTSolution) -> Self {
        SolveOutput {
            rate_nats: solution.rate,
            rate_bits: nats_to_bits(solution.rate),
            trace_c1: solution.trace_mse(),
            solution,
        }
    }
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "Converged",
        SolveStatus::MaxIterations => "MaxIterations",
        SolveStatus::OracleExact => "OracleExact",
    }
}

fn cmd_solve(path: &Path, args: &SolveArgs, out: &OutputArgs) -> Result<i32> {
    let inst = instance_or_exit!(path);
    let (sol, code) = match run_solver(&inst, args) {
        Ok(sol) => (sol, EXIT_PASS),
        Err(Error::NonConvergence(sol)) => {
            eprintln!("error: solver did not converge");
            (*sol, EXIT_FAILURE)
        }
        Err(e) => return Err(e),
    };
    let report = SolveOutput::new(sol);
    match out.format {
        Format::Json => emit_json(out.out.as_deref(), &report)?,
        Format::Csv => {
            let rate = if out.bits { report.rate_bits } else { report.rate_nats };
            let unit = if out.bits { "rate_bits" } else { "rate_nats" };
            let text = csv_text(
                &[unit, "trace_mse", "status", "starts_used", "seed"],
                &[vec![
                    num(rate),
                    num(report.trace_c1),
                    status_name(report.solution.status).into(),
                    report.solution.starts_used.to_string(),
                    report.solution.seed.to_string(),
                ]],
            )?;
            emit(out.out.as_deref(), &text)?;
        }
    }
    Ok(code)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub status: String,
    pub rate_nats: f64,
    pub rate_bits: f64,
    pub trace_mse: f64,
    pub kkt_max_residual: f64,
    pub solution: Option<BTSolution>,
}

/// Weights on the segment from the instance weights to equal weights.
pub fn mu_on_ray(mu: &[f64], t: f64) -> Vec<f64> {
    mu.iter().map(|&w| (1.0 - t) * w + t).collect()
}

fn sweep_point(inst: &ProblemInstance, var: SweepVar, value: f64, args: &SolveArgs) -> SweepRow {
    let point = match var {
        SweepVar::D => inst.with_d(value),
        SweepVar::MuRay => ProblemInstance {
            mu: mu_on_ray(&inst.mu, value),
            ..inst.clone()
        },
    };
    let failed = |status: String| SweepRow {
        value,
        status,
        rate_nats: f64::NAN,
        rate_bits: f64::NAN,
        trace_mse: f64::NAN,
        kkt_max_residual: f64::NAN,
        solution: None,
    };
    let sol = match run_solver(&point, args) {
        Ok(sol) => sol,
        Err(Error::NonConvergence(_)) => return failed("NonConvergence".into()),
        Err(e) => return failed(format!("error: {e}")),
    };
    let residual = recover_multipliers(&point, &sol)
        .map(|c| c.residuals.max_residual())
        .unwrap_or(f64::NAN);
    SweepRow {
        value,
        status: status_name(sol.status).into(),
        rate_nats: sol.rate,
        rate_bits: nats_to_bits(sol.rate),
        trace_mse: sol.trace_mse(),
        kkt_max_residual: residual,
        solution: Some(sol),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    path: &Path,
    var: SweepVar,
    lo: f64,
    hi: f64,
    steps: usize,
    json: Option<&Path>,
    args: &SolveArgs,
    out: &OutputArgs,
) -> Result<i32> {
    let inst = instance_or_exit!(path);
    if !(lo < hi) || steps < 2 {
        eprintln!("error: sweep needs lo < hi and at least 2 steps");
        return Ok(EXIT_INPUT);
    }
    match var {
        SweepVar::D => {
            let (d_min, d_max) = d_bounds(&inst)?;
            if lo <= d_min || hi >= d_max {
                eprintln!("error: swept d range [{lo}, {hi}] leaves the d window ({d_min}, {d_max})");
                return Ok(EXIT_INPUT);
            }
        }
        SweepVar::MuRay => {
            if lo < 0.0 || hi > 1.0 {
                eprintln!("error: the weight ray parameter must lie in [0, 1]");
                return Ok(EXIT_INPUT);
            }
        }
    }
    let values: Vec<f64> = (0..steps)
        .map(|k| lo + (hi - lo) * k as f64 / (steps - 1) as f64)
        .collect();
    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|&v| sweep_point(&inst, var, v, args))
        .collect();

    let column = match var {
        SweepVar::D => "d",
        SweepVar::MuRay => "t",
    };
    match out.format {
        Format::Csv => {
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        num(r.value),
                        num(r.rate_nats),
                        num(r.rate_bits),
                        num(r.trace_mse),
                        num(r.kkt_max_residual),
                        r.status.clone(),
                    ]
                })
                .collect();
            let text = csv_text(
                &[column, "rate_nats", "rate_bits", "trace_mse", "kkt_max_residual", "status"],
                &table,
            )?;
            emit(out.out.as_deref(), &text)?;
        }
        Format::Json => emit_json(out.out.as_deref(), &rows)?,
    }
    if let Some(p) = json {
        emit_json(Some(p), &rows)?;
    }
    let ok = rows.iter().all(|r| r.solution.is_some());
    Ok(if ok { EXIT_PASS } else { EXIT_FAILURE })
}

fn cmd_kkt(path: &Path, file: Option<&Path>, tol: f64, args: &SolveArgs, out: &OutputArgs) -> Result<i32> {
    let inst = instance_or_exit!(path);
    let sol = obtain_solution(&inst, file, args)?;
    let cert = recover_multipliers(&inst, &sol)?;
    let report = check_kkt(&inst, &sol, &cert, tol)?;
    emit_json(out.out.as_deref(), &report)?;
    Ok(if report.pass { EXIT_PASS } else { EXIT_FAILURE })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecomposeOutput {
    /// Set when a split value falls inside the degeneracy band.
    pub flagged: Option<String>,
    pub decomposition: Option<SpectralDecomposition>,
    pub report: Option<SpectralReport>,
}

fn cmd_decompose(path: &Path, file: Option<&Path>, tol: f64, args: &SolveArgs, out: &OutputArgs) -> Result<i32> {
    let inst = instance_or_exit!(path);
    let sol = obtain_solution(&inst, file, args)?;
    let cert = recover_multipliers(&inst, &sol)?;
    let result = match decompose(&inst, &sol, &cert) {
        Ok(d) => {
            let report = verify_theorem2(&inst, &sol, &cert, &d, tol)?;
            DecomposeOutput {
                flagged: None,
                decomposition: Some(d),
                report: Some(report),
            }
        }
        Err(e @ Error::DegenerateSplit { .. }) => DecomposeOutput {
            flagged: Some(e.to_string()),
            decomposition: None,
            report: None,
        },
        Err(e) => return Err(e),
    };
    emit_json(out.out.as_deref(), &result)?;
    let pass = result.report.as_ref().is_none_or(|r| r.pass);
    Ok(if pass { EXIT_PASS } else { EXIT_FAILURE })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtremalOutput {
    pub channel: GaussianTestChannel,
    pub extremal: ExtremalReport,
    pub path: PathSummary,
    pub chain: Vec<ChainReport>,
    pub weighted_sum_lower_bound: f64,
    pub rate: f64,
    pub pass: bool,
}

/// Path report without the sampled values, which go to CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathSummary {
    pub points: usize,
    pub max_forward_increase: f64,
    pub g0_minus_g1: f64,
    pub monotone: bool,
    pub endpoints_ordered: bool,
    pub pass: bool,
}

impl From<&PathReport> for PathSummary {
    fn from(r: &PathReport) -> Self {
        PathSummary {
            points: r.gamma.len(),
            max_forward_increase: r.max_forward_increase,
            g0_minus_g1: r.g0_minus_g1,
            monotone: r.monotone,
            endpoints_ordered: r.endpoints_ordered,
            pass: r.pass,
        }
    }
}

fn path_csv(report: &PathReport) -> Result<String> {
    let rows: Vec<Vec<String>> = report
        .gamma
        .iter()
        .zip(&report.g)
        .map(|(g, v)| vec![num(*g), num(*v)])
        .collect();
    csv_text(&["gamma", "g_nats"], &rows)
}

fn extremal_suite(
    inst: &ProblemInstance,
    sol: &BTSolution,
    cert: &KKTCertificate,
    decomp: &SpectralDecomposition,
    channel: GaussianTestChannel,
    grid: usize,
) -> Result<(ExtremalOutput, PathReport)> {
    let path = verify_monotone(inst, sol, decomp, &channel, grid)?;
    let extremal = verify_extremal(inst, sol, &channel)?;
    let chain = CHAIN_GAMMAS
        .iter()
        .map(|&g| verify_proof_chain(inst, sol, cert, decomp, &channel, g))
        .collect::<Result<Vec<_>>>()?;
    let bound = weighted_sum_lower_bound(inst, &channel)?;
    let pass = path.pass && extremal.pass && chain.iter().all(|c| c.pass);
    Ok((
        ExtremalOutput {
            channel,
            extremal,
            path: PathSummary::from(&path),
            chain,
            weighted_sum_lower_bound: bound,
            rate: sol.rate,
            pass,
        },
        path,
    ))
}

fn cmd_verify_extremal(
    path: &Path,
    file: Option<&Path>,
    channel_file: Option<&Path>,
    grid: usize,
    csv_out: Option<&Path>,
    args: &SolveArgs,
    out: &OutputArgs,
) -> Result<i32> {
    let inst = instance_or_exit!(path);
    if grid < 2 {
        eprintln!("error: --grid needs at least 2 points");
        return Ok(EXIT_INPUT);
    }
    let sol = obtain_solution(&inst, file, args)?;
    let cert = recover_multipliers(&inst, &sol)?;
    let decomp = decompose(&inst, &sol, &cert)?;
    let channel = match channel_file {
        Some(p) => {
            let ch = GaussianTestChannel::from_json(&std::fs::read_to_string(p)?)?;
            ch.check(&inst)?;
            ch
        }
        None => matched_channel(&inst, &sol)?,
    };
    let (report, path_report) = extremal_suite(&inst, &sol, &cert, &decomp, channel, grid)?;
    match out.format {
        Format::Json => emit_json(out.out.as_deref(), &report)?,
        Format::Csv => emit(out.out.as_deref(), &path_csv(&path_report)?)?,
    }
    if let Some(p) = csv_out {
        emit(Some(p), &path_csv(&path_report)?)?;
    }
    Ok(if report.pass { EXIT_PASS } else { EXIT_FAILURE })
}

fn cmd_lemmas(draws: usize, seed: u64, out: &OutputArgs) -> Result<i32> {
    if draws == 0 {
        eprintln!("error: --draws must be positive");
        return Ok(EXIT_INPUT);
    }
    let report: LemmaSuiteReport = run_lemma_suite(seed, draws)?;
    match out.format {
        Format::Json => emit_json(out.out.as_deref(), &report)?,
        Format::Csv => {
            let rows: Vec<Vec<String>> = report
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.lemma.clone(),
                        r.draws.to_string(),
                        num(r.worst),
                        num(r.tolerance),
                        r.pass.to_string(),
                    ]
                })
                .collect();
            emit(
                out.out.as_deref(),
                &csv_text(&["check", "draws", "worst", "tolerance", "pass"], &rows)?,
            )?;
        }
    }
    Ok(if report.pass { EXIT_PASS } else { EXIT_FAILURE })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineReport {
    /// Stages that ran, in order.
    pub stages: Vec<String>,
    /// The first stage that failed, if any.
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub solution: Option<SolveOutput>,
    pub kkt: Option<KKTReport>,
    pub decomposition: Option<SpectralDecomposition>,
    pub structure: Option<SpectralReport>,
    /// `W_i` that are empty, 1-based.
    pub empty_w: Vec<usize>,
    pub extremal: Option<ExtremalOutput>,
    pub pass: bool,
}

impl PipelineReport {
    fn fail(&mut self, stage: &str, err: Option<String>) {
        self.failed_stage = Some(stage.to_string());
        self.error = err;
    }
}

fn cmd_pipeline(path: &Path, tol: f64, grid: usize, args: &SolveArgs, out: &OutputArgs) -> Result<i32> {
    let inst = instance_or_exit!(path);
    let mut rep = PipelineReport::default();
    run_pipeline(&inst, tol, grid, args, &mut rep);
    if let Some(stage) = &rep.failed_stage {
        eprintln!("pipeline stopped at stage `{stage}`");
    }
    emit_json(out.out.as_deref(), &rep)?;
    Ok(if rep.pass { EXIT_PASS } else { EXIT_FAILURE })
}

fn run_pipeline(inst: &ProblemInstance, tol: f64, grid: usize, args: &SolveArgs, rep: &mut PipelineReport) {
    rep.stages.push("solve".into());
    let sol = match run_solver(inst, args) {
        Ok(s) => s,
        Err(e) => return rep.fail("solve", Some(e.to_string())),
    };
    rep.solution = Some(SolveOutput::new(sol.clone()));

    rep.stages.push("kkt".into());
    let cert = match recover_multipliers(inst, &sol) {
        Ok(c) => c,
        Err(e) => return rep.fail("kkt", Some(e.to_string())),
    };
    match check_kkt(inst, &sol, &cert, tol) {
        Ok(k) => {
            let pass = k.pass;
            rep.kkt = Some(k);
            if !pass {
                return rep.fail("kkt", None);
            }
        }
        Err(e) => return rep.fail("kkt", Some(e.to_string())),
    }

    rep.stages.push("decompose".into());
    let decomp = match decompose(inst, &sol, &cert) {
        Ok(d) => d,
        Err(e) => return rep.fail("decompose", Some(e.to_string())),
    };
    rep.empty_w = decomp
        .w
        .iter()
        .enumerate()
        .filter(|(_, w)| w.ncols() == 0)
        .map(|(i, _)| i + 1)
        .collect();
    rep.decomposition = Some(decomp.clone());

    rep.stages.push("structure".into());
    match verify_theorem2(inst, &sol, &cert, &decomp, tol) {
        Ok(s) => {
            let pass = s.pass;
            rep.structure = Some(s);
            if !pass {
                return rep.fail("structure", None);
            }
        }
        Err(e) => return rep.fail("structure", Some(e.to_string())),
    }

    rep.stages.push("extremal".into());
    let outcome = matched_channel(inst, &sol)
        .and_then(|ch| extremal_suite(inst, &sol, &cert, &decomp, ch, grid));
    match outcome {
        Ok((ext, _)) => {
            let pass = ext.pass;
            rep.extremal = Some(ext);
            if !pass {
                return rep.fail("extremal", None);
            }
        }
        Err(e) => return rep.fail("extremal", Some(e.to_string())),
    }
    rep.pass = true;
}
