//! Minimization of the Berger-Tung objective under the trace constraint.
//!
//! The problem is non-convex, so each start runs an augmented-Lagrangian loop
//! on `tr(C_1) <= d` whose inner problems are solved by projected gradient
//! (eigenvalue clipping onto the PSD cone, Barzilai-Borwein step lengths,
//! nonmonotone Armijo backtracking). Iterates are retracted away from the
//! `B_i = Sigma_i^-1` boundary where the objective diverges. A final polish
//! rescales the point onto `tr(C_1) = d`.

mod kkt;
mod oracle;
mod refine;

pub use kkt::{check_kkt, recover_multipliers, KKTCertificate, KKTReport, KktResiduals};
pub use oracle::{grid_lipschitz_bound, oracle_grid, ORACLE_BUDGET};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::{validate, ProblemInstance};
use crate::objective::{BTPoint, Evaluation, MseChain, Prepared};

/// Smallest allowed `lambda_min / lambda_max` of `Sigma_i^-1 - B_i`.
pub const BOUNDARY_GUARD: f64 = 1e-9;
pub const DEFAULT_SEED: u64 = 0x5eed_ce0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    OracleExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub starts: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub oracle_resolution: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            starts: 16,
            tol: 1e-8,
            max_iters: 5000,
            seed: DEFAULT_SEED,
            oracle_resolution: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BTSolution {
    pub point: BTPoint,
    /// Objective value in nats.
    pub rate: f64,
    pub chain: MseChain,
    pub status: SolveStatus,
    pub starts_used: usize,
    pub seed: u64,
    /// Projected-gradient norm of the Lagrangian at the returned point.
    pub pg_norm: f64,
    pub iterations: usize,
}

impl BTSolution {
    pub fn trace_mse(&self) -> f64 {
        self.chain.c[0].trace()
    }

    /// Rebuilds rate and chain for `point`.
    pub fn from_point(
        inst: &ProblemInstance,
        point: BTPoint,
        status: SolveStatus,
    ) -> Result<Self> {
        let prep = Prepared::new(inst)?;
        let eval = prep.evaluate(&point)?;
        Ok(BTSolution {
            point,
            rate: eval.value,
            chain: eval.chain,
            status,
            starts_used: 0,
            seed: 0,
            pg_norm: f64::NAN,
            iterations: 0,
        })
    }
}

struct StartOutcome {
    point: BTPoint,
    eval: Evaluation,
    converged: bool,
    pg_norm: f64,
    iterations: usize,
}

/// Runs every start and keeps the best feasible stationary point.
pub fn solve_bt(inst: &ProblemInstance, options: &SolverOptions) -> Result<BTSolution> {
    let report = validate(inst);
    if !report.ok {
        let msgs: Vec<_> = report.violations.iter().map(|v| v.message.clone()).collect();
        return Err(Error::InvalidInput(msgs.join("; ")));
    }
    let prep = Prepared::new(inst)?;
    let starts = initial_points(&prep, options.starts.max(1), options.seed);
    let feas_tol = feasibility_tol(inst, options.tol);

    let outcomes: Vec<Option<StartOutcome>> = starts
        .into_par_iter()
        .map(|b0| run_start(&prep, b0, options).ok())
        .collect();

    let mut best: Option<StartOutcome> = None;
    for out in outcomes.into_iter().flatten() {
        if out.eval.trace_mse() > inst.d + feas_tol {
            continue;
        }
        best = match best {
            None => Some(out),
            Some(cur) => Some(if better(&out, &cur) { out } else { cur }),
        };
    }
    let best = best.ok_or_else(|| {
        Error::Infeasible("no start reached tr(C_1) <= d".into())
    })?;

    let solution = BTSolution {
        rate: best.eval.value,
        chain: best.eval.chain,
        point: best.point,
        status: if best.converged {
            SolveStatus::Converged
        } else {
            SolveStatus::MaxIterations
        },
        starts_used: options.starts.max(1),
        seed: options.seed,
        pg_norm: best.pg_norm,
        iterations: best.iterations,
    };
    if best.converged {
        Ok(solution)
    } else {
        Err(Error::NonConvergence(Box::new(solution)))
    }
}

/// Converged beats unconverged, then lower rate, then lexicographic `B`.
fn better(a: &StartOutcome, b: &StartOutcome) -> bool {
    if a.converged != b.converged {
        return a.converged;
    }
    match a.eval.value.total_cmp(&b.eval.value) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let (fa, fb) = (a.point.flatten(), b.point.flatten());
            for (x, y) in fa.iter().zip(&fb) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Less => return true,
                    std::cmp::Ordering::Greater => return false,
                    std::cmp::Ordering::Equal => {}
                }
            }
            false
        }
    }
}

fn feasibility_tol(inst: &ProblemInstance, tol: f64) -> f64 {
    tol * inst.d.max(1.0)
}

/// `B_i = t Sigma_i^-1` for evenly spaced `t`, then random PSD draws inside the box.
fn initial_points(prep: &Prepared, count: usize, seed: u64) -> Vec<BTPoint> {
    let ladder = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let mut points = Vec::with_capacity(count);
    let n_ladder = count.min(ladder.len());
    for j in 0..n_ladder {
        let idx = if n_ladder == ladder.len() {
            j
        } else {
            ((j + 1) * ladder.len()) / (n_ladder + 1)
        };
        let t = ladder[idx.min(ladder.len() - 1)];
        points.push(BTPoint {
            b: prep.sigma_inv.iter().map(|p| p * t).collect(),
        });
    }
    for j in n_ladder..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(j as u64));
        let b = prep
            .sigma_inv
            .iter()
            .map(|p| {
                let root = linalg::psd_sqrt(p);
                let w = random_contraction(&mut rng, p.nrows());
                linalg::sym(&(&root * w * &root))
            })
            .collect();
        points.push(BTPoint { b });
    }
    points
}

/// Random symmetric matrix with eigenvalues in `[0, 0.95)`.
fn random_contraction(rng: &mut ChaCha8Rng, m: usize) -> Mat {
    let g = Mat::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let mut out = Mat::zeros(m, m);
    for k in 0..m {
        let lam: f64 = rng.random::<f64>() * 0.95;
        let v = q.column(k);
        out += lam * &v * v.transpose();
    }
    out
}

/// Whether every `Sigma_i^-1 - B_i` stays inside the strict-boundary guard.
fn inside_guard(prep: &Prepared, point: &BTPoint) -> bool {
    point.b.iter().zip(&prep.sigma_inv).all(|(b, p)| {
        let gap = p - b;
        let (vals, _) = linalg::sym_eigen_desc(&gap);
        let (max, min) = (vals[0], vals[vals.len() - 1]);
        max > 0.0 && min >= BOUNDARY_GUARD * max
    })
}

fn project(point: &BTPoint) -> BTPoint {
    BTPoint {
        b: point.b.iter().map(linalg::project_psd).collect(),
    }
}

fn axpy(x: &BTPoint, t: f64, d: &[Mat]) -> BTPoint {
    BTPoint {
        b: x.b.iter().zip(d).map(|(b, d)| b + d * t).collect(),
    }
}

fn dot(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| linalg::frob_dot(x, y)).sum()
}

fn norm(a: &[Mat]) -> f64 {
    dot(a, a).sqrt()
}

fn diff(a: &BTPoint, b: &BTPoint) -> Vec<Mat> {
    a.b.iter().zip(&b.b).map(|(x, y)| x - y).collect()
}

/// Lagrangian gradient `dF/dB_k - lambda * d tr(C_1)/dB_k = G_k + lambda C_1^2`... with sign
/// conventions folded in: the constraint gradient is `-C_1^2`.
fn lagrangian_gradient(eval: &Evaluation, multiplier: f64) -> Vec<Mat> {
    let c1 = &eval.chain.c[0];
    let c1sq = c1 * c1;
    eval.gradient.iter().map(|g| g - &c1sq * multiplier).collect()
}

fn pg_norm(point: &BTPoint, grad: &[Mat]) -> f64 {
    let trial = project(&axpy(point, -1.0, grad));
    norm(&diff(&trial, point))
}

/// Augmented-Lagrangian merit for `tr(C_1) - d <= 0`.
struct Merit<'p, 'a> {
    prep: &'p Prepared<'a>,
    lambda: f64,
    rho: f64,
}

impl Merit<'_, '_> {
    fn value_grad(&self, point: &BTPoint) -> Result<(f64, Vec<Mat>, Evaluation)> {
        if !inside_guard(self.prep, point) {
            return Err(Error::BoundaryDivergence { agent: 0 });
        }
        let eval = self.prep.evaluate(point)?;
        let h = eval.trace_mse() - self.prep.inst.d;
        let shifted = (self.lambda + self.rho * h).max(0.0);
        let value = eval.value
            + (shifted * shifted - self.lambda * self.lambda) / (2.0 * self.rho);
        let grad = lagrangian_gradient(&eval, shifted);
        Ok((value, grad, eval))
    }
}

struct InnerResult {
    point: BTPoint,
    eval: Evaluation,
    iterations: usize,
}

/// Nonmonotone spectral projected gradient on the merit function.
fn spg(merit: &Merit, x0: BTPoint, eps: f64, max_iters: usize) -> Result<InnerResult> {
    const MEMORY: usize = 10;
    const ARMIJO: f64 = 1e-4;
    const ALPHA_MIN: f64 = 1e-12;
    const ALPHA_MAX: f64 = 1e12;

    let mut x = x0;
    let (mut fx, mut g, mut eval) = merit.value_grad(&x)?;
    let mut history = vec![fx];
    let pg0 = pg_norm(&x, &g);
    let mut alpha = if pg0 > 0.0 { (1.0 / pg0).clamp(ALPHA_MIN, 1.0) } else { 1.0 };
    let mut iterations = 0;

    while iterations < max_iters {
        if pg_norm(&x, &g) <= eps {
            break;
        }
        iterations += 1;
        let target = project(&axpy(&x, -alpha, &g));
        let dir = diff(&target, &x);
        let gd = dot(&g, &dir);
        if !(gd < 0.0) {
            // Not a descent direction at this step length; fall back to a short step.
            alpha = (alpha * 0.1).max(ALPHA_MIN);
            continue;
        }
        let reference = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut theta = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let trial = axpy(&x, theta, &dir);
            if let Ok((ft, gt, et)) = merit.value_grad(&trial) {
                if ft <= reference + ARMIJO * theta * gd {
                    accepted = Some((trial, ft, gt, et));
                    break;
                }
            }
            theta *= 0.5;
        }
        let Some((xn, fn_, gn, en)) = accepted else {
            break;
        };
        let s = diff(&xn, &x);
        let y: Vec<Mat> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        alpha = if sy > 0.0 {
            (dot(&s, &s) / sy).clamp(ALPHA_MIN, ALPHA_MAX)
        } else {
            ALPHA_MAX.min(alpha * 10.0)
        };
        x = xn;
        fx = fn_;
        g = gn;
        eval = en;
        history.push(fx);
        if history.len() > MEMORY {
            history.remove(0);
        }
    }
    Ok(InnerResult {
        point: x,
        eval,
        iterations,
    })
}

/// Pulls a start strictly inside the `B <= Sigma^-1` boundary guard.
fn retract(prep: &Prepared, mut point: BTPoint) -> BTPoint {
    point = project(&point);
    let mut shrink = 1.0;
    while !inside_guard(prep, &point) && shrink > 1e-6 {
        shrink *= 0.5;
        point.b.iter_mut().for_each(|b| *b *= 0.5);
    }
    point
}

struct AlState {
    lambda: f64,
    rho: f64,
    eps: f64,
    prev_h: f64,
}

/// Augmented-Lagrangian outer loop until the Lagrangian projected gradient falls below `target`.
fn al_phase(
    prep: &Prepared,
    x: &mut BTPoint,
    state: &mut AlState,
    target: f64,
    max_iters: usize,
    iterations: &mut usize,
) -> Result<()> {
    const MAX_OUTER: usize = 60;
    let d = prep.inst.d;
    let feas = target * d.max(1.0);
    for _ in 0..MAX_OUTER {
        let budget = max_iters.saturating_sub(*iterations);
        if budget == 0 {
            break;
        }
        let merit = Merit {
            prep,
            lambda: state.lambda,
            rho: state.rho,
        };
        let inner = spg(&merit, x.clone(), state.eps, budget)?;
        *iterations += inner.iterations;
        *x = inner.point;
        let h = inner.eval.trace_mse() - d;
        let next = (state.lambda + state.rho * h).max(0.0);
        let pg = pg_norm(x, &lagrangian_gradient(&inner.eval, next));
        state.lambda = next;
        if pg <= target * (1.0 + inner.eval.value.abs()) && h.abs() <= feas {
            break;
        }
        if h > 0.0 && h.abs() > 0.25 * state.prev_h.abs() {
            state.rho = (state.rho * 10.0).min(1e12);
        }
        state.prev_h = h;
        state.eps = (state.eps * 0.1).max(0.1 * target);
    }
    Ok(())
}

/// Boundary polish followed by local refinement; returns the better of the two points.
fn finish(prep: &Prepared, x: &BTPoint, feas_tol: f64) -> Result<(BTPoint, Evaluation, f64)> {
    let d = prep.inst.d;
    let x = polish_onto_boundary(prep, x.clone());
    let eval = prep.evaluate(&x)?;
    let lambda = refine::fit_multiplier(&x, &eval);
    let pg = pg_norm(&x, &lagrangian_gradient(&eval, lambda));
    if let Some((xr, lr)) = refine::refine(prep, &x, lambda) {
        if let (true, Ok(er)) = (lr >= 0.0, prep.evaluate(&xr)) {
            let lr = refine::fit_multiplier(&xr, &er);
            let pgr = pg_norm(&xr, &lagrangian_gradient(&er, lr));
            let feasible = er.trace_mse() <= d + feas_tol;
            let close = (er.value - eval.value).abs() <= 1e-3 * (1.0 + eval.value.abs());
            if feasible && close && pgr < pg {
                return Ok((xr, er, pgr));
            }
        }
    }
    Ok((x, eval, pg))
}

fn run_start(prep: &Prepared, b0: BTPoint, options: &SolverOptions) -> Result<StartOutcome> {
    let inst = prep.inst;
    let d = inst.d;
    let tol = options.tol;
    let feas_tol = feasibility_tol(inst, tol);

    let mut x = retract(prep, b0);
    let mut state = AlState {
        lambda: 0.0,
        rho: 10.0 * inst.mu[0] / (d * d),
        eps: 1e-2f64.max(tol),
        prev_h: f64::INFINITY,
    };
    let mut iterations = 0;
    // Projected gradient only needs to find the right face; refinement does the rest.
    let mut target = 1e-5f64.max(tol);
    loop {
        al_phase(prep, &mut x, &mut state, target, options.max_iters, &mut iterations)?;
        let (point, eval, pg) = finish(prep, &x, feas_tol)?;
        let h = eval.trace_mse() - d;
        let converged = pg <= tol * (1.0 + eval.value.abs()) && h.abs() <= feas_tol;
        if converged || iterations >= options.max_iters || target <= tol {
            return Ok(StartOutcome {
                point,
                eval,
                converged,
                pg_norm: pg,
                iterations,
            });
        }
        target = (target * 1e-2).max(tol);
    }
}

/// Rescales `B_i -> s B_i` so that `tr(C_1) = d` to working precision.
/// The kernels of every `B_i` are preserved.
pub fn polish_onto_boundary(prep: &Prepared, x: BTPoint) -> BTPoint {
    let d = prep.inst.d;
    let trace_at = |s: f64| -> Option<f64> {
        let scaled = BTPoint {
            b: x.b.iter().map(|b| b * s).collect(),
        };
        if !inside_guard(prep, &scaled) {
            return None;
        }
        prep.chain(&scaled).ok().map(|c| c.c[0].trace())
    };
    let Some(t1) = trace_at(1.0) else { return x };
    if (t1 - d).abs() <= 1e-15 * d || t1 - d > 1e-3 * d || d - t1 > 1e-3 * d {
        return x;
    }
    // tr(C_1) decreases in s; bracket the root and bisect.
    let (mut lo, mut hi) = if t1 > d { (1.0, 1.0 + 1e-3) } else { (1.0 - 1e-3, 1.0) };
    let ok_hi = trace_at(hi).is_some_and(|t| t <= d);
    let ok_lo = trace_at(lo).is_some_and(|t| t >= d);
    if !(ok_hi && ok_lo) {
        return x;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        match trace_at(mid) {
            Some(t) if t > d => lo = mid,
            Some(_) => hi = mid,
            None => return x,
        }
    }
    // Prefer the feasible side of the bracket.
    BTPoint {
        b: x.b.iter().map(|b| b * hi).collect(),
    }
}
