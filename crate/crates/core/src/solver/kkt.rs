//! Multiplier recovery and KKT residuals at a computed solution.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{self, serde_rows, Mat};
use crate::model::{d_bounds, ProblemInstance};
use crate::objective::Prepared;

use super::BTSolution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `||G_k - lambda C_1^2 - Psi_k||_2` per agent.
    pub stationarity: Vec<f64>,
    /// `||B_k Psi_k||_2` per agent.
    pub slackness: Vec<f64>,
    /// `|lambda (tr C_1 - d)|`.
    pub trace_gap: f64,
    /// `|tr C_1 - d|`.
    pub trace_activity: f64,
    /// Smallest eigenvalue of each `Psi_k`.
    pub psi_min_eig: Vec<f64>,
}

impl KktResiduals {
    /// Largest violation across all conditions, including negative curvature of `Psi`.
    pub fn max_residual(&self) -> f64 {
        let worst = |v: &[f64]| v.iter().cloned().fold(0.0f64, f64::max);
        let neg = self.psi_min_eig.iter().map(|&e| (-e).max(0.0)).fold(0.0, f64::max);
        worst(&self.stationarity)
            .max(worst(&self.slackness))
            .max(self.trace_gap)
            .max(self.trace_activity)
            .max(neg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KKTCertificate {
    pub lambda: f64,
    #[serde(with = "serde_rows::list")]
    pub psi: Vec<Mat>,
    pub residuals: KktResiduals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KKTReport {
    pub tol: f64,
    pub lambda: f64,
    /// `G_k - lambda C_1^2 - Psi_k = 0`.
    pub stationarity: bool,
    /// `B_k Psi_k = 0`.
    pub slackness: bool,
    /// `lambda (tr C_1 - d) = 0`.
    pub complementary_trace: bool,
    /// `Psi_k >= 0`, `lambda >= 0`.
    pub dual_feasibility: bool,
    /// `tr C_1 = d` with `lambda > 0`, required whenever `d` lies inside the window.
    pub trace_active: bool,
    pub residuals: KktResiduals,
    pub max_residual: f64,
    pub pass: bool,
}

/// Recovers `lambda` and `Psi_k` from the gradient at the solution.
///
/// On `range(B_k)` the multiplier `Psi_k` vanishes, so `G_k = lambda C_1^2` there.
/// `lambda` is the least-squares fit of that identity over all agents, with each
/// agent's fit restricted to its range through the weights `B_k^{1/2}`.
pub fn recover_multipliers(inst: &ProblemInstance, sol: &BTSolution) -> Result<KKTCertificate> {
    let prep = Prepared::new(inst)?;
    let eval = prep.evaluate(&sol.point)?;
    let c1 = &eval.chain.c[0];
    let c1sq = linalg::sym(&(c1 * c1));
    let lambda = super::refine::fit_multiplier(&sol.point, &eval);
    let psi: Vec<Mat> = eval
        .gradient
        .iter()
        .map(|g| linalg::sym(&(g - &c1sq * lambda)))
        .collect();
    let residuals = residuals_at(inst, &prep, sol, lambda, &psi)?;
    Ok(KKTCertificate {
        lambda,
        psi,
        residuals,
    })
}

fn residuals_at(
    inst: &ProblemInstance,
    prep: &Prepared,
    sol: &BTSolution,
    lambda: f64,
    psi: &[Mat],
) -> Result<KktResiduals> {
    let eval = prep.evaluate(&sol.point)?;
    let c1 = &eval.chain.c[0];
    let c1sq = c1 * c1;
    let h = c1.trace() - inst.d;
    let stationarity = eval
        .gradient
        .iter()
        .zip(psi)
        .map(|(g, p)| linalg::spectral_norm(&(g - &c1sq * lambda - p)))
        .collect();
    let slackness = sol
        .point
        .b
        .iter()
        .zip(psi)
        .map(|(b, p)| linalg::spectral_norm(&(b * p)))
        .collect();
    Ok(KktResiduals {
        stationarity,
        slackness,
        trace_gap: (lambda * h).abs(),
        trace_activity: h.abs(),
        psi_min_eig: psi.iter().map(linalg::min_eigenvalue).collect(),
    })
}

/// Evaluates every KKT condition for `(sol, cert)` against an absolute tolerance.
pub fn check_kkt(
    inst: &ProblemInstance,
    sol: &BTSolution,
    cert: &KKTCertificate,
    tol: f64,
) -> Result<KKTReport> {
    let prep = Prepared::new(inst)?;
    let r = residuals_at(inst, &prep, sol, cert.lambda, &cert.psi)?;
    let all_le = |v: &[f64]| v.iter().all(|&x| x <= tol);

    let stationarity = all_le(&r.stationarity);
    let slackness = all_le(&r.slackness);
    let complementary_trace = r.trace_gap <= tol;
    let dual_feasibility = cert.lambda >= 0.0 && r.psi_min_eig.iter().all(|&e| e >= -tol);
    let inside = d_bounds(inst)
        .map(|(lo, hi)| inst.d > lo && inst.d < hi)
        .unwrap_or(false);
    let trace_active = !inside || (r.trace_activity <= tol && cert.lambda > tol);

    let max_residual = r.max_residual();
    Ok(KKTReport {
        tol,
        lambda: cert.lambda,
        stationarity,
        slackness,
        complementary_trace,
        dual_feasibility,
        trace_active,
        pass: stationarity && slackness && complementary_trace && dual_feasibility && trace_active,
        residuals: r,
        max_residual,
    })
}
