//! The interpolation path `g(gamma)` between an arbitrary channel (`gamma = 0`)
//! and the Berger-Tung Gaussian auxiliaries (`gamma = 1`), and the entropy
//! inequality at its endpoints.
//!
//! With `X_{i,g} = sqrt(1-g) X + sqrt(g) X^G_i`, `X^G_i ~ N(0, C_i)`, and
//! `Y_{i,g} = sqrt(1-g) Y_i + sqrt(g) N^G_i`, `N^G_i ~ N(0, Sigma_i - Sigma_i B_i Sigma_i)`,
//! all auxiliaries independent of the channel, the conditional covariances are
//! `(1-g) cov(X | M_i..M_L) + g C_i` and `(1-g) cov(Y_i | X, M_i) + g S_i`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::gaussian_entropy;
use crate::linalg::{self, Mat};
use crate::model::ProblemInstance;
use crate::objective::Prepared;
use crate::solver::BTSolution;
use crate::spectral::SpectralDecomposition;

use super::channel::{conditional_covariances, require_feasible, ChannelCovariances, GaussianTestChannel};

pub const DEFAULT_GRID: usize = 1001;
/// Largest allowed increase of `g` between consecutive grid points.
pub const MONOTONE_TOL: f64 = 1e-7;
/// Allowed deficit in `g(0) - g(1)` and in the entropy inequality.
pub const ENDPOINT_TOL: f64 = 1e-8;

fn entropy(cov: &Mat, what: &str) -> Result<f64> {
    gaussian_entropy(cov).map_err(|_| Error::DegenerateProjection(what.to_string()))
}

/// Everything `g` needs, precomputed once per (solution, channel).
#[derive(Debug, Clone)]
pub(crate) struct PathContext {
    pub mu: Vec<f64>,
    /// `C_i`.
    pub c: Vec<Mat>,
    /// `S_i = Sigma_i - Sigma_i B_i Sigma_i`.
    pub s: Vec<Mat>,
    pub sigma_inv: Vec<Mat>,
    /// `Sigma_i^-1 - B_i`.
    pub gap: Vec<Mat>,
    /// `(Sigma_i^-1 - B_i)^-1`.
    pub gap_inv: Vec<Mat>,
    pub u: Vec<Mat>,
    pub v: Vec<Mat>,
    pub w: Vec<Mat>,
    pub delta: Vec<Mat>,
    pub cov: ChannelCovariances,
    pub k_inv: Mat,
}

impl PathContext {
    pub fn new(
        inst: &ProblemInstance,
        sol: &BTSolution,
        decomp: &SpectralDecomposition,
        ch: &GaussianTestChannel,
    ) -> Result<Self> {
        let prep = Prepared::new(inst)?;
        let eval = prep.evaluate(&sol.point)?;
        let s = inst
            .sigma
            .iter()
            .zip(&sol.point.b)
            .map(|(s, b)| linalg::sym(&(s - s * b * s)))
            .collect();
        let gap = prep
            .sigma_inv
            .iter()
            .zip(&sol.point.b)
            .map(|(p, b)| linalg::sym(&(p - b)))
            .collect();
        Ok(PathContext {
            mu: inst.mu.clone(),
            c: eval.chain.c,
            s,
            sigma_inv: prep.sigma_inv.clone(),
            gap,
            gap_inv: eval.residual_cov,
            u: decomp.u.clone(),
            v: decomp.v.clone(),
            w: decomp.w.clone(),
            delta: decomp.delta.clone(),
            cov: conditional_covariances(inst, ch)?,
            k_inv: prep.k_inv,
        })
    }

    pub fn l(&self) -> usize {
        self.mu.len()
    }

    /// `cov(X_{i,g} | M_i..M_L)`.
    pub fn x_cov(&self, i: usize, g: f64) -> Mat {
        &self.cov.tail[i] * (1.0 - g) + &self.c[i] * g
    }

    /// `cov(Y_{i,g} | X, M_i)`.
    pub fn y_cov(&self, i: usize, g: f64) -> Mat {
        &self.cov.residual[i] * (1.0 - g) + &self.s[i] * g
    }

    /// `h(X_{i,g} | M_i..M_L)`.
    pub fn h_x(&self, i: usize, g: f64) -> Result<f64> {
        entropy(&self.x_cov(i, g), "cov(X | M)")
    }

    /// `h(U_i^T Sigma_i^-1 Y_{i,g} | X, M_i)`.
    pub fn h_u(&self, i: usize, g: f64) -> Result<f64> {
        let t = self.u[i].transpose() * &self.sigma_inv[i];
        entropy(&linalg::sym(&(&t * self.y_cov(i, g) * t.transpose())), "U-projected residual")
    }

    /// `h(V_i^T (Sigma_i^-1 - B_i)^-1 Sigma_i^-1 Y_{i,g} | X, M_i)`.
    pub fn h_v(&self, i: usize, g: f64) -> Result<f64> {
        let t = self.v[i].transpose() * &self.gap_inv[i] * &self.sigma_inv[i];
        entropy(&linalg::sym(&(&t * self.y_cov(i, g) * t.transpose())), "V-projected residual")
    }

    pub fn g(&self, g: f64) -> Result<f64> {
        let mu = &self.mu;
        let l = self.l();
        let mut out = -mu[0] * self.h_x(0, g)?;
        for i in 0..l - 1 {
            out += (mu[i] - mu[i + 1]) * self.h_x(i + 1, g)?;
        }
        for i in 0..l {
            out -= mu[i] * (self.h_u(i, g)? + self.h_v(i, g)?);
        }
        Ok(out)
    }
}

/// Right side of the projected entropy inequality, from the solution alone:
/// the `C_i` terms and `U_i^T (Sigma_i^-1 - B_i) U_i`, `V_i^T (Sigma_i^-1 - B_i)^-1 V_i`.
pub fn projected_rhs(inst: &ProblemInstance, sol: &BTSolution, decomp: &SpectralDecomposition) -> Result<f64> {
    let prep = Prepared::new(inst)?;
    let eval = prep.evaluate(&sol.point)?;
    let mu = &inst.mu;
    let l = inst.l;
    let mut out = -mu[0] * entropy(&eval.chain.c[0], "C_1")?;
    for i in 0..l - 1 {
        out += (mu[i] - mu[i + 1]) * entropy(&eval.chain.c[i + 1], "C_i")?;
    }
    for i in 0..l {
        let gap = &prep.sigma_inv[i] - &sol.point.b[i];
        let (u, v) = (&decomp.u[i], &decomp.v[i]);
        out -= mu[i] * entropy(&linalg::sym(&(u.transpose() * gap * u)), "U block")?;
        out -= mu[i] * entropy(&linalg::sym(&(v.transpose() * &eval.residual_cov[i] * v)), "V block")?;
    }
    Ok(out)
}

/// `g(gamma)` for one channel.
pub fn g_of_gamma(
    inst: &ProblemInstance,
    sol: &BTSolution,
    decomp: &SpectralDecomposition,
    ch: &GaussianTestChannel,
    gamma: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidInput(format!("gamma = {gamma} outside [0, 1]")));
    }
    PathContext::new(inst, sol, decomp, ch)?.g(gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub gamma: Vec<f64>,
    pub g: Vec<f64>,
    /// `max_k g(gamma_{k+1}) - g(gamma_k)`.
    pub max_forward_increase: f64,
    pub g0_minus_g1: f64,
    pub monotone: bool,
    pub endpoints_ordered: bool,
    pub pass: bool,
}

/// Samples `g` on a uniform grid of `grid_size` points including both ends.
pub fn verify_monotone(
    inst: &ProblemInstance,
    sol: &BTSolution,
    decomp: &SpectralDecomposition,
    ch: &GaussianTestChannel,
    grid_size: usize,
) -> Result<PathReport> {
    if grid_size < 2 {
        return Err(Error::InvalidInput("the gamma grid needs at least 2 points".into()));
    }
    require_feasible(inst, ch)?;
    let ctx = PathContext::new(inst, sol, decomp, ch)?;
    let gamma: Vec<f64> = (0..grid_size)
        .map(|k| k as f64 / (grid_size - 1) as f64)
        .collect();
    let g = gamma
        .par_iter()
        .map(|&t| ctx.g(t))
        .collect::<Result<Vec<_>>>()?;
    let max_forward_increase = g
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let g0_minus_g1 = g[0] - g[grid_size - 1];
    let monotone = max_forward_increase <= MONOTONE_TOL;
    let endpoints_ordered = g0_minus_g1 >= -ENDPOINT_TOL;
    Ok(PathReport {
        gamma,
        g,
        max_forward_increase,
        g0_minus_g1,
        monotone,
        endpoints_ordered,
        pass: monotone && endpoints_ordered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremalReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub trace: f64,
    pub pass: bool,
}

/// Unprojected entropy inequality: the channel's conditional entropies
/// against the Gaussian values at `C_i` and `S_i`.
pub fn verify_extremal(inst: &ProblemInstance, sol: &BTSolution, ch: &GaussianTestChannel) -> Result<ExtremalReport> {
    require_feasible(inst, ch)?;
    let cov = conditional_covariances(inst, ch)?;
    let chain = Prepared::new(inst)?.chain(&sol.point)?.c;
    let mu = &inst.mu;
    let l = inst.l;
    let side = |x: &[Mat], y: &[Mat]| -> Result<f64> {
        let mut out = -mu[0] * entropy(&x[0], "cov(X | M)")?;
        for i in 0..l - 1 {
            out += (mu[i] - mu[i + 1]) * entropy(&x[i + 1], "cov(X | M)")?;
        }
        for i in 0..l {
            out -= mu[i] * entropy(&y[i], "cov(Y | X, M)")?;
        }
        Ok(out)
    };
    let s: Vec<Mat> = inst
        .sigma
        .iter()
        .zip(&sol.point.b)
        .map(|(s, b)| linalg::sym(&(s - s * b * s)))
        .collect();
    let lhs = side(&cov.tail, &cov.residual)?;
    let rhs = side(&chain, &s)?;
    Ok(ExtremalReport {
        lhs,
        rhs,
        gap: lhs - rhs,
        trace: cov.trace,
        pass: lhs - rhs >= -ENDPOINT_TOL,
    })
}

/// Weighted sum-rate lower bound of the outer-bound chain for one channel:
/// `sum_{i<L} (mu_i - mu_{i+1}) I(X; M_1..M_i | M_{i+1}..M_L) + mu_L I(X; M) + sum_i mu_i I(Y_i; M_i | X)`.
pub fn weighted_sum_lower_bound(inst: &ProblemInstance, ch: &GaussianTestChannel) -> Result<f64> {
    let cov = conditional_covariances(inst, ch)?;
    let ld = |a: &Mat| linalg::logdet_spd(a).ok_or_else(|| Error::SingularMatrix("conditional covariance".into()));
    let mu = &inst.mu;
    let l = inst.l;
    let top = ld(&cov.tail[0])?;
    let mut out = 0.5 * mu[l - 1] * (ld(&inst.k)? - top);
    for i in 0..l - 1 {
        out += 0.5 * (mu[i] - mu[i + 1]) * (ld(&cov.tail[i + 1])? - top);
    }
    for i in 0..l {
        out += 0.5 * mu[i] * (ld(&inst.sigma[i])? - ld(&cov.residual[i])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extremal::channel::{matched_channel, perturbed_channel, random_feasible_channel, shrunk_channel, effective_precisions};
    use crate::objective::{bt_objective, BTPoint};
    use crate::sampling;
    use crate::solver::{recover_multipliers, solve_bt, SolverOptions};
    use crate::spectral::decompose;

    fn certified(inst: &ProblemInstance) -> (BTSolution, SpectralDecomposition) {
        let sol = solve_bt(inst, &SolverOptions::default()).unwrap();
        let cert = recover_multipliers(inst, &sol).unwrap();
        let dec = decompose(inst, &sol, &cert).unwrap();
        (sol, dec)
    }

    #[test]
    fn endpoints_match_definitions() {
        let mut rng = sampling::rng(5);
        let inst = sampling::random_interior_instance(&mut rng, 3, 2);
        let (sol, dec) = certified(&inst);
        let ch = random_feasible_channel(&inst, &mut rng, 0.3).unwrap();
        let g1 = g_of_gamma(&inst, &sol, &dec, &ch, 1.0).unwrap();
        assert!((g1 - projected_rhs(&inst, &sol, &dec).unwrap()).abs() < 1e-10);
        let other = random_feasible_channel(&inst, &mut rng, 0.3).unwrap();
        assert!((g1 - g_of_gamma(&inst, &sol, &dec, &other, 1.0).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn scalar_matched_path_is_flat() {
        let inst = ProblemInstance::scalar(1.0, &[1.0], &[1.0], 0.6).unwrap();
        let (sol, dec) = certified(&inst);
        let ch = matched_channel(&inst, &sol).unwrap();
        let rep = verify_monotone(&inst, &sol, &dec, &ch, 101).unwrap();
        assert!(rep.g0_minus_g1.abs() < 1e-8, "{}", rep.g0_minus_g1);
        assert!(rep.max_forward_increase.abs() < 1e-8);
    }

    #[test]
    fn scalar_extremal_closed_form() {
        // L = 1: lhs - rhs = -h(X|M) - h(Y|X,M) + (1/2) ln(2 pi e)^2 C S.
        let inst = ProblemInstance::scalar(1.0, &[1.0], &[1.0], 0.6).unwrap();
        let (sol, _) = certified(&inst);
        let ch = GaussianTestChannel::new(vec![Mat::identity(1, 1) * 2.0], vec![Mat::identity(1, 1)]);
        let rep = verify_extremal(&inst, &sol, &ch).unwrap();
        // F = 4 / 5, cov(X|M) = 5/9, cov(Y|X,M) = 1 / 5; C = 0.6, S = 1/3.
        let expect = 0.5 * ((0.6 * (1.0 / 3.0)) / ((5.0 / 9.0) * 0.2) as f64).ln();
        assert!((rep.gap - expect).abs() < 1e-8, "{} vs {expect}", rep.gap);
        assert!(rep.pass && rep.gap > 0.0);
    }

    #[test]
    fn lower_bound_is_the_rate_at_the_effective_precisions() {
        let mut rng = sampling::rng(17);
        let inst = sampling::random_interior_instance(&mut rng, 3, 3);
        let ch = random_feasible_channel(&inst, &mut rng, 0.5).unwrap();
        let f = effective_precisions(&inst, &ch).unwrap();
        let direct = bt_objective(&inst, &BTPoint::new(f)).unwrap();
        assert!((weighted_sum_lower_bound(&inst, &ch).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn matched_channel_attains_rate_and_equality() {
        let mut rng = sampling::rng(23);
        let inst = sampling::random_interior_instance(&mut rng, 2, 2);
        let (sol, _) = certified(&inst);
        let ch = matched_channel(&inst, &sol).unwrap();
        assert!((weighted_sum_lower_bound(&inst, &ch).unwrap() - sol.rate).abs() < 1e-9);
        assert!(verify_extremal(&inst, &sol, &ch).unwrap().gap.abs() < 1e-8);
    }

    #[test]
    fn off_optimal_channels_have_positive_gap() {
        let mut rng = sampling::rng(29);
        let inst = sampling::random_interior_instance(&mut rng, 2, 2);
        let (sol, _) = certified(&inst);
        let base = matched_channel(&inst, &sol).unwrap();
        let p = perturbed_channel(&inst, &base, 0.1, &mut rng).unwrap();
        assert!(verify_extremal(&inst, &sol, &p).unwrap().gap > 1e-8);
        let shrunk = shrunk_channel(&inst, &base, 0, 0.9).unwrap();
        assert!(verify_extremal(&inst, &sol, &shrunk).unwrap().gap > 0.0);
        // Shrinking every gain and rescaling onto the boundary gives back the same channel.
        let uniform = base.scaled(0.9);
        let s = crate::extremal::channel::boundary_scale(&inst, &uniform).unwrap().unwrap();
        assert!(verify_extremal(&inst, &sol, &uniform.scaled(s)).unwrap().gap.abs() < 1e-8);
    }

    #[test]
    fn infeasible_channel_is_rejected() {
        let inst = ProblemInstance::scalar(1.0, &[1.0], &[1.0], 0.6).unwrap();
        let (sol, dec) = certified(&inst);
        let ch = GaussianTestChannel::new(vec![Mat::zeros(1, 1)], vec![Mat::identity(1, 1)]);
        assert!(matches!(
            verify_monotone(&inst, &sol, &dec, &ch, 11),
            Err(Error::InfeasibleChannel { .. })
        ));
    }
}
