//! Term-by-term evaluation of the derivative bound along the path, at a single
//! `gamma`, for a jointly Gaussian channel.
//!
//! With `J_i = ((1-g) cov(X|M_i..) + g C_i)^-1`, `R_i = Sigma_i^-1 - B_i` and
//! `E_i = R_i - Sigma_i^-1 cov(Y_{i,g}|X,M_i) Sigma_i^-1`, the terms are
//!
//! ```text
//! I1 = sum_{i<L} 2 tr{P_Ui (Delta_{i+1} - Delta_i) P_Ui (J_{i+1} - C_{i+1}^-1)} + 2 tr{P_U1 Delta_1 P_U1 (J_1 - C_1^-1)}
//! I2 = same with P_Vi
//! I3 = -sum_i mu_i tr{P_Ui R_i^-1 P_Ui E_i}
//! I4 = -2 lambda tr{C_1^2 (J_1 - C_1^-1)}
//! I5 = sum_{i<L} 2 tr{P_Wi Delta_{i+1} P_Wi (J_{i+1} - C_{i+1}^-1)}
//! I6 = 2 tr{P_VL Delta_L P_VL (J_L - C_L^-1)}
//! I7 = sum_i 2 tr{P_Ui Delta_i P_Ui E_i}
//! ```

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{self, Mat};
use crate::model::ProblemInstance;
use crate::solver::{BTSolution, KKTCertificate};
use crate::spectral::SpectralDecomposition;

use super::channel::{require_feasible, GaussianTestChannel};
use super::path::PathContext;

/// Tolerance of every inequality in the chain.
pub const CHAIN_TOL: f64 = 1e-8;
/// Central-difference step in `gamma`.
pub const GAMMA_STEP: f64 = 1e-5;
/// Mixed tolerance `tol * (1 + |value|)` for finite-difference comparisons.
pub const FD_TOL: f64 = 1e-4;
pub const DUALITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainTerms {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub i4: f64,
    pub i5: f64,
    pub i6: f64,
    pub i7: f64,
}

/// `lhs <= rhs` up to a tolerance; `slack = rhs - lhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainCheck {
    pub name: String,
    /// 1-based agent, 0 when the check is not per agent.
    pub agent: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

impl ChainCheck {
    fn le(name: &str, agent: usize, lhs: f64, rhs: f64, tol: f64) -> Self {
        ChainCheck {
            name: name.to_string(),
            agent,
            lhs,
            rhs,
            slack: rhs - lhs,
            pass: lhs <= rhs + tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub gamma: f64,
    pub terms: ChainTerms,
    /// The five term inequalities.
    pub inequalities: Vec<ChainCheck>,
    /// Upper bound on `2(1-g) g'(g)` before the split into `I1..I4`.
    pub bound: f64,
    /// `2(1-g) g'(g)` by central differences.
    pub derivative: f64,
    /// `|bound - (I1 + I2 + I3 + I4)|`.
    pub decomposition_residual: f64,
    /// Largest violation of `tr{P_U R^-1 P_U R} - n_U = tr{P_V R^-1 P_V R} - n_V`.
    pub projection_identity_residual: f64,
    /// Smallest eigenvalue of `K^-1 + sum_{j>=i} (Sigma_j^-1 - Sigma_j^-1 cov(Y_j|X,M_j) Sigma_j^-1) - cov(X|M_i..)^-1`, per agent.
    pub fisher_margins: Vec<f64>,
    /// Derivative bounds on the individual entropy terms and the overall derivative bound.
    pub derivative_checks: Vec<ChainCheck>,
    /// Largest `|J cov - I|` over the conditional precisions used.
    pub duality_residual: f64,
    pub pass: bool,
}

impl ChainReport {
    pub fn failures(&self) -> impl Iterator<Item = &ChainCheck> {
        self.inequalities
            .iter()
            .chain(&self.derivative_checks)
            .filter(|c| !c.pass)
    }

    pub fn min_fisher_margin(&self) -> f64 {
        self.fisher_margins.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Worst slack among the five term inequalities.
    pub fn min_inequality_slack(&self) -> f64 {
        self.inequalities.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min)
    }
}

fn tr_prod(a: &Mat, b: &Mat) -> f64 {
    linalg::frob_dot(a, b)
}

/// `2 tr{P A P X}`.
fn sandwiched(p: &Mat, a: &Mat, x: &Mat) -> f64 {
    2.0 * tr_prod(&(p * a * p), x)
}

fn within(fd: f64, formula: f64) -> f64 {
    FD_TOL * (1.0 + formula.abs().max(fd.abs()))
}

pub fn verify_proof_chain(
    inst: &ProblemInstance,
    sol: &BTSolution,
    cert: &KKTCertificate,
    decomp: &SpectralDecomposition,
    ch: &GaussianTestChannel,
    gamma: f64,
) -> Result<ChainReport> {
    if !(GAMMA_STEP..=1.0 - GAMMA_STEP).contains(&gamma) {
        return Err(crate::Error::InvalidInput(format!(
            "gamma = {gamma} must lie in ({GAMMA_STEP}, {})",
            1.0 - GAMMA_STEP
        )));
    }
    require_feasible(inst, ch)?;
    let ctx = PathContext::new(inst, sol, decomp, ch)?;
    let l = inst.l;
    let m = inst.m;
    let mu = &inst.mu;

    let p_u: Vec<Mat> = ctx.u.iter().map(linalg::projector).collect();
    let p_v: Vec<Mat> = ctx.v.iter().map(linalg::projector).collect();
    let p_w: Vec<Mat> = ctx.w.iter().map(linalg::projector).collect();

    let mut duality = 0.0_f64;
    let mut j_minus = Vec::with_capacity(l);
    for i in 0..l {
        let p = ctx.x_cov(i, gamma);
        let j = linalg::spd_inverse(&p)?;
        duality = duality.max((&j * &p - Mat::identity(m, m)).amax());
        let c_inv = linalg::spd_inverse(&ctx.c[i])?;
        j_minus.push(j - c_inv);
    }
    let e: Vec<Mat> = (0..l)
        .map(|i| &ctx.gap[i] - &ctx.sigma_inv[i] * ctx.y_cov(i, gamma) * &ctx.sigma_inv[i])
        .collect();

    let mut t = ChainTerms {
        i1: sandwiched(&p_u[0], &ctx.delta[0], &j_minus[0]),
        i2: sandwiched(&p_v[0], &ctx.delta[0], &j_minus[0]),
        i3: 0.0,
        i4: -2.0 * cert.lambda * tr_prod(&(&ctx.c[0] * &ctx.c[0]), &j_minus[0]),
        i5: 0.0,
        i6: sandwiched(&p_v[l - 1], &ctx.delta[l - 1], &j_minus[l - 1]),
        i7: 0.0,
    };
    for i in 0..l - 1 {
        let step = &ctx.delta[i + 1] - &ctx.delta[i];
        t.i1 += sandwiched(&p_u[i], &step, &j_minus[i + 1]);
        t.i2 += sandwiched(&p_v[i], &step, &j_minus[i + 1]);
        t.i5 += sandwiched(&p_w[i], &ctx.delta[i + 1], &j_minus[i + 1]);
    }
    for i in 0..l {
        t.i3 -= mu[i] * tr_prod(&(&p_u[i] * &ctx.gap_inv[i] * &p_u[i]), &e[i]);
        t.i7 += sandwiched(&p_u[i], &ctx.delta[i], &e[i]);
    }

    let inequalities = vec![
        ChainCheck::le("i2_le_i5_plus_i6", 0, t.i2, t.i5 + t.i6, CHAIN_TOL),
        ChainCheck::le("i1_plus_i5_le_i7", 0, t.i1 + t.i5, t.i7, CHAIN_TOL),
        ChainCheck::le("i6_nonpositive", 0, t.i6, 0.0, CHAIN_TOL),
        ChainCheck::le("i7_plus_i3_nonpositive", 0, t.i7 + t.i3, 0.0, CHAIN_TOL),
        ChainCheck::le("i4_nonpositive", 0, t.i4, 0.0, CHAIN_TOL),
    ];

    // Bound on 2(1-g) g' from the per-term derivative bounds.
    let x_term = |i: usize| tr_prod(&ctx.c[i], &j_minus[i]);
    let mut bound = -mu[0] * x_term(0) + t.i3;
    for i in 0..l - 1 {
        bound += (mu[i] - mu[i + 1]) * x_term(i + 1);
    }
    let decomposition_residual = (bound - (t.i1 + t.i2 + t.i3 + t.i4)).abs();

    let scale = 2.0 * (1.0 - gamma);
    let fd = |f: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
        Ok(scale * (f(gamma + GAMMA_STEP)? - f(gamma - GAMMA_STEP)?) / (2.0 * GAMMA_STEP))
    };

    let mut derivative_checks = Vec::new();
    let mut projection_identity_residual = 0.0_f64;
    let mut fisher_margins = Vec::with_capacity(l);
    let mut fisher_sum = ctx.k_inv.clone();
    let mut fisher_rhs = vec![Mat::zeros(m, m); l];
    for i in (0..l).rev() {
        fisher_sum += &ctx.sigma_inv[i] - &ctx.sigma_inv[i] * &ctx.cov.residual[i] * &ctx.sigma_inv[i];
        fisher_rhs[i] = fisher_sum.clone();
    }
    for i in 0..l {
        let a = i + 1;
        let x_fd = fd(&|g| ctx.h_x(i, g))?;
        let x_formula = x_term(i);
        let tol = within(x_fd, x_formula);
        derivative_checks.push(ChainCheck::le("x_entropy_rate", a, x_fd, x_formula, tol));
        derivative_checks.push(ChainCheck::le("x_entropy_rate_reverse", a, x_formula, x_fd, tol));

        let r_inv = &ctx.gap_inv[i];
        let r = &ctx.gap[i];
        let (n_u, n_v) = (ctx.u[i].ncols() as f64, ctx.v[i].ncols() as f64);
        let u_fd = fd(&|g| ctx.h_u(i, g))?;
        let u_bound = n_u
            - tr_prod(
                &(&p_u[i] * r_inv * &p_u[i]),
                &(&ctx.sigma_inv[i] * ctx.y_cov(i, gamma) * &ctx.sigma_inv[i]),
            );
        derivative_checks.push(ChainCheck::le("u_entropy_rate", a, u_bound, u_fd, within(u_fd, u_bound)));

        let v_fd = fd(&|g| ctx.h_v(i, g))?;
        let v_bound = tr_prod(&(&p_v[i] * r_inv * &p_v[i]), r) - n_v;
        derivative_checks.push(ChainCheck::le("v_entropy_rate", a, v_bound, v_fd, within(v_fd, v_bound)));

        let u_side = tr_prod(&(&p_u[i] * r_inv * &p_u[i]), r) - n_u;
        projection_identity_residual = projection_identity_residual.max((u_side - v_bound).abs());

        let margin = &fisher_rhs[i] - linalg::spd_inverse(&ctx.cov.tail[i])?;
        fisher_margins.push(linalg::min_eigenvalue(&linalg::sym(&margin)));
    }
    let derivative = fd(&|g| ctx.g(g))?;
    derivative_checks.push(ChainCheck::le("path_derivative", 0, derivative, bound, within(derivative, bound)));

    let pass = inequalities.iter().all(|c| c.pass)
        && derivative_checks.iter().all(|c| c.pass)
        && fisher_margins.iter().all(|&x| x >= -CHAIN_TOL)
        && duality <= DUALITY_TOL;
    Ok(ChainReport {
        gamma,
        terms: t,
        inequalities,
        bound,
        derivative,
        decomposition_residual,
        projection_identity_residual,
        fisher_margins,
        derivative_checks,
        duality_residual: duality,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extremal::channel::{matched_channel, random_feasible_channel};
    use crate::sampling;
    use crate::solver::{recover_multipliers, solve_bt, SolverOptions};
    use crate::spectral::decompose;

    fn setup(inst: &ProblemInstance) -> (BTSolution, KKTCertificate, SpectralDecomposition) {
        let sol = solve_bt(inst, &SolverOptions::default()).unwrap();
        let cert = recover_multipliers(inst, &sol).unwrap();
        let dec = decompose(inst, &sol, &cert).unwrap();
        (sol, cert, dec)
    }

    #[test]
    fn scalar_single_agent_chain_holds() {
        let inst = ProblemInstance::scalar(1.0, &[1.0], &[1.0], 0.6).unwrap();
        let (sol, cert, dec) = setup(&inst);
        let ch = GaussianTestChannel::new(vec![Mat::identity(1, 1) * 3.0], vec![Mat::identity(1, 1)]);
        for g in [0.25, 0.5, 0.75] {
            let rep = verify_proof_chain(&inst, &sol, &cert, &dec, &ch, g).unwrap();
            assert!(rep.pass, "{:?}", rep.failures().collect::<Vec<_>>());
            assert!(rep.decomposition_residual < 1e-10);
            // Full-rank B: nothing in V.
            assert_eq!((rep.terms.i2, rep.terms.i5, rep.terms.i6), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn scalar_terms_closed_form() {
        // K = Sigma = 1, d = 0.6: B = 2/3, C = 0.6, (mu/2)(C + R^-1) = lambda C^2.
        let inst = ProblemInstance::scalar(1.0, &[1.0], &[1.0], 0.6).unwrap();
        let (sol, cert, dec) = setup(&inst);
        let (c, r_inv) = (0.6, 3.0);
        assert!((cert.lambda - 0.5 * (c + r_inv) / (c * c)).abs() < 1e-6);
        let ch = GaussianTestChannel::new(vec![Mat::identity(1, 1) * 2.0], vec![Mat::identity(1, 1)]);
        let g = 0.5;
        // cov(X|M) = 5/9, cov(Y|X,M) = 1/5, S = 1/3.
        let j = 1.0 / ((1.0 - g) * (5.0 / 9.0) + g * c);
        let e = 1.0 / r_inv - ((1.0 - g) * 0.2 + g / 3.0);
        let delta = cert.lambda * c * c - 0.5 * c;
        let rep = verify_proof_chain(&inst, &sol, &cert, &dec, &ch, g).unwrap();
        assert!((rep.terms.i1 - 2.0 * delta * (j - 1.0 / c)).abs() < 1e-6);
        assert!((rep.terms.i3 + r_inv * e).abs() < 1e-6);
        assert!((rep.terms.i4 + 2.0 * cert.lambda * c * c * (j - 1.0 / c)).abs() < 1e-6);
        assert!((rep.terms.i7 - 2.0 * delta * e).abs() < 1e-6);
    }

    #[test]
    fn terms_split_the_bound_on_commuting_instances() {
        let mut rng = sampling::rng(41);
        let q = sampling::random_orthogonal(&mut rng, 3);
        let k = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0, 0.5]));
        let sigma = vec![
            Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 1.5, 0.8])),
            Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![1.2, 0.4, 0.9])),
        ];
        let base = ProblemInstance::new(k, sigma, vec![2.0, 1.0], 0.0).unwrap();
        let (lo, hi) = crate::model::d_bounds(&base).unwrap();
        let inst = base.with_d(lo + 0.4 * (hi - lo)).conjugated(&q);
        let (sol, cert, dec) = setup(&inst);
        for _ in 0..3 {
            let ch = random_feasible_channel(&inst, &mut rng, 0.5).unwrap();
            let rep = verify_proof_chain(&inst, &sol, &cert, &dec, &ch, 0.5).unwrap();
            assert!(rep.decomposition_residual < 1e-8, "{}", rep.decomposition_residual);
            assert!(rep.projection_identity_residual < 1e-10);
            assert!(rep.derivative <= rep.bound + 1e-6);
            assert!(rep.pass, "{:?}", rep.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn v_rate_bound_needs_more_than_b_vanishing_on_v() {
        // B_i V_i = 0 holds here, yet the V-projected entropy rate falls below
        // tr{P_V R^-1 P_V R} - n_V: at Sigma_i-non-invariant V the Fisher
        // information of V^T N is (V^T Sigma V)^-1, not V^T Sigma^-1 V.
        let mut rng = sampling::rng(1008);
        let inst = sampling::random_interior_instance(&mut rng, 3, 3);
        let (sol, cert, dec) = setup(&inst);
        let spec = crate::spectral::verify_theorem2(&inst, &sol, &cert, &dec, 1e-6).unwrap();
        assert!(spec.worst("b_kills_v") < 1e-8);
        let base = matched_channel(&inst, &sol).unwrap();
        let ch = crate::extremal::channel::perturbed_channel(&inst, &base, 0.2, &mut rng).unwrap();
        let rep = verify_proof_chain(&inst, &sol, &cert, &dec, &ch, 0.5).unwrap();
        assert!(rep.inequalities.iter().all(|c| c.pass));
        assert!(rep.failures().any(|c| c.name == "v_entropy_rate"));
    }

    #[test]
    fn fisher_margins_vanish_for_gaussian_channels() {
        let mut rng = sampling::rng(43);
        let inst = sampling::random_interior_instance(&mut rng, 3, 3);
        let (sol, cert, dec) = setup(&inst);
        let ch = random_feasible_channel(&inst, &mut rng, 0.5).unwrap();
        let rep = verify_proof_chain(&inst, &sol, &cert, &dec, &ch, 0.3).unwrap();
        assert!(rep.fisher_margins.iter().all(|x| x.abs() < 1e-8), "{:?}", rep.fisher_margins);
        assert!(rep.duality_residual < DUALITY_TOL);
        assert!(rep.projection_identity_residual < 1e-10);
    }

    #[test]
    fn matched_channel_has_zero_derivative() {
        let mut rng = sampling::rng(47);
        let inst = sampling::random_interior_instance(&mut rng, 2, 2);
        let (sol, cert, dec) = setup(&inst);
        let ch = matched_channel(&inst, &sol).unwrap();
        let rep = verify_proof_chain(&inst, &sol, &cert, &dec, &ch, 0.5).unwrap();
        assert!(rep.derivative.abs() < 1e-6, "{}", rep.derivative);
    }

    #[test]
    fn gamma_outside_interior_is_rejected() {
        let inst = ProblemInstance::scalar(1.0, &[1.0], &[1.0], 0.6).unwrap();
        let (sol, cert, dec) = setup(&inst);
        let ch = GaussianTestChannel::new(vec![Mat::identity(1, 1)], vec![Mat::identity(1, 1)]);
        assert!(verify_proof_chain(&inst, &sol, &cert, &dec, &ch, 1.0).is_err());
    }
}
