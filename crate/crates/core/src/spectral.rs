//! Recursive eigen-subspace decomposition at a certified optimum.
//!
//! `C_1 = sum_n d_n e_n e_n^T` with `d_1 >= ... >= d_m`. At stationarity
//! `Delta_1 = lambda C_1^2 - (mu_1/2) C_1` shares the eigenvectors of `C_1`, and
//! each later `Delta_i` acts on the directions not yet claimed by `U_{i-1}` with
//! eigenvalues `lambda d_n^2 - (mu_i/2) d_n`. A direction joins `U_i` once that
//! value turns positive; the remainder spans `V_i`.
//!
//! Eigenvectors within a repeated eigenvalue of `C_1` need no further
//! canonicalization: `Delta_1` is a polynomial in `C_1`, so any orthonormal basis
//! of the block diagonalizes both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows, Mat};
use crate::model::ProblemInstance;
use crate::objective::Prepared;
use crate::solver::{BTSolution, KKTCertificate};

/// Relative width of the band around zero in which a sign is declared degenerate.
pub const SPLIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDecomposition {
    /// Eigenvalues of `C_1`, descending.
    pub eigvals: Vec<f64>,
    /// Matching orthonormal eigenvectors as columns.
    #[serde(with = "serde_rows")]
    pub eigvecs: Mat,
    /// `Delta_i = (mu_i/2)(Sigma_i^-1 - B_i)^-1 - Psi_i`.
    #[serde(with = "serde_rows::list")]
    pub delta: Vec<Mat>,
    #[serde(with = "serde_rows::list")]
    pub u: Vec<Mat>,
    #[serde(with = "serde_rows::list")]
    pub v: Vec<Mat>,
    /// `W_i`, the directions added between `U_i` and `U_{i+1}`.
    #[serde(with = "serde_rows::list")]
    pub w: Vec<Mat>,
    /// Cut indices `n_1 <= ... <= n_L`.
    pub dims: Vec<usize>,
}

/// `lambda d_n^2 - (mu_i/2) d_n` for every weight and eigenvalue.
pub fn split_values(lambda: f64, mu: &[f64], eigvals: &[f64]) -> Vec<Vec<f64>> {
    mu.iter()
        .map(|&w| eigvals.iter().map(|&d| lambda * d * d - 0.5 * w * d).collect())
        .collect()
}

pub fn decompose(
    inst: &ProblemInstance,
    sol: &BTSolution,
    cert: &KKTCertificate,
) -> Result<SpectralDecomposition> {
    let prep = Prepared::new(inst)?;
    let eval = prep.evaluate(&sol.point)?;
    let (eigvals, eigvecs) = linalg::sym_eigen_desc(&eval.chain.c[0]);
    let m = inst.m;
    let lambda = cert.lambda;

    let max_sq = eigvals.iter().map(|d| d * d).fold(0.0, f64::max);
    let band = SPLIT_TOLERANCE * lambda.abs() * max_sq;
    let values = split_values(lambda, &inst.mu, &eigvals);
    let mut dims = Vec::with_capacity(inst.l);
    for (i, row) in values.iter().enumerate() {
        for (n, &v) in row.iter().enumerate() {
            if v.abs() <= band {
                return Err(Error::DegenerateSplit {
                    index: n + 1,
                    agent: i + 1,
                    value: v,
                });
            }
        }
        dims.push(row.iter().filter(|&&v| v > band).count());
    }
    // Positive values form a prefix because d_n is sorted descending; the
    // running maximum keeps the cuts nested even if the certificate is noisy.
    for i in 1..dims.len() {
        dims[i] = dims[i].max(dims[i - 1]);
    }

    let delta = eval
        .residual_cov
        .iter()
        .zip(&cert.psi)
        .zip(&inst.mu)
        .map(|((r, p), &w)| linalg::sym(&(r * (0.5 * w) - p)))
        .collect();
    let u = dims.iter().map(|&n| linalg::columns(&eigvecs, 0, n)).collect();
    let v = dims.iter().map(|&n| linalg::columns(&eigvecs, n, m)).collect();
    let w = dims
        .windows(2)
        .map(|p| linalg::columns(&eigvecs, p[0], p[1]))
        .collect();

    Ok(SpectralDecomposition {
        eigvals,
        eigvecs,
        delta,
        u,
        v,
        w,
        dims,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralCheck {
    pub name: String,
    /// 1-based index of the agent or weight the check refers to.
    pub agent: usize,
    pub residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub tol: f64,
    pub eigvals: Vec<f64>,
    pub dims: Vec<usize>,
    pub checks: Vec<SpectralCheck>,
    pub pass: bool,
}

impl SpectralReport {
    pub fn failures(&self) -> impl Iterator<Item = &SpectralCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn worst(&self, name: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.name == name)
            .map(|c| c.residual)
            .fold(0.0, f64::max)
    }
}

/// `P A P`, the compression of `a` onto the span of the columns of `basis`.
fn compress(basis: &Mat, a: &Mat) -> Mat {
    let p = linalg::projector(basis);
    &p * a * &p
}

/// Checks the block structure of `C_i` and `Delta_i`, the sign pattern of
/// `Delta_i` on each block, `B_i V_i = 0`, and the intermediate identities
/// `V_i^T C_i V_i = V_i^T C_{i+1} V_i` and `U_i^T C_{i+1} V_i = 0`.
pub fn verify_theorem2(
    inst: &ProblemInstance,
    sol: &BTSolution,
    _cert: &KKTCertificate,
    decomp: &SpectralDecomposition,
    tol: f64,
) -> Result<SpectralReport> {
    let prep = Prepared::new(inst)?;
    let chain = prep.chain(&sol.point)?.c;
    let l = inst.l;
    let m = inst.m;
    let (u, v, w, delta) = (&decomp.u, &decomp.v, &decomp.w, &decomp.delta);
    let mut checks = Vec::new();
    let mut push = |name: &str, agent: usize, residual: f64, pass: bool| {
        checks.push(SpectralCheck {
            name: name.to_string(),
            agent,
            residual,
            pass,
        })
    };
    let norm = linalg::spectral_norm;
    let within = |r: f64| r <= tol;

    for i in 0..l {
        let a = i + 1;
        let c = &chain[i];

        let r = norm(&(c - compress(&u[i], c) - compress(&v[i], c)));
        push("spectrum_of_c", a, r, within(r));

        if i == 0 {
            let d = &delta[0];
            let r = norm(&(d - compress(&u[0], d) - compress(&v[0], d)));
            push("spectrum_of_delta", a, r, within(r));
        } else {
            let d = &delta[i];
            let two = norm(&(d - compress(&u[i - 1], d) - compress(&v[i - 1], d)));
            let three = norm(&(d - compress(&u[i - 1], d) - compress(&w[i - 1], d) - compress(&v[i], d)));
            let r = two.max(three);
            push("spectrum_of_delta", a, r, within(r));
        }

        // Strictly positive on U_i; the split band keeps these eigenvalues away from zero.
        let lo = linalg::min_eigenvalue(&(u[i].transpose() * &delta[i] * &u[i]));
        push("u_delta_positive", a, (-lo).max(0.0), lo > 0.0);
        let hi = linalg::max_eigenvalue(&(v[i].transpose() * &delta[i] * &v[i]));
        push("v_delta_nonpositive", a, hi.max(0.0), hi <= tol);
        if i + 1 < l {
            let lo = linalg::min_eigenvalue(&(w[i].transpose() * &delta[i + 1] * &w[i]));
            push("w_delta_positive", a, (-lo).max(0.0), lo > 0.0);
        }

        let r = norm(&(&sol.point.b[i] * &v[i]));
        push("b_kills_v", a, r, within(r));

        if i + 1 < l {
            let next = &chain[i + 1];
            let r = norm(&(v[i].transpose() * c * &v[i] - v[i].transpose() * next * &v[i]));
            push("c_passes_to_next", a, r, within(r));
            let r = norm(&(u[i].transpose() * next * &v[i]));
            push("u_next_c_v_orthogonal", a, r, within(r));
            let r = norm(&(&delta[i + 1] - &delta[i] - next * (0.5 * (inst.mu[i] - inst.mu[i + 1]))));
            push("delta_recursion", a, r, within(r));
            let empty_w = inst.mu[i] != inst.mu[i + 1] || w[i].ncols() == 0;
            push("equal_weights_no_new_directions", a, w[i].ncols() as f64, empty_w);
        }

        let r = norm(&(linalg::projector(&u[i]) + linalg::projector(&v[i]) - Mat::identity(m, m)));
        push("complete", a, r, within(r));
        if i > 0 {
            // span(U_{i-1}) inside span(U_i): the projector onto U_i fixes U_{i-1}.
            let r = norm(&(linalg::projector(&u[i]) * &u[i - 1] - &u[i - 1]));
            push("nested", a, r, within(r) && decomp.dims[i] >= decomp.dims[i - 1]);
        }
    }

    let pass = checks.iter().all(|c| c.pass);
    Ok(SpectralReport {
        tol,
        eigvals: decomp.eigvals.clone(),
        dims: decomp.dims.clone(),
        checks,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling;
    use crate::solver::{recover_multipliers, solve_bt, SolverOptions};

    fn run(inst: &ProblemInstance) -> (BTSolution, KKTCertificate, SpectralDecomposition) {
        let sol = solve_bt(inst, &SolverOptions::default()).unwrap();
        let cert = recover_multipliers(inst, &sol).unwrap();
        let dec = decompose(inst, &sol, &cert).unwrap();
        (sol, cert, dec)
    }

    #[test]
    fn scalar_single_agent_is_all_u() {
        let inst = ProblemInstance::scalar(1.0, &[1.0], &[1.0], 0.6).unwrap();
        let (sol, cert, dec) = run(&inst);
        assert!((cert.lambda - 5.0).abs() < 1e-6);
        assert_eq!(dec.dims, vec![1]);
        assert_eq!(dec.v[0].ncols(), 0);
        // lambda d^2 - d/2 = 5 * 0.36 - 0.3
        assert!((split_values(cert.lambda, &inst.mu, &dec.eigvals)[0][0] - 1.5).abs() < 1e-6);
        assert!(verify_theorem2(&inst, &sol, &cert, &dec, 1e-6).unwrap().pass);
    }

    #[test]
    fn scalar_symmetric_pair() {
        let inst = ProblemInstance::scalar(1.0, &[1.0, 1.0], &[1.0, 1.0], 0.5).unwrap();
        let (sol, cert, dec) = run(&inst);
        assert_eq!(dec.dims, vec![1, 1]);
        assert_eq!(dec.w[0].ncols(), 0);
        let rep = verify_theorem2(&inst, &sol, &cert, &dec, 1e-6).unwrap();
        assert!(rep.pass, "{rep:#?}");
    }

    #[test]
    fn random_instance_structural_identities() {
        // These follow from stationarity alone and hold at every certified optimum.
        let mut rng = sampling::rng(21);
        for _ in 0..5 {
            let inst = sampling::random_interior_instance(&mut rng, 3, 2);
            let (sol, cert, dec) = run(&inst);
            let rep = verify_theorem2(&inst, &sol, &cert, &dec, 1e-6).unwrap();
            for name in ["delta_recursion", "complete", "nested", "u_delta_positive", "v_delta_nonpositive"] {
                assert!(rep.worst(name) <= 1e-6, "{name}: {}", rep.worst(name));
            }
            for (i, b) in sol.point.b.iter().enumerate() {
                if linalg::min_eigenvalue(b) > 1e-6 {
                    assert_eq!(dec.v[i].ncols(), 0);
                }
            }
        }
    }

    #[test]
    fn commuting_instances_satisfy_every_property() {
        let mut rng = sampling::rng(8);
        for l in 1..=3 {
            let mut inst = sampling::random_interior_instance(&mut rng, 3, l);
            let q = sampling::random_orthogonal(&mut rng, 3);
            let diag = |a: &Mat| Mat::from_diagonal(&a.diagonal());
            inst.k = diag(&inst.k);
            inst.sigma = inst.sigma.iter().map(diag).collect();
            let (lo, hi) = crate::model::d_bounds(&inst).unwrap();
            let inst = inst.with_d(lo + 0.6 * (hi - lo)).conjugated(&q);
            let (sol, cert, dec) = run(&inst);
            let rep = verify_theorem2(&inst, &sol, &cert, &dec, 1e-6).unwrap();
            assert!(rep.pass, "{:#?}", rep.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn optimum_need_not_vanish_on_v() {
        // The optimal rank-one B is not aligned with an eigenvector of K, so it
        // cannot annihilate the complementary eigenvector of C_1.
        let inst = ProblemInstance::new(
            Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6]),
            vec![Mat::from_row_slice(2, 2, &[0.4, -0.3, -0.3, 1.2])],
            vec![1.0],
            1.3,
        )
        .unwrap();
        let (sol, cert, dec) = run(&inst);
        let kkt = crate::solver::check_kkt(&inst, &sol, &cert, 1e-9).unwrap();
        assert!(kkt.pass);
        assert_eq!(dec.dims, vec![1]);
        let rep = verify_theorem2(&inst, &sol, &cert, &dec, 1e-6).unwrap();
        assert!(rep.worst("b_kills_v") > 1e-2);

        // Best B supported on an eigenvector of K, scaled onto the trace boundary.
        let (_, kvec) = linalg::sym_eigen_desc(&inst.k);
        let v = linalg::columns(&kvec, 0, 1);
        let vv = &v * v.transpose();
        let (mut lo, mut hi) = (0.0, 1.0 / (v.transpose() * &inst.sigma[0] * &v)[(0, 0)]);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let p = crate::objective::BTPoint::new(vec![&vv * mid]);
            if crate::objective::trace_mse(&inst, &p).unwrap() > inst.d {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let aligned = crate::objective::bt_objective(&inst, &crate::objective::BTPoint::new(vec![&vv * hi])).unwrap();
        assert!(aligned > sol.rate + 1e-3, "{aligned} vs {}", sol.rate);
    }

    #[test]
    fn near_trace_k_leaves_u1_empty() {
        let inst = ProblemInstance::new(
            Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
            vec![Mat::identity(2, 2) * 0.7, Mat::identity(2, 2) * 1.1],
            vec![3.0, 1.0],
            0.99 * 1.8,
        )
        .unwrap();
        let (_, _, dec) = run(&inst);
        assert_eq!(dec.dims[0], 0);
    }

    #[test]
    fn broken_certificate_fails_checks() {
        let inst = ProblemInstance::scalar(1.0, &[1.0, 0.5], &[1.0, 0.5], 0.5).unwrap();
        let (sol, mut cert, _) = run(&inst);
        cert.psi[0] += Mat::identity(1, 1) * 0.3;
        let dec = decompose(&inst, &sol, &cert).unwrap();
        let rep = verify_theorem2(&inst, &sol, &cert, &dec, 1e-6).unwrap();
        assert!(!rep.pass);
        assert!(rep.worst("delta_recursion") > 0.1);
    }
}
