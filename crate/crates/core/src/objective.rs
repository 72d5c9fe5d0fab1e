//! The Berger-Tung weighted-sum-rate objective, its closed-form gradient,
//! the trace constraint, and the MSE chain `C_i = (K^-1 + sum_{j>=i} B_j)^-1`.
//!
//! All rates are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows, Mat};
use crate::model::ProblemInstance;

/// Test-channel precision increments `B_1..B_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BTPoint {
    #[serde(rename = "B", with = "serde_rows::list")]
    pub b: Vec<Mat>,
}

/// `C_1 <= C_2 <= ... <= C_L <= K` in PSD order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseChain {
    #[serde(rename = "C", with = "serde_rows::list")]
    pub c: Vec<Mat>,
}

impl BTPoint {
    pub fn new(b: Vec<Mat>) -> Self {
        BTPoint { b: b.iter().map(linalg::sym).collect() }
    }

    pub fn zeros(inst: &ProblemInstance) -> Self {
        BTPoint { b: vec![Mat::zeros(inst.m, inst.m); inst.l] }
    }

    pub fn scalar(values: &[f64]) -> Self {
        BTPoint { b: values.iter().map(|&v| Mat::from_element(1, 1, v)).collect() }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// Row-major concatenation of every `B_i`, used for deterministic tie-breaking.
    pub fn flatten(&self) -> Vec<f64> {
        self.b.iter().flat_map(|b| linalg::to_rows(b).into_iter().flatten()).collect()
    }

    pub fn conjugated(&self, q: &Mat) -> Self {
        BTPoint { b: self.b.iter().map(|b| linalg::sym(&(q * b * q.transpose()))).collect() }
    }

    /// `B_i >= -tol I` and `Sigma_i^-1 - B_i > 0` for every agent.
    pub fn is_valid_for(&self, inst: &ProblemInstance, tol: f64) -> bool {
        if self.b.len() != inst.l {
            return false;
        }
        self.b.iter().zip(&inst.sigma).all(|(b, s)| {
            if b.shape() != (inst.m, inst.m) || linalg::min_eigenvalue(b) < -tol {
                return false;
            }
            match linalg::spd_inverse(s) {
                Ok(p) => (p - b).cholesky().is_some(),
                Err(_) => false,
            }
        })
    }
}

/// Objective value, gradient, and the quantities both are built from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<Mat>,
    pub chain: MseChain,
    /// `(Sigma_i^-1 - B_i)^-1`.
    pub residual_cov: Vec<Mat>,
}

impl Evaluation {
    pub fn trace_mse(&self) -> f64 {
        self.chain.c[0].trace()
    }
}

/// An instance with `K^-1` and `Sigma_i^-1` precomputed.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub inst: &'a ProblemInstance,
    pub k_inv: Mat,
    pub sigma_inv: Vec<Mat>,
    logdet_k_inv: f64,
    logdet_sigma_inv: Vec<f64>,
}

impl<'a> Prepared<'a> {
    pub fn new(inst: &'a ProblemInstance) -> Result<Self> {
        let k_inv = linalg::spd_inverse(&inst.k)?;
        let sigma_inv = inst
            .sigma
            .iter()
            .map(linalg::spd_inverse)
            .collect::<Result<Vec<_>>>()?;
        let logdet_k_inv = linalg::logdet_spd(&k_inv)
            .ok_or_else(|| Error::SingularMatrix("K^-1".into()))?;
        let logdet_sigma_inv = sigma_inv
            .iter()
            .map(|p| linalg::logdet_spd(p).ok_or_else(|| Error::SingularMatrix("Sigma^-1".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            inst,
            k_inv,
            sigma_inv,
            logdet_k_inv,
            logdet_sigma_inv,
        })
    }

    /// `K^-1 + sum_{j>=i} B_j` for `i = 1..L` (0-based index `i - 1`).
    pub fn precision_sums(&self, point: &BTPoint) -> Vec<Mat> {
        let l = self.inst.l;
        let mut sums = vec![Mat::zeros(0, 0); l];
        let mut acc = self.k_inv.clone();
        for i in (0..l).rev() {
            acc += &point.b[i];
            sums[i] = acc.clone();
        }
        sums
    }

    fn check_shape(&self, point: &BTPoint) -> Result<()> {
        let m = self.inst.m;
        if point.b.len() != self.inst.l || point.b.iter().any(|b| b.shape() != (m, m)) {
            return Err(Error::Dimension(format!(
                "expected {} matrices of size {m}x{m}",
                self.inst.l
            )));
        }
        Ok(())
    }

    pub fn chain(&self, point: &BTPoint) -> Result<MseChain> {
        self.check_shape(point)?;
        let c = self
            .precision_sums(point)
            .iter()
            .map(linalg::spd_inverse)
            .collect::<Result<Vec<_>>>()?;
        Ok(MseChain { c })
    }

    pub fn objective(&self, point: &BTPoint) -> Result<f64> {
        self.check_shape(point)?;
        let mu = &self.inst.mu;
        let l = self.inst.l;
        let sums = self.precision_sums(point);
        let logdets = sums
            .iter()
            .map(|p| linalg::logdet_spd(p).ok_or_else(|| Error::SingularMatrix("K^-1 + sum B".into())))
            .collect::<Result<Vec<_>>>()?;
        let mut value = 0.0;
        for i in 0..l - 1 {
            value += 0.5 * (mu[i] - mu[i + 1]) * (logdets[0] - logdets[i + 1]);
        }
        for i in 0..l {
            let gap = &self.sigma_inv[i] - &point.b[i];
            let ld = linalg::logdet_spd(&gap).ok_or(Error::BoundaryDivergence { agent: i + 1 })?;
            value += 0.5 * mu[i] * (self.logdet_sigma_inv[i] - ld);
        }
        value += 0.5 * mu[l - 1] * (logdets[0] - self.logdet_k_inv);
        Ok(value)
    }

    /// Value and symmetric gradient in one pass.
    pub fn evaluate(&self, point: &BTPoint) -> Result<Evaluation> {
        self.check_shape(point)?;
        let mu = &self.inst.mu;
        let l = self.inst.l;
        let sums = self.precision_sums(point);

        let mut chain = Vec::with_capacity(l);
        let mut logdets = Vec::with_capacity(l);
        for p in &sums {
            let chol = p
                .clone()
                .cholesky()
                .ok_or_else(|| Error::SingularMatrix("K^-1 + sum B".into()))?;
            logdets.push(2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>());
            chain.push(linalg::sym(&chol.inverse()));
        }

        let mut value = 0.0;
        for i in 0..l - 1 {
            value += 0.5 * (mu[i] - mu[i + 1]) * (logdets[0] - logdets[i + 1]);
        }
        let mut residual_cov = Vec::with_capacity(l);
        for i in 0..l {
            let gap = &self.sigma_inv[i] - &point.b[i];
            let chol = gap.cholesky().ok_or(Error::BoundaryDivergence { agent: i + 1 })?;
            let ld = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            if !ld.is_finite() {
                return Err(Error::BoundaryDivergence { agent: i + 1 });
            }
            value += 0.5 * mu[i] * (self.logdet_sigma_inv[i] - ld);
            residual_cov.push(linalg::sym(&chol.inverse()));
        }
        value += 0.5 * mu[l - 1] * (logdets[0] - self.logdet_k_inv);

        let mut gradient = Vec::with_capacity(l);
        let mut shared = &chain[0] * (0.5 * mu[0]);
        for k in 0..l {
            if k > 0 {
                shared -= &chain[k] * (0.5 * (mu[k - 1] - mu[k]));
            }
            gradient.push(&shared + &residual_cov[k] * (0.5 * mu[k]));
        }

        Ok(Evaluation {
            value,
            gradient,
            chain: MseChain { c: chain },
            residual_cov,
        })
    }
}

pub fn bt_objective(inst: &ProblemInstance, point: &BTPoint) -> Result<f64> {
    Prepared::new(inst)?.objective(point)
}

/// Gradient with respect to each `B_k` (symmetric part):
/// `(mu_1/2) C_1 - sum_{i<k} ((mu_i - mu_{i+1})/2) C_{i+1} + (mu_k/2)(Sigma_k^-1 - B_k)^-1`.
pub fn bt_gradient(inst: &ProblemInstance, point: &BTPoint) -> Result<Vec<Mat>> {
    Ok(Prepared::new(inst)?.evaluate(point)?.gradient)
}

pub fn mse_chain(inst: &ProblemInstance, point: &BTPoint) -> Result<MseChain> {
    Prepared::new(inst)?.chain(point)
}

/// `tr(C_1)`; the point is feasible iff this is at most `d`.
pub fn trace_mse(inst: &ProblemInstance, point: &BTPoint) -> Result<f64> {
    Ok(mse_chain(inst, point)?.c[0].trace())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar1() -> ProblemInstance {
        ProblemInstance::scalar(1.0, &[1.0], &[1.0], 0.6).unwrap()
    }

    fn scalar2() -> ProblemInstance {
        ProblemInstance::scalar(1.0, &[1.0, 1.0], &[1.0, 1.0], 0.5).unwrap()
    }

    #[test]
    fn zero_point_has_zero_rate_and_full_trace() {
        let inst = scalar2();
        let p = BTPoint::zeros(&inst);
        assert_eq!(bt_objective(&inst, &p).unwrap(), 0.0);
        assert_eq!(trace_mse(&inst, &p).unwrap(), 1.0);
        let chain = mse_chain(&inst, &p).unwrap();
        assert!(chain.c.iter().all(|c| c[(0, 0)] == 1.0));
    }

    #[test]
    fn scalar_values() {
        let v = bt_objective(&scalar1(), &BTPoint::scalar(&[0.5])).unwrap();
        assert!((v - 0.5 * 3.0f64.ln()).abs() < 1e-14);
        assert!((v - 0.549_306_144_334_054_8).abs() < 1e-12);

        let v = bt_objective(&scalar2(), &BTPoint::scalar(&[0.5, 0.5])).unwrap();
        assert!((v - 1.5 * 2.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn scalar_gradient() {
        let g = bt_gradient(&scalar1(), &BTPoint::scalar(&[0.5])).unwrap();
        assert!((g[0][(0, 0)] - 4.0 / 3.0).abs() < 1e-14);

        let inst = ProblemInstance::new(
            Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            vec![Mat::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.7])],
            vec![1.7],
            2.0,
        )
        .unwrap();
        let g = bt_gradient(&inst, &BTPoint::zeros(&inst)).unwrap();
        let expect = (&inst.k + &inst.sigma[0]) * (0.5 * 1.7);
        assert!((&g[0] - expect).amax() < 1e-13);
    }

    #[test]
    fn scalar_chain() {
        let chain = mse_chain(&scalar2(), &BTPoint::scalar(&[0.5, 0.5])).unwrap();
        assert!((chain.c[0][(0, 0)] - 0.5).abs() < 1e-15);
        assert!((chain.c[1][(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((trace_mse(&scalar2(), &BTPoint::scalar(&[0.5, 0.5])).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn boundary_divergence_is_reported() {
        let err = bt_objective(&scalar1(), &BTPoint::scalar(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::BoundaryDivergence { agent: 1 }));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(bt_objective(&scalar2(), &BTPoint::scalar(&[0.1])).is_err());
    }
}
