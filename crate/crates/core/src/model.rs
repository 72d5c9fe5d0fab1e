//! Problem definition: source and noise covariances, weights, and the
//! distortion budget, plus validation against the feasible window of `d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows, Mat};

/// Relative eigenvalue floor for positive definiteness.
pub const PD_RELATIVE_TOL: f64 = 1e-10;
/// Inputs whose relative asymmetry exceeds this are rejected instead of symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// One instance `(K, Sigma_1..Sigma_L, mu_1..mu_L, d)` of the CEO problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "K", with = "serde_rows")]
    pub k: Mat,
    #[serde(rename = "Sigma", with = "serde_rows::list")]
    pub sigma: Vec<Mat>,
    pub mu: Vec<f64>,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
    /// `(d_min, d_max)`, absent when the covariances are not invertible.
    pub d_window: Option<(f64, f64)>,
}

impl ValidationReport {
    pub fn has(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

impl ProblemInstance {
    /// Builds an instance, inferring `m` and `L` and symmetrizing the covariances.
    pub fn new(k: Mat, sigma: Vec<Mat>, mu: Vec<f64>, d: f64) -> Result<Self> {
        let inst = ProblemInstance {
            m: k.nrows(),
            l: sigma.len(),
            k,
            sigma,
            mu,
            d,
        };
        inst.normalized()
    }

    /// Scalar instance (`m = 1`) from per-agent noise variances.
    pub fn scalar(k: f64, sigma: &[f64], mu: &[f64], d: f64) -> Result<Self> {
        Self::new(
            Mat::from_element(1, 1, k),
            sigma.iter().map(|&s| Mat::from_element(1, 1, s)).collect(),
            mu.to_vec(),
            d,
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let inst: ProblemInstance = serde_json::from_str(text)?;
        inst.normalized()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Shape checks plus symmetrization of `K` and `Sigma_i`.
    fn normalized(mut self) -> Result<Self> {
        if self.m == 0 || self.l == 0 {
            return Err(Error::InvalidInput("m and L must be positive".into()));
        }
        if self.sigma.len() != self.l || self.mu.len() != self.l {
            return Err(Error::Dimension(format!(
                "L = {} but {} noise covariances and {} weights",
                self.l,
                self.sigma.len(),
                self.mu.len()
            )));
        }
        let m = self.m;
        let check = |name: &str, a: &Mat| -> Result<Mat> {
            if a.nrows() != m || a.ncols() != m {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {m}x{m}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
            let asym = linalg::relative_asymmetry(a);
            if asym > SYMMETRY_TOL {
                return Err(Error::InvalidInput(format!(
                    "{name} is not symmetric (relative asymmetry {asym:.3e})"
                )));
            }
            Ok(linalg::sym(a))
        };
        self.k = check("K", &self.k)?;
        for i in 0..self.l {
            self.sigma[i] = check(&format!("Sigma_{}", i + 1), &self.sigma[i])?;
        }
        if !self.d.is_finite() || self.mu.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("d and mu must be finite".into()));
        }
        Ok(self)
    }

    /// Joint orthogonal conjugation `K -> Q K Q^T`, `Sigma_i -> Q Sigma_i Q^T`.
    pub fn conjugated(&self, q: &Mat) -> Self {
        let conj = |a: &Mat| linalg::sym(&(q * a * q.transpose()));
        ProblemInstance {
            k: conj(&self.k),
            sigma: self.sigma.iter().map(conj).collect(),
            ..self.clone()
        }
    }

    pub fn with_d(&self, d: f64) -> Self {
        ProblemInstance { d, ..self.clone() }
    }

    pub fn is_diagonal(&self) -> bool {
        linalg::is_diagonal(&self.k) && self.sigma.iter().all(linalg::is_diagonal)
    }
}

pub fn is_positive_definite(a: &Mat) -> bool {
    let (vals, _) = linalg::sym_eigen_desc(a);
    match (vals.first(), vals.last()) {
        (Some(&max), Some(&min)) => max > 0.0 && min > PD_RELATIVE_TOL * max,
        _ => false,
    }
}

/// The open window `(d_min, d_max)` of meaningful distortion budgets:
/// `d_min = tr((K^-1 + sum_i Sigma_i^-1)^-1)`, `d_max = tr(K)`.
pub fn d_bounds(inst: &ProblemInstance) -> Result<(f64, f64)> {
    let mut precision = linalg::spd_inverse(&inst.k)?;
    for s in &inst.sigma {
        precision += linalg::spd_inverse(s)?;
    }
    let d_min = linalg::spd_inverse(&precision)?.trace();
    Ok((d_min, inst.k.trace()))
}

/// Collects every violated rule; never fails on a well-formed record.
pub fn validate(inst: &ProblemInstance) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |rule: &str, message: String| {
        violations.push(Violation {
            rule: rule.to_string(),
            message,
        })
    };

    let shapes_ok = inst.m > 0
        && inst.l > 0
        && inst.sigma.len() == inst.l
        && inst.mu.len() == inst.l
        && inst.k.shape() == (inst.m, inst.m)
        && inst.sigma.iter().all(|s| s.shape() == (inst.m, inst.m));
    if !shapes_ok {
        push("dimensions", "matrix shapes do not match m and L".into());
        return ValidationReport {
            ok: false,
            violations,
            d_window: None,
        };
    }

    let mut pd_ok = true;
    if !is_positive_definite(&inst.k) {
        pd_ok = false;
        push("K_positive_definite", "K is not positive definite".into());
    }
    for (i, s) in inst.sigma.iter().enumerate() {
        if !is_positive_definite(s) {
            pd_ok = false;
            push(
                "Sigma_positive_definite",
                format!("Sigma_{} is not positive definite", i + 1),
            );
        }
    }
    if let Some(&last) = inst.mu.last() {
        if !(last > 0.0) {
            push("weights_positive", "mu_L must be strictly positive".into());
        }
    }
    if inst.mu.windows(2).any(|w| w[0] < w[1]) {
        push(
            "weights_order",
            "weights not non-increasing (need mu_1 >= ... >= mu_L)".into(),
        );
    }

    let d_window = if pd_ok { d_bounds(inst).ok() } else { None };
    if let Some((d_min, d_max)) = d_window {
        if inst.d >= d_max {
            push(
                "d_window",
                format!("d window violated: d >= tr(K) ({} >= {d_max})", inst.d),
            );
        } else if inst.d <= d_min {
            push(
                "d_window",
                format!(
                    "d window violated: d <= tr((K^-1 + sum Sigma_i^-1)^-1) ({} <= {d_min})",
                    inst.d
                ),
            );
        }
    }

    ValidationReport {
        ok: violations.is_empty(),
        violations,
        d_window,
    }
}
