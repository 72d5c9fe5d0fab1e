//! Exhaustive grid search for diagonal instances, used as an independent check.
//!
//! With diagonal `K` and `Sigma_i` the problem splits over coordinates, and the
//! objective is evaluated by a scalar formula that shares nothing with the
//! matrix code path.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::ProblemInstance;
use crate::objective::{BTPoint, Prepared};

use super::{BTSolution, SolveStatus};

pub const ORACLE_BUDGET: f64 = 1e8;

struct Diag {
    k: Vec<f64>,
    s: Vec<Vec<f64>>,
    mu: Vec<f64>,
}

impl Diag {
    fn of(inst: &ProblemInstance) -> Result<Self> {
        if !inst.is_diagonal() {
            return Err(Error::NotDiagonal);
        }
        Ok(Diag {
            k: (0..inst.m).map(|n| inst.k[(n, n)]).collect(),
            s: inst
                .sigma
                .iter()
                .map(|s| (0..inst.m).map(|n| s[(n, n)]).collect())
                .collect(),
            mu: inst.mu.clone(),
        })
    }

    /// Rate and distortion of `b[i][n]`.
    fn rate_and_trace(&self, b: &[Vec<f64>]) -> (f64, f64) {
        let l = self.mu.len();
        let mut rate = 0.0;
        let mut trace = 0.0;
        for (n, &k) in self.k.iter().enumerate() {
            // tail[i] = 1/k + sum_{j >= i} b_j
            let mut tail = vec![1.0 / k; l + 1];
            for i in (0..l).rev() {
                tail[i] = tail[i + 1] + b[i][n];
            }
            for i in 0..l - 1 {
                rate += 0.5 * (self.mu[i] - self.mu[i + 1]) * (tail[0] / tail[i + 1]).ln();
            }
            for i in 0..l {
                let inv = 1.0 / self.s[i][n];
                rate += 0.5 * self.mu[i] * (inv / (inv - b[i][n])).ln();
            }
            rate += 0.5 * self.mu[l - 1] * (tail[0] * k).ln();
            trace += 1.0 / tail[0];
        }
        (rate, trace)
    }
}

/// Grid values `0, r, 2r, ...` strictly below `1 / sigma`.
fn axis(sigma: f64, resolution: f64) -> Vec<f64> {
    let upper = 1.0 / sigma;
    let mut out = Vec::new();
    let mut j = 0u64;
    loop {
        let v = j as f64 * resolution;
        if v >= upper {
            break;
        }
        out.push(v);
        j += 1;
    }
    out
}

/// Minimizes over the grid; exact up to the grid resolution.
pub fn oracle_grid(inst: &ProblemInstance, resolution: f64) -> Result<BTSolution> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidInput("oracle resolution must be positive".into()));
    }
    let diag = Diag::of(inst)?;
    let (m, l) = (inst.m, inst.l);
    let axes: Vec<Vec<Vec<f64>>> = diag
        .s
        .iter()
        .map(|row| row.iter().map(|&s| axis(s, resolution)).collect())
        .collect();
    let points: f64 = axes.iter().flatten().map(|a| a.len() as f64).product();
    if points > ORACLE_BUDGET {
        return Err(Error::TooLarge {
            points,
            budget: ORACLE_BUDGET,
        });
    }

    let mut idx = vec![vec![0usize; m]; l];
    let mut b = vec![vec![0.0; m]; l];
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    'grid: loop {
        for i in 0..l {
            for n in 0..m {
                b[i][n] = axes[i][n][idx[i][n]];
            }
        }
        let (rate, trace) = diag.rate_and_trace(&b);
        if trace <= inst.d && best.as_ref().is_none_or(|(r, _)| rate < *r) {
            best = Some((rate, b.clone()));
        }
        // odometer
        for i in 0..l {
            for n in 0..m {
                idx[i][n] += 1;
                if idx[i][n] < axes[i][n].len() {
                    continue 'grid;
                }
                idx[i][n] = 0;
            }
        }
        break;
    }

    let (_, b) = best.ok_or_else(|| Error::Infeasible("no grid point satisfies the trace constraint".into()))?;
    let point = BTPoint {
        b: b.iter()
            .map(|row| Mat::from_diagonal(&nalgebra::DVector::from_vec(row.clone())))
            .collect(),
    };
    let mut sol = BTSolution::from_point(inst, point, SolveStatus::OracleExact)?;
    sol.starts_used = points as usize;
    Ok(sol)
}

/// First-order bound on how much the grid minimum can exceed the true minimum:
/// `resolution * sum |dF/db_{i,n}|` evaluated at `point`.
pub fn grid_lipschitz_bound(inst: &ProblemInstance, point: &BTPoint, resolution: f64) -> Result<f64> {
    let eval = Prepared::new(inst)?.evaluate(point)?;
    Ok(resolution
        * eval
            .gradient
            .iter()
            .map(|g| g.diagonal().iter().map(|x| x.abs()).sum::<f64>())
            .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_grid_matches_closed_form() {
        let inst = ProblemInstance::scalar(1.0, &[1.0], &[1.0], 0.6).unwrap();
        let sol = oracle_grid(&inst, 1e-4).unwrap();
        assert!((sol.rate - 0.5 * 5.0f64.ln()).abs() < 1e-3);
        assert_eq!(sol.status, SolveStatus::OracleExact);
        assert!(sol.trace_mse() <= 0.6);
    }

    #[test]
    fn rejects_non_diagonal_and_oversized() {
        let inst = ProblemInstance::new(
            Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 1.0]),
            vec![Mat::identity(2, 2)],
            vec![1.0],
            1.5,
        )
        .unwrap();
        assert!(matches!(oracle_grid(&inst, 0.01), Err(Error::NotDiagonal)));

        let inst = ProblemInstance::new(Mat::identity(3, 3), vec![Mat::identity(3, 3); 3], vec![1.0; 3], 2.0)
            .unwrap();
        assert!(matches!(oracle_grid(&inst, 1e-3), Err(Error::TooLarge { .. })));
    }
}
