//! Jointly Gaussian test channels `M_i = A_i Y_i + Z_i` and their conditional covariances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::GaussianJoint;
use crate::linalg::{self, serde_rows, Mat};
use crate::model::ProblemInstance;
use crate::sampling;
use crate::solver::BTSolution;

/// Slack allowed on `tr cov(X | M) <= d`, relative to `max(1, d)`.
pub const FEASIBILITY_SLACK: f64 = 1e-9;

/// Per agent a gain `A_i` (`r_i x m`) and a noise covariance `Q_i` (`r_i x r_i`, positive definite).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTestChannel {
    #[serde(with = "serde_rows::list")]
    pub gains: Vec<Mat>,
    #[serde(with = "serde_rows::list")]
    pub noises: Vec<Mat>,
}

impl GaussianTestChannel {
    pub fn new(gains: Vec<Mat>, noises: Vec<Mat>) -> Self {
        GaussianTestChannel { gains, noises }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Shape and definiteness checks against an instance.
    pub fn check(&self, inst: &ProblemInstance) -> Result<()> {
        if self.gains.len() != inst.l || self.noises.len() != inst.l {
            return Err(Error::Dimension(format!("channel must describe {} agents", inst.l)));
        }
        for (i, (a, q)) in self.gains.iter().zip(&self.noises).enumerate() {
            if a.ncols() != inst.m || a.nrows() == 0 {
                return Err(Error::Dimension(format!("gain {} must be r x {}", i + 1, inst.m)));
            }
            if q.shape() != (a.nrows(), a.nrows()) {
                return Err(Error::Dimension(format!("noise {} must be {r}x{r}", i + 1, r = a.nrows())));
            }
            if !crate::model::is_positive_definite(q) {
                return Err(Error::InvalidInput(format!("noise {} is not positive definite", i + 1)));
            }
        }
        Ok(())
    }

    /// Every gain multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        GaussianTestChannel {
            gains: self.gains.iter().map(|a| a * s).collect(),
            noises: self.noises.clone(),
        }
    }
}

/// Conditional covariances induced by a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCovariances {
    /// `cov(X | M_i, ..., M_L)` for `i = 1..L`.
    pub tail: Vec<Mat>,
    /// `cov(Y_i | X, M_i)`.
    pub residual: Vec<Mat>,
    /// `tr cov(X | M_1, ..., M_L)`.
    pub trace: f64,
}

fn joint(inst: &ProblemInstance, ch: &GaussianTestChannel) -> Result<GaussianJoint> {
    let m = inst.m;
    let mut j = GaussianJoint::independent(&[("X", inst.k.clone())])?;
    for i in 0..inst.l {
        j = j
            .with_independent(&format!("N{i}"), inst.sigma[i].clone())?
            .with_independent(&format!("Z{i}"), ch.noises[i].clone())?
            .with_linear(
                &format!("Y{i}"),
                &[("X", Mat::identity(m, m)), (&format!("N{i}"), Mat::identity(m, m))],
            )?;
        let r = ch.gains[i].nrows();
        j = j.with_linear(
            &format!("M{i}"),
            &[(&format!("Y{i}"), ch.gains[i].clone()), (&format!("Z{i}"), Mat::identity(r, r))],
        )?;
    }
    Ok(j)
}

/// Schur-complement conditioning on the joint law of `(X, Y, M)`.
pub fn conditional_covariances(inst: &ProblemInstance, ch: &GaussianTestChannel) -> Result<ChannelCovariances> {
    ch.check(inst)?;
    let j = joint(inst, ch)?;
    let names: Vec<String> = (0..inst.l).map(|i| format!("M{i}")).collect();
    let mut tail = Vec::with_capacity(inst.l);
    for i in 0..inst.l {
        let given: Vec<&str> = names[i..].iter().map(String::as_str).collect();
        tail.push(j.conditional_cov("X", &given)?);
    }
    let residual = (0..inst.l)
        .map(|i| j.conditional_cov(&format!("Y{i}"), &["X", &names[i]]))
        .collect::<Result<Vec<_>>>()?;
    let trace = tail[0].trace();
    Ok(ChannelCovariances { tail, residual, trace })
}

/// `A_i^T (A_i Sigma_i A_i^T + Q_i)^-1 A_i`, the precision agent `i` adds about `X`.
pub fn effective_precisions(inst: &ProblemInstance, ch: &GaussianTestChannel) -> Result<Vec<Mat>> {
    ch.check(inst)?;
    ch.gains
        .iter()
        .zip(&ch.noises)
        .zip(&inst.sigma)
        .map(|((a, q), s)| {
            let inner = linalg::spd_inverse(&linalg::sym(&(a * s * a.transpose() + q)))?;
            Ok(linalg::sym(&(a.transpose() * inner * a)))
        })
        .collect()
}

fn trace_of(inst: &ProblemInstance, ch: &GaussianTestChannel) -> Result<f64> {
    let mut p = linalg::spd_inverse(&inst.k)?;
    for f in effective_precisions(inst, ch)? {
        p += f;
    }
    Ok(linalg::spd_inverse(&p)?.trace())
}

pub fn is_feasible(inst: &ProblemInstance, ch: &GaussianTestChannel) -> Result<bool> {
    Ok(trace_of(inst, ch)? <= inst.d + FEASIBILITY_SLACK * inst.d.max(1.0))
}

pub(crate) fn require_feasible(inst: &ProblemInstance, ch: &GaussianTestChannel) -> Result<()> {
    let trace = trace_of(inst, ch)?;
    if trace > inst.d + FEASIBILITY_SLACK * inst.d.max(1.0) {
        return Err(Error::InfeasibleChannel { trace, d: inst.d });
    }
    Ok(())
}

/// Smallest common gain scale `s` with `tr cov(X | M) = d`, found by bisection.
///
/// The distortion decreases as the gains grow, so the channel `s' * ch` is
/// feasible exactly when `s' >= s`. Returns `None` if no scale reaches `d`.
pub fn boundary_scale(inst: &ProblemInstance, ch: &GaussianTestChannel) -> Result<Option<f64>> {
    let at = |s: f64| trace_of(inst, &ch.scaled(s));
    let mut hi = 1.0;
    let mut steps = 0;
    while at(hi)? > inst.d {
        hi *= 4.0;
        steps += 1;
        if steps > 60 {
            return Ok(None);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if at(mid)? > inst.d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(hi))
}

/// The Berger-Tung test channel for `B_i`: observe `R_i^T Y_i` with noise
/// `(R_i^T G_i R_i)^-1`, where `R_i` spans `range(B_i)` and
/// `G_i = Sigma_i^-1 (Sigma_i^-1 - B_i)^-1 B_i`. Then the effective precision
/// is exactly `B_i` and `cov(Y_i | X, M_i) = Sigma_i - Sigma_i B_i Sigma_i`.
/// Agents with `B_i = 0` get a zero gain row.
pub fn matched_channel(inst: &ProblemInstance, sol: &BTSolution) -> Result<GaussianTestChannel> {
    let mut gains = Vec::with_capacity(inst.l);
    let mut noises = Vec::with_capacity(inst.l);
    for (b, sigma) in sol.point.b.iter().zip(&inst.sigma) {
        let sigma_inv = linalg::spd_inverse(sigma)?;
        let gap_inv = linalg::spd_inverse(&linalg::sym(&(&sigma_inv - b)))?;
        let g = linalg::sym(&(&sigma_inv * gap_inv * b));
        let (vals, vecs) = linalg::sym_eigen_desc(b);
        let floor = 1e-10 * linalg::max_eigenvalue(&sigma_inv);
        let rank = vals.iter().filter(|&&v| v > floor).count();
        if rank == 0 {
            gains.push(Mat::zeros(1, inst.m));
            noises.push(Mat::identity(1, 1));
            continue;
        }
        let r = linalg::columns(&vecs, 0, rank);
        let q = linalg::spd_inverse(&linalg::sym(&(r.transpose() * g * &r)))?;
        gains.push(r.transpose());
        noises.push(q);
    }
    Ok(GaussianTestChannel { gains, noises })
}

fn random_noise(rng: &mut ChaCha8Rng, r: usize) -> Mat {
    sampling::random_spd(rng, r, 0.2)
}

/// A random feasible channel. Gains have a random number of rows; the common
/// gain scale is placed on the trace boundary and then enlarged by a random
/// factor in `[1, 1 + spread]` (`spread = 0` keeps it on the boundary).
pub fn random_feasible_channel(
    inst: &ProblemInstance,
    rng: &mut ChaCha8Rng,
    spread: f64,
) -> Result<GaussianTestChannel> {
    let m = inst.m;
    for attempt in 0..100 {
        let gains: Vec<Mat> = (0..inst.l)
            .map(|_| {
                let r = if attempt < 50 { rng.random_range(1..=m) } else { m };
                sampling::gaussian(rng, r, m)
            })
            .collect();
        let noises = gains.iter().map(|a| random_noise(rng, a.nrows())).collect();
        let ch = GaussianTestChannel { gains, noises };
        if let Some(s) = boundary_scale(inst, &ch)? {
            let u: f64 = rng.random();
            return Ok(ch.scaled(s * (1.0 + spread * u)));
        }
    }
    Err(Error::Infeasible("no random channel reaches the distortion target".into()))
}

/// `base` with every gain and noise perturbed by relative size `eps`, rescaled
/// onto the trace boundary and then enlarged by a random factor in
/// `[1 + eps/2, 1 + eps]`, so the result is strictly feasible. On the boundary
/// alone a scalar single-agent channel would collapse back onto the optimum.
pub fn perturbed_channel(
    inst: &ProblemInstance,
    base: &GaussianTestChannel,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianTestChannel> {
    for _ in 0..50 {
        let gains: Vec<Mat> = base
            .gains
            .iter()
            .map(|a| {
                let scale = a.amax().max(1.0);
                a + sampling::gaussian(rng, a.nrows(), a.ncols()) * (eps * scale)
            })
            .collect();
        let noises: Vec<Mat> = base
            .noises
            .iter()
            .map(|q| {
                let e = sampling::gaussian(rng, q.nrows(), q.ncols());
                let bump = linalg::sym(&(&e * e.transpose())) * (eps * q.amax());
                q + bump
            })
            .collect();
        let ch = GaussianTestChannel { gains, noises };
        // A perturbation can tilt a rank-deficient gain away from the
        // directions needed to reach the target; draw again.
        if let Some(s) = boundary_scale(inst, &ch)? {
            let u: f64 = rng.random();
            return Ok(ch.scaled(s * (1.0 + 0.5 * eps * (1.0 + u))));
        }
    }
    Err(Error::Infeasible("perturbed channel cannot reach the distortion target".into()))
}

/// `base` with agent `agent`'s gain multiplied by `factor`, then all gains
/// rescaled by a common factor back onto the trace boundary.
pub fn shrunk_channel(
    inst: &ProblemInstance,
    base: &GaussianTestChannel,
    agent: usize,
    factor: f64,
) -> Result<GaussianTestChannel> {
    let mut ch = base.clone();
    ch.gains[agent] *= factor;
    let s = boundary_scale(inst, &ch)?
        .ok_or_else(|| Error::Infeasible("shrunk channel cannot reach the distortion target".into()))?;
    Ok(ch.scaled(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{BTPoint, Prepared};
    use crate::solver::{solve_bt, SolverOptions};

    fn scalar() -> ProblemInstance {
        ProblemInstance::scalar(1.0, &[1.0], &[1.0], 0.6).unwrap()
    }

    #[test]
    fn scalar_conditioning() {
        let inst = scalar();
        let ch = GaussianTestChannel::new(vec![Mat::identity(1, 1)], vec![Mat::identity(1, 1)]);
        let cov = conditional_covariances(&inst, &ch).unwrap();
        assert!((cov.tail[0][(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        // Y = X + N, M = Y + Z: var(Y | X, M) = 1/2.
        assert!((cov.residual[0][(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn useless_channel_leaves_prior() {
        let inst = ProblemInstance::new(
            Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            vec![Mat::identity(2, 2); 2],
            vec![1.0, 1.0],
            1.0,
        )
        .unwrap();
        let ch = GaussianTestChannel::new(vec![Mat::zeros(2, 2); 2], vec![Mat::identity(2, 2); 2]);
        let cov = conditional_covariances(&inst, &ch).unwrap();
        assert!((&cov.tail[0] - &inst.k).amax() < 1e-15);
        assert!((cov.trace - 1.5).abs() < 1e-15);
        assert!(matches!(require_feasible(&inst, &ch), Err(Error::InfeasibleChannel { .. })));
    }

    #[test]
    fn noiseless_limit_matches_direct_formula() {
        let mut rng = sampling::rng(4);
        let inst = sampling::random_interior_instance(&mut rng, 3, 2);
        let ch = GaussianTestChannel::new(vec![Mat::identity(3, 3); 2], vec![Mat::identity(3, 3) * 1e-8; 2]);
        let cov = conditional_covariances(&inst, &ch).unwrap();
        let mut p = linalg::spd_inverse(&inst.k).unwrap();
        for s in &inst.sigma {
            p += linalg::spd_inverse(s).unwrap();
        }
        let direct = linalg::spd_inverse(&p).unwrap();
        assert!((&cov.tail[0] - direct).amax() < 1e-6);
    }

    #[test]
    fn schur_agrees_with_precision_sums() {
        let mut rng = sampling::rng(9);
        let inst = sampling::random_interior_instance(&mut rng, 3, 3);
        let ch = random_feasible_channel(&inst, &mut rng, 0.5).unwrap();
        let cov = conditional_covariances(&inst, &ch).unwrap();
        let f = effective_precisions(&inst, &ch).unwrap();
        let chain = Prepared::new(&inst).unwrap().chain(&BTPoint::new(f.clone())).unwrap();
        for i in 0..3 {
            assert!((&cov.tail[i] - &chain.c[i]).amax() < 1e-10);
            let s = &inst.sigma[i];
            let expect = s - s * &f[i] * s;
            assert!((&cov.residual[i] - expect).amax() < 1e-10);
        }
        assert!(cov.trace <= inst.d * (1.0 + 1e-9));
    }

    #[test]
    fn matched_channel_reproduces_solution() {
        let mut rng = sampling::rng(12);
        let inst = sampling::random_interior_instance(&mut rng, 3, 2);
        let sol = solve_bt(&inst, &SolverOptions::default()).unwrap();
        let ch = matched_channel(&inst, &sol).unwrap();
        let cov = conditional_covariances(&inst, &ch).unwrap();
        for i in 0..2 {
            assert!((&cov.tail[i] - &sol.chain.c[i]).amax() < 1e-9);
            let s = &inst.sigma[i];
            let target = s - s * &sol.point.b[i] * s;
            assert!((&cov.residual[i] - target).amax() < 1e-9);
        }
        assert!((cov.trace - inst.d).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip() {
        let ch = GaussianTestChannel::new(vec![Mat::from_row_slice(1, 2, &[1.0, -0.5])], vec![Mat::identity(1, 1) * 0.3]);
        let back = GaussianTestChannel::from_json(&ch.to_json().unwrap()).unwrap();
        assert_eq!(ch, back);
    }

    #[test]
    fn random_channels_are_feasible() {
        let mut rng = sampling::rng(31);
        let inst = sampling::random_interior_instance(&mut rng, 2, 3);
        for spread in [0.0, 1.0] {
            let ch = random_feasible_channel(&inst, &mut rng, spread).unwrap();
            assert!(is_feasible(&inst, &ch).unwrap());
        }
    }
}
