//! Jointly Gaussian vectors with named components, their conditional
//! covariances and Fisher informations, and numerical checks of the Fisher
//! information / MMSE toolbox (complementary identity, de Bruijn, Fisher
//! information inequality, MMSE bound, data processing, Cramer-Rao).
//!
//! For Gaussian laws the conditional Fisher information is the inverse of
//! the conditional covariance, so every quantity here is closed-form.

use std::f64::consts::{E, PI};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::sampling;

/// Zero-mean Gaussian vector made of named blocks.
#[derive(Debug, Clone)]
pub struct GaussianJoint {
    names: Vec<String>,
    offsets: Vec<usize>,
    dims: Vec<usize>,
    cov: Mat,
}

impl GaussianJoint {
    /// Mutually independent components with the given covariances.
    pub fn independent(blocks: &[(&str, Mat)]) -> Result<Self> {
        let mut joint = GaussianJoint {
            names: Vec::new(),
            offsets: Vec::new(),
            dims: Vec::new(),
            cov: Mat::zeros(0, 0),
        };
        for (name, c) in blocks {
            joint = joint.with_independent(name, c.clone())?;
        }
        Ok(joint)
    }

    /// Adds a component independent of everything already present.
    pub fn with_independent(mut self, name: &str, cov: Mat) -> Result<Self> {
        if cov.nrows() != cov.ncols() {
            return Err(Error::Dimension(format!("covariance of {name} is not square")));
        }
        self.check_new(name)?;
        let n = self.cov.nrows();
        let k = cov.nrows();
        let mut big = Mat::zeros(n + k, n + k);
        big.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        big.view_mut((n, n), (k, k)).copy_from(&linalg::sym(&cov));
        self.names.push(name.to_string());
        self.offsets.push(n);
        self.dims.push(k);
        self.cov = big;
        Ok(self)
    }

    /// Adds `name = sum_k A_k * component_k`.
    pub fn with_linear(mut self, name: &str, terms: &[(&str, Mat)]) -> Result<Self> {
        self.check_new(name)?;
        let rows = terms
            .first()
            .map(|(_, a)| a.nrows())
            .ok_or_else(|| Error::InvalidInput(format!("{name} has no terms")))?;
        let n = self.cov.nrows();
        let mut t = Mat::zeros(rows, n);
        for (comp, a) in terms {
            let idx = self.index(comp)?;
            if a.nrows() != rows || a.ncols() != self.dims[idx] {
                return Err(Error::Dimension(format!(
                    "coefficient of {comp} in {name} is {}x{}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            let mut view = t.view_mut((0, self.offsets[idx]), (rows, self.dims[idx]));
            view += a;
        }
        let cross = &t * &self.cov;
        let own = linalg::sym(&(&cross * t.transpose()));
        let mut big = Mat::zeros(n + rows, n + rows);
        big.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        big.view_mut((n, 0), (rows, n)).copy_from(&cross);
        big.view_mut((0, n), (n, rows)).copy_from(&cross.transpose());
        big.view_mut((n, n), (rows, rows)).copy_from(&own);
        self.names.push(name.to_string());
        self.offsets.push(n);
        self.dims.push(rows);
        self.cov = big;
        Ok(self)
    }

    fn check_new(&self, name: &str) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::InvalidInput(format!("component {name} already defined")));
        }
        Ok(())
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown component {name}")))
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        Ok(self.dims[self.index(name)?])
    }

    fn positions(&self, names: &[&str]) -> Result<Vec<usize>> {
        let mut pos = Vec::new();
        for name in names {
            let idx = self.index(name)?;
            pos.extend(self.offsets[idx]..self.offsets[idx] + self.dims[idx]);
        }
        Ok(pos)
    }

    fn block(&self, rows: &[usize], cols: &[usize]) -> Mat {
        Mat::from_fn(rows.len(), cols.len(), |i, j| self.cov[(rows[i], cols[j])])
    }

    /// Joint covariance of the listed components, in order.
    pub fn cov_of(&self, names: &[&str]) -> Result<Mat> {
        let pos = self.positions(names)?;
        Ok(self.block(&pos, &pos))
    }

    /// `cov(target | given)` by the Schur complement of the conditioning block.
    pub fn conditional_cov(&self, target: &str, given: &[&str]) -> Result<Mat> {
        let t = self.positions(&[target])?;
        let g = self.positions(given)?;
        let ctt = self.block(&t, &t);
        if g.is_empty() {
            return Ok(ctt);
        }
        let cgg = self.block(&g, &g);
        let ctg = self.block(&t, &g);
        let chol = cgg.cholesky().ok_or_else(|| {
            Error::SingularConditioning(format!("cov({})", given.join(", ")))
        })?;
        let solved = chol.solve(&ctg.transpose());
        Ok(linalg::sym(&(ctt - ctg * solved)))
    }

    /// `J(target | given)`, the inverse conditional covariance.
    pub fn fisher_conditional(&self, target: &str, given: &[&str]) -> Result<Mat> {
        let c = self.conditional_cov(target, given)?;
        linalg::spd_inverse(&c).map_err(|_| {
            Error::SingularConditioning(format!("cov({target} | {}) is singular", given.join(", ")))
        })
    }

    /// Differential entropy `h(target | given)` in nats.
    pub fn entropy(&self, target: &str, given: &[&str]) -> Result<f64> {
        gaussian_entropy(&self.conditional_cov(target, given)?)
    }
}

/// `(1/2) ln |2 pi e C|`; zero for an empty covariance.
pub fn gaussian_entropy(cov: &Mat) -> Result<f64> {
    let k = cov.nrows();
    let ld = linalg::logdet_spd(cov)
        .ok_or_else(|| Error::DegenerateProjection(format!("{k}x{k} covariance is singular")))?;
    Ok(0.5 * (k as f64 * (2.0 * PI * E).ln() + ld))
}

fn condition_number(a: &Mat) -> f64 {
    let (vals, _) = linalg::sym_eigen_desc(a);
    match (vals.first(), vals.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    /// `||lhs - rhs||_2 / ||rhs||_2`.
    pub residual: f64,
    pub condition: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub finite_difference: f64,
    pub formula: f64,
    pub relative_error: f64,
}

impl DerivativeCheck {
    fn new(fd: f64, formula: f64) -> Self {
        DerivativeCheck {
            finite_difference: fd,
            formula,
            relative_error: (fd - formula).abs() / formula.abs().max(1e-300),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeBruijnCheck {
    /// `d/dg h(X + sqrt(g) N | U) = tr(J(X + sqrt(g) N | U) Sigma) / 2`.
    pub additive: DerivativeCheck,
    /// `d/dg h(sqrt(g) X + N | U) = tr(Sigma^-1 cov(X | sqrt(g) X + N, U)) / 2`.
    pub scaled: DerivativeCheck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginCheck {
    /// Right side minus left side; PSD when the inequality holds.
    pub margin: Mat,
    pub min_eigenvalue: f64,
    /// Larger spectral norm of the two sides.
    pub scale: f64,
}

impl MarginCheck {
    fn new(rhs: Mat, lhs: Mat) -> Self {
        let scale = linalg::spectral_norm(&rhs).max(linalg::spectral_norm(&lhs));
        let margin = linalg::sym(&(rhs - lhs));
        let min_eigenvalue = linalg::min_eigenvalue(&margin);
        MarginCheck { margin, min_eigenvalue, scale }
    }

    /// `min_eigenvalue / scale`.
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.min_eigenvalue / self.scale
        } else {
            self.min_eigenvalue
        }
    }
}

/// Residual of `J(X+N|U) + Sigma^-1 cov(X|X+N,U) Sigma^-1 = Sigma^-1`, with `N` independent of `(X, U)`.
pub fn check_complementary_identity(
    joint: &GaussianJoint,
    x: &str,
    n: &str,
    given: &[&str],
) -> Result<IdentityCheck> {
    let m = joint.dim(x)?;
    let sum = "__sum";
    let j = joint
        .clone()
        .with_linear(sum, &[(x, Mat::identity(m, m)), (n, Mat::identity(m, m))])?;
    let sigma_inv = linalg::spd_inverse(&j.cov_of(&[n])?)?;
    let fisher = j.fisher_conditional(sum, given)?;
    let mut with_sum = given.to_vec();
    with_sum.push(sum);
    let post = j.conditional_cov(x, &with_sum)?;
    let lhs = fisher + &sigma_inv * post * &sigma_inv;
    Ok(IdentityCheck {
        residual: linalg::spectral_norm(&(lhs - &sigma_inv)) / linalg::spectral_norm(&sigma_inv),
        condition: condition_number(&j.cov_of(&[x])?).max(condition_number(&sigma_inv)),
    })
}

/// Step for the central differences in `gamma`.
pub const FD_STEP: f64 = 1e-5;

fn scaled_sum(
    joint: &GaussianJoint,
    a: (&str, f64),
    b: (&str, f64),
) -> Result<(GaussianJoint, &'static str)> {
    let m = joint.dim(a.0)?;
    let name = "__mix";
    let j = joint.clone().with_linear(
        name,
        &[(a.0, Mat::identity(m, m) * a.1), (b.0, Mat::identity(m, m) * b.1)],
    )?;
    Ok((j, name))
}

/// Both forms of de Bruijn's identity against central finite differences at `gamma`.
pub fn check_de_bruijn(
    joint: &GaussianJoint,
    x: &str,
    n: &str,
    given: &[&str],
    gamma: f64,
) -> Result<DeBruijnCheck> {
    let sigma = joint.cov_of(&[n])?;
    let sigma_inv = linalg::spd_inverse(&sigma)?;

    let h_add = |g: f64| -> Result<f64> {
        let (j, s) = scaled_sum(joint, (x, 1.0), (n, g.sqrt()))?;
        j.entropy(s, given)
    };
    let fd = (h_add(gamma + FD_STEP)? - h_add(gamma - FD_STEP)?) / (2.0 * FD_STEP);
    let (j, s) = scaled_sum(joint, (x, 1.0), (n, gamma.sqrt()))?;
    let formula = 0.5 * (j.fisher_conditional(s, given)? * &sigma).trace();
    let additive = DerivativeCheck::new(fd, formula);

    let h_scaled = |g: f64| -> Result<f64> {
        let (j, s) = scaled_sum(joint, (x, g.sqrt()), (n, 1.0))?;
        j.entropy(s, given)
    };
    let fd = (h_scaled(gamma + FD_STEP)? - h_scaled(gamma - FD_STEP)?) / (2.0 * FD_STEP);
    let (j, s) = scaled_sum(joint, (x, gamma.sqrt()), (n, 1.0))?;
    let mut with_mix = given.to_vec();
    with_mix.push(s);
    let formula = 0.5 * (&sigma_inv * j.conditional_cov(x, &with_mix)?).trace();
    let scaled = DerivativeCheck::new(fd, formula);

    Ok(DeBruijnCheck { additive, scaled })
}

/// `(1-g) J(X|U) + g J(Y|U) - J(sqrt(1-g) X + sqrt(g) Y | U)` for `X`, `Y` conditionally independent given `U`.
pub fn check_fii(joint: &GaussianJoint, x: &str, y: &str, given: &[&str], gamma: f64) -> Result<MarginCheck> {
    let (j, s) = scaled_sum(joint, (x, (1.0 - gamma).sqrt()), (y, gamma.sqrt()))?;
    let rhs = joint.fisher_conditional(x, given)? * (1.0 - gamma) + joint.fisher_conditional(y, given)? * gamma;
    Ok(MarginCheck::new(rhs, j.fisher_conditional(s, given)?))
}

/// `g^2 cov(X|U) + (1-g)^2 Sigma - cov(X | X+N, U)` with `N ~ N(0, Sigma)` independent of `(X, U)`.
pub fn check_mmse_bound(joint: &GaussianJoint, x: &str, n: &str, given: &[&str], gamma: f64) -> Result<MarginCheck> {
    let (j, s) = scaled_sum(joint, (x, 1.0), (n, 1.0))?;
    let mut with_sum = given.to_vec();
    with_sum.push(s);
    let rhs = joint.conditional_cov(x, given)? * (gamma * gamma) + joint.cov_of(&[n])? * ((1.0 - gamma) * (1.0 - gamma));
    Ok(MarginCheck::new(rhs, j.conditional_cov(x, &with_sum)?))
}

/// `J(X|V) - J(X|U)` for a Markov chain `U -> V -> X`.
pub fn check_data_processing(joint: &GaussianJoint, x: &str, u: &str, v: &str) -> Result<MarginCheck> {
    Ok(MarginCheck::new(joint.fisher_conditional(x, &[v])?, joint.fisher_conditional(x, &[u])?))
}

/// `||J(X|U) cov(X|U) - I||_2`, zero for Gaussian laws.
pub fn cramer_rao_residual(joint: &GaussianJoint, x: &str, given: &[&str]) -> Result<f64> {
    let c = joint.conditional_cov(x, given)?;
    let j = joint.fisher_conditional(x, given)?;
    Ok(linalg::spectral_norm(&(j * c - Mat::identity(joint.dim(x)?, joint.dim(x)?))))
}

pub const IDENTITY_TOL: f64 = 1e-10;
pub const DERIVATIVE_TOL: f64 = 1e-5;
pub const MARGIN_TOL: f64 = -1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaRow {
    pub lemma: String,
    pub draws: usize,
    /// Largest relative residual or error, or most negative relative margin eigenvalue.
    pub worst: f64,
    pub tolerance: f64,
    /// Condition number of the draw that produced `worst`.
    pub worst_condition: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaSuiteReport {
    pub seed: u64,
    pub draws: usize,
    pub rows: Vec<LemmaRow>,
    pub pass: bool,
}

/// `G G^T + 1e-3 I` with standard normal `G`.
fn draw_psd(rng: &mut ChaCha8Rng, m: usize) -> Mat {
    let g = sampling::gaussian(rng, m, m);
    linalg::sym(&(&g * g.transpose() + Mat::identity(m, m) * 1e-3))
}

struct DrawOutcome {
    condition: f64,
    complementary: f64,
    complementary_given: f64,
    de_bruijn: f64,
    fii: f64,
    fii_equal: f64,
    mmse: f64,
    dpi: f64,
    cramer_rao: f64,
}

fn run_draw(seed: u64, index: usize) -> Result<DrawOutcome> {
    let mut rng = sampling::rng(seed.wrapping_add(index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let m = 1 + index % 4;
    let kx = draw_psd(&mut rng, m);
    let kn = draw_psd(&mut rng, m);
    let kw = draw_psd(&mut rng, m);
    let ky = draw_psd(&mut rng, m);
    let kz = draw_psd(&mut rng, m);
    let gamma = 0.05 + 0.9 * rng.random::<f64>();
    let id = Mat::identity(m, m);
    let mix = sampling::gaussian(&mut rng, m, m);

    // U = X + W, V = U + Z so that (V -> U -> X) and (U -> X) hold; N, Y independent.
    let joint = GaussianJoint::independent(&[("X", kx.clone()), ("N", kn), ("W", kw), ("Y", ky), ("Z", kz)])?
        .with_linear("U", &[("X", mix.clone()), ("W", id.clone())])?
        .with_linear("V", &[("U", id.clone()), ("Z", id.clone())])?;
    let condition = condition_number(&kx);

    let complementary = check_complementary_identity(&joint, "X", "N", &[])?.residual;
    let complementary_given = check_complementary_identity(&joint, "X", "N", &["U"])?.residual;
    let db = check_de_bruijn(&joint, "X", "N", &["U"], gamma)?;
    let de_bruijn = db.additive.relative_error.max(db.scaled.relative_error);
    let fii = check_fii(&joint, "X", "Y", &["V"], gamma)?.relative();
    let twins = GaussianJoint::independent(&[("A", kx.clone()), ("B", kx)])?;
    let fii_equal = check_fii(&twins, "A", "B", &[], gamma)?.relative();
    let mmse = check_mmse_bound(&joint, "X", "N", &["U"], gamma)?.relative();
    // X -> U -> V, so J(X|V) <= J(X|U).
    let dpi = check_data_processing(&joint, "X", "V", "U")?.relative();
    let cramer_rao = cramer_rao_residual(&joint, "X", &["U"])?;
    Ok(DrawOutcome {
        condition,
        complementary,
        complementary_given,
        de_bruijn,
        fii,
        fii_equal,
        mmse,
        dpi,
        cramer_rao,
    })
}

/// Runs every check over `draws` random Gaussian families (dimensions 1 to 4).
pub fn run_lemma_suite(seed: u64, draws: usize) -> Result<LemmaSuiteReport> {
    let outcomes: Vec<DrawOutcome> = (0..draws)
        .into_par_iter()
        .map(|i| run_draw(seed, i))
        .collect::<Result<_>>()?;

    let row = |lemma: &str, tol: f64, upper: bool, pick: &dyn Fn(&DrawOutcome) -> f64| -> LemmaRow {
        let mut worst = if upper { 0.0 } else { f64::INFINITY };
        let mut worst_condition = f64::NAN;
        for o in &outcomes {
            let v = pick(o);
            if worst_condition.is_nan() || v.is_nan() || (upper && v > worst) || (!upper && v < worst) {
                worst = v;
                worst_condition = o.condition;
            }
        }
        let pass = if upper { worst <= tol } else { worst >= tol };
        LemmaRow {
            lemma: lemma.to_string(),
            draws: outcomes.len(),
            worst,
            tolerance: tol,
            worst_condition,
            pass,
        }
    };

    let rows = vec![
        row("complementary_identity", IDENTITY_TOL, true, &|o| o.complementary.max(o.complementary_given)),
        row("cramer_rao_equality", IDENTITY_TOL, true, &|o| o.cramer_rao),
        row("de_bruijn", DERIVATIVE_TOL, true, &|o| o.de_bruijn),
        row("fisher_information_inequality", MARGIN_TOL, false, &|o| o.fii.min(o.fii_equal)),
        row("mmse_bound", MARGIN_TOL, false, &|o| o.mmse),
        row("data_processing", MARGIN_TOL, false, &|o| o.dpi),
    ];
    let pass = rows.iter().all(|r| r.pass);
    Ok(LemmaSuiteReport { seed, draws, rows, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_pair() -> GaussianJoint {
        GaussianJoint::independent(&[("X", Mat::identity(1, 1)), ("N", Mat::identity(1, 1))])
            .unwrap()
            .with_linear("S", &[("X", Mat::identity(1, 1)), ("N", Mat::identity(1, 1))])
            .unwrap()
    }

    #[test]
    fn scalar_conditioning() {
        let j = unit_pair();
        assert!((j.conditional_cov("X", &["S"]).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((j.fisher_conditional("X", &["S"]).unwrap()[(0, 0)] - 2.0).abs() < 1e-14);
        assert_eq!(j.conditional_cov("X", &["N"]).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn schur_matches_dense_inverse() {
        let mut rng = sampling::rng(11);
        let a = draw_psd(&mut rng, 2);
        let b = draw_psd(&mut rng, 2);
        let mix = sampling::gaussian(&mut rng, 2, 2);
        let j = GaussianJoint::independent(&[("X", a), ("W", b)])
            .unwrap()
            .with_linear("U", &[("X", mix), ("W", Mat::identity(2, 2))])
            .unwrap();
        let joint = j.cov_of(&["X", "U"]).unwrap();
        let inv = joint.clone().try_inverse().unwrap();
        let oracle = inv.view((0, 0), (2, 2)).clone_owned().try_inverse().unwrap();
        let schur = j.conditional_cov("X", &["U"]).unwrap();
        assert!((schur - oracle).amax() < 1e-12);
    }

    #[test]
    fn scalar_identities() {
        let j = unit_pair();
        let c = check_complementary_identity(&j, "X", "N", &[]).unwrap();
        assert!(c.residual < 1e-15);
        let db = check_de_bruijn(&j, "X", "N", &[], 0.5).unwrap();
        assert!((db.additive.formula - 1.0 / 3.0).abs() < 1e-14);
        assert!((db.scaled.formula - 1.0 / 3.0).abs() < 1e-14);
        assert!(db.additive.relative_error < 1e-8 && db.scaled.relative_error < 1e-8);
    }

    #[test]
    fn mmse_equality_point() {
        let j = unit_pair();
        let c = check_mmse_bound(&j, "X", "N", &[], 0.5).unwrap();
        assert!(c.min_eigenvalue.abs() < 1e-15);
        let c = check_mmse_bound(&j, "X", "N", &[], 0.0).unwrap();
        assert!((c.min_eigenvalue - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fii_endpoints_are_identities() {
        let mut rng = sampling::rng(5);
        let j = GaussianJoint::independent(&[("X", draw_psd(&mut rng, 3)), ("Y", draw_psd(&mut rng, 3))]).unwrap();
        for g in [0.0, 1.0] {
            assert!(check_fii(&j, "X", "Y", &[], g).unwrap().margin.amax() < 1e-9);
        }
    }

    #[test]
    fn dpi_with_independent_side_information() {
        let mut rng = sampling::rng(2);
        let j = GaussianJoint::independent(&[("X", draw_psd(&mut rng, 2)), ("U", Mat::identity(2, 2)), ("W", Mat::identity(2, 2))])
            .unwrap()
            .with_linear("V", &[("X", Mat::identity(2, 2)), ("W", Mat::identity(2, 2))])
            .unwrap();
        assert!(check_data_processing(&j, "X", "U", "V").unwrap().min_eigenvalue > 0.0);
    }

    #[test]
    fn rejects_duplicate_and_unknown_components() {
        let j = unit_pair();
        assert!(j.clone().with_independent("X", Mat::identity(1, 1)).is_err());
        assert!(j.conditional_cov("Q", &[]).is_err());
    }
}
