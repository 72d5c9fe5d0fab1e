//! Local refinement of an approximate stationary point.
//!
//! With `B_k = Z_k Z_k^T` the first-order conditions become the square system
//! `(G_k - lambda C_1^2) Z_k = 0`, `tr(C_1) = d`, which is solved by
//! Levenberg-Marquardt with a central-difference Jacobian. Kernel directions
//! of `B_k` carry a nonsingular block of the Jacobian, so they are driven to
//! zero rather than left at the projected-gradient noise floor.

use nalgebra::DVector;

use crate::linalg::{self, Mat};
use crate::objective::{BTPoint, Evaluation, Prepared};

/// Least-squares multiplier of `G_k = lambda C_1^2` on `range(B_k)`, weighted by `B_k^{1/2}`.
pub(crate) fn fit_multiplier(point: &BTPoint, eval: &Evaluation) -> f64 {
    let c1 = &eval.chain.c[0];
    let c1sq = linalg::sym(&(c1 * c1));
    let mut num = 0.0;
    let mut den = 0.0;
    for (b, g) in point.b.iter().zip(&eval.gradient) {
        let root = linalg::psd_sqrt(b);
        let fg = &root * g * &root;
        let fc = &root * &c1sq * &root;
        num += linalg::frob_dot(&fg, &fc);
        den += linalg::frob_dot(&fc, &fc);
    }
    if den > 0.0 {
        (num / den).max(0.0)
    } else {
        0.0
    }
}

struct System<'p, 'a> {
    prep: &'p Prepared<'a>,
    m: usize,
    l: usize,
}

impl System<'_, '_> {
    fn unpack(&self, z: &DVector<f64>) -> (Vec<Mat>, f64) {
        let m = self.m;
        let factors = (0..self.l)
            .map(|k| Mat::from_column_slice(m, m, &z.as_slice()[k * m * m..(k + 1) * m * m]))
            .collect();
        (factors, z[self.l * m * m])
    }

    fn point(factors: &[Mat]) -> BTPoint {
        BTPoint {
            b: factors.iter().map(|z| linalg::sym(&(z * z.transpose()))).collect(),
        }
    }

    fn residual(&self, z: &DVector<f64>) -> Option<DVector<f64>> {
        let (factors, lambda) = self.unpack(z);
        let point = Self::point(&factors);
        if !super::inside_guard(self.prep, &point) {
            return None;
        }
        let eval = self.prep.evaluate(&point).ok()?;
        let c1 = &eval.chain.c[0];
        let c1sq = c1 * c1;
        let m = self.m;
        let mut r = DVector::zeros(self.l * m * m + 1);
        for (k, (g, zk)) in eval.gradient.iter().zip(&factors).enumerate() {
            let block = (g - &c1sq * lambda) * zk;
            r.as_mut_slice()[k * m * m..(k + 1) * m * m].copy_from_slice(block.as_slice());
        }
        r[self.l * m * m] = c1.trace() - self.prep.inst.d;
        Some(r)
    }

    fn jacobian(&self, z: &DVector<f64>) -> Option<Mat> {
        let n = z.len();
        let mut jac = Mat::zeros(n, n);
        for j in 0..n {
            let h = 1e-6 * (1.0 + z[j].abs());
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let rp = self.residual(&zp)?;
            let rm = self.residual(&zm)?;
            jac.set_column(j, &((rp - rm) / (2.0 * h)));
        }
        Some(jac)
    }
}

/// Returns a refined `(point, lambda)` whose residual is below the starting one, or `None`.
pub(crate) fn refine(prep: &Prepared, point: &BTPoint, lambda: f64) -> Option<(BTPoint, f64)> {
    let m = prep.inst.m;
    let l = prep.inst.l;
    let sys = System { prep, m, l };
    let mut z = DVector::zeros(l * m * m + 1);
    for (k, b) in point.b.iter().enumerate() {
        let root = linalg::psd_sqrt(b);
        z.as_mut_slice()[k * m * m..(k + 1) * m * m].copy_from_slice(root.as_slice());
    }
    z[l * m * m] = lambda;

    let mut r = sys.residual(&z)?;
    let start_norm = r.norm();
    let mut damping = 1e-6;
    for _ in 0..60 {
        if r.norm() <= 1e-15 {
            break;
        }
        let jac = sys.jacobian(&z)?;
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let rhs = -(&jt * &r);
        let scale = jtj.diagonal().amax().max(1e-300);
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += damping * scale;
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&rhs)) else {
                damping *= 10.0;
                continue;
            };
            let trial = &z + &step;
            if let Some(rt) = sys.residual(&trial) {
                if rt.norm() < r.norm() {
                    z = trial;
                    r = rt;
                    damping = (damping * 0.1).max(1e-15);
                    improved = true;
                    break;
                }
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if !(r.norm() < start_norm) {
        return None;
    }
    let (factors, lambda) = sys.unpack(&z);
    Some((System::point(&factors), lambda))
}
