//! Seeded random draws of covariances, orthogonal matrices and instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{self, Mat};
use crate::model::{d_bounds, ProblemInstance};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `G G^T / m + floor I` with Gaussian `G`.
pub fn random_spd(rng: &mut ChaCha8Rng, m: usize, floor: f64) -> Mat {
    let g = gaussian(rng, m, m);
    linalg::sym(&(&g * g.transpose() / m as f64 + Mat::identity(m, m) * floor))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian with sign correction).
pub fn random_orthogonal(rng: &mut ChaCha8Rng, m: usize) -> Mat {
    let qr = gaussian(rng, m, m).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Random valid instance with `d` a fraction `t` of the way from `d_min` to `tr K`.
pub fn random_instance(rng: &mut ChaCha8Rng, m: usize, l: usize, t: f64) -> ProblemInstance {
    let k = random_spd(rng, m, 0.3);
    let sigma: Vec<Mat> = (0..l)
        .map(|_| {
            let scale = 0.3 + 1.2 * rng.random::<f64>();
            random_spd(rng, m, 0.2) * scale
        })
        .collect();
    let mut mu: Vec<f64> = (0..l).map(|_| 0.5 + 1.5 * rng.random::<f64>()).collect();
    if l > 1 && rng.random::<f64>() < 0.25 {
        mu[1] = mu[0];
    }
    mu.sort_by(|a, b| b.total_cmp(a));
    let mut inst = ProblemInstance::new(k, sigma, mu, 0.0).expect("well-formed draw");
    let (lo, hi) = d_bounds(&inst).expect("positive definite draw");
    inst.d = lo + t * (hi - lo);
    inst
}

/// Random instance with `t` drawn from `[0.15, 0.85]`.
pub fn random_interior_instance(rng: &mut ChaCha8Rng, m: usize, l: usize) -> ProblemInstance {
    let t = 0.15 + 0.7 * rng.random::<f64>();
    random_instance(rng, m, l, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate;

    #[test]
    fn draws_are_valid_and_reproducible() {
        let a = random_interior_instance(&mut rng(3), 3, 2);
        let b = random_interior_instance(&mut rng(3), 3, 2);
        assert_eq!(a, b);
        assert!(validate(&a).ok);
        let q = random_orthogonal(&mut rng(1), 4);
        assert!((q.transpose() * &q - Mat::identity(4, 4)).amax() < 1e-12);
    }
}
