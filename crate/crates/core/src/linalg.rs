//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! Everything here works on `DMatrix<f64>` and tolerates 0x0 / m x 0 shapes,
//! which show up whenever a subspace basis is empty.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Symmetric part `(A + A^T) / 2`.
pub fn sym(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Largest absolute entry of `A - A^T` relative to the largest absolute entry of `A`.
pub fn relative_asymmetry(a: &Mat) -> f64 {
    let scale = a.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).amax() / scale
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(a: &Mat) -> Result<Mat> {
    if a.nrows() == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix(format!("{}x{} not positive definite", a.nrows(), a.ncols())))?;
    Ok(sym(&chol.inverse()))
}

/// `ln |A|` for symmetric positive-definite `A`; `None` when the factorization fails.
pub fn logdet_spd(a: &Mat) -> Option<f64> {
    if a.nrows() == 0 {
        return Some(0.0);
    }
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        let d = l[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    Some(2.0 * acc)
}

/// Eigenpairs of a symmetric matrix, sorted by eigenvalue in descending order.
pub fn sym_eigen_desc(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.nrows();
    if n == 0 {
        return (Vec::new(), Mat::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(sym(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Mat::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vecs.set_column(col, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

pub fn min_eigenvalue(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(sym(a)).eigenvalues.min()
}

pub fn max_eigenvalue(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    SymmetricEigen::new(sym(a)).eigenvalues.max()
}

/// Spectral norm (largest singular value); 0 for empty matrices.
pub fn spectral_norm(a: &Mat) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

/// Euclidean projection onto the PSD cone: clip negative eigenvalues to zero.
pub fn project_psd(a: &Mat) -> Mat {
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let eig = SymmetricEigen::new(sym(a));
    let mut out = Mat::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += lam * &v * v.transpose();
        }
    }
    sym(&out)
}

/// Principal square root of a PSD matrix (negative eigenvalues clipped).
pub fn psd_sqrt(a: &Mat) -> Mat {
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let eig = SymmetricEigen::new(sym(a));
    let mut out = Mat::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k].max(0.0);
        let v = eig.eigenvectors.column(k);
        out += lam.sqrt() * &v * v.transpose();
    }
    sym(&out)
}

/// Frobenius inner product `tr(A^T B)`.
pub fn frob_dot(a: &Mat, b: &Mat) -> f64 {
    a.component_mul(b).sum()
}

/// `U U^T`, the orthogonal projector onto the column span of a column-orthonormal `U`.
pub fn projector(u: &Mat) -> Mat {
    u * u.transpose()
}

/// Columns `range` of `a` as a new matrix (possibly with zero columns).
pub fn columns(a: &Mat, start: usize, end: usize) -> Mat {
    let mut out = Mat::zeros(a.nrows(), end - start);
    for (k, j) in (start..end).enumerate() {
        out.set_column(k, &a.column(j));
    }
    out
}

/// Horizontal concatenation `[A | B]`.
pub fn hcat(a: &Mat, b: &Mat) -> Mat {
    let rows = a.nrows().max(b.nrows());
    let mut out = Mat::zeros(rows, a.ncols() + b.ncols());
    for j in 0..a.ncols() {
        out.set_column(j, &a.column(j));
    }
    for j in 0..b.ncols() {
        out.set_column(a.ncols() + j, &b.column(j));
    }
    out
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn to_rows(a: &Mat) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
        .collect()
}

pub fn is_diagonal(a: &Mat) -> bool {
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if i != j && a[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Serde adapters for matrices stored as row-major nested arrays.
pub mod serde_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::{from_rows, to_rows, Mat};

    pub fn serialize<S: Serializer>(a: &Mat, s: S) -> Result<S::Ok, S::Error> {
        to_rows(a).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }

    pub mod list {
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        use super::super::{from_rows, to_rows, Mat};

        pub fn serialize<S: Serializer>(a: &[Mat], s: S) -> Result<S::Ok, S::Error> {
            a.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Mat>, D::Error> {
            let mats = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            mats.iter()
                .map(|r| from_rows(r).map_err(serde::de::Error::custom))
                .collect()
        }
    }
}
