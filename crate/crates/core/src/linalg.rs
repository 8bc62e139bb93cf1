//! Dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type CMat = DMatrix<Complex64>;
pub type Vector = DVector<f64>;
pub type CVector = DVector<Complex64>;

/// Singular values of `a` in decreasing order.
pub fn singular_values(a: &Mat) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

pub fn csingular_values(a: &CMat) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

pub fn operator_norm(a: &Mat) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}

fn rank_tol(s: &[f64], rel: f64, n: usize) -> f64 {
    s.first().copied().unwrap_or(0.0) * rel.max(f64::EPSILON * n as f64)
}

pub fn rank(a: &Mat, rel: f64) -> usize {
    let s = singular_values(a);
    let t = rank_tol(&s, rel, a.nrows().max(a.ncols()));
    s.iter().filter(|&&x| x > t).count()
}

/// Orthonormal basis (columns) of the kernel of `a`.
pub fn null_space(a: &Mat, rel: f64) -> Mat {
    let n = a.ncols();
    if a.nrows() == 0 {
        return Mat::identity(n, n);
    }
    let m = a.nrows().max(n);
    let mut sq = Mat::zeros(m, n);
    sq.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let t = smax * rel.max(f64::EPSILON * m as f64);
    let cols: Vec<usize> = (0..s.len()).filter(|&i| s[i] <= t).collect();
    let mut out = Mat::zeros(n, cols.len());
    for (k, &i) in cols.iter().enumerate() {
        out.set_column(k, &vt.row(i).transpose());
    }
    out
}

/// Orthonormal basis of the column space of `a`.
pub fn range_space(a: &Mat, rel: f64) -> Mat {
    let n = a.nrows();
    if a.ncols() == 0 {
        return Mat::zeros(n, 0);
    }
    let ata = a * a.transpose();
    let eig = SymmetricEigen::new(ata);
    let smax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let t = smax * rel.max(f64::EPSILON * n as f64).powi(2).max(1e-24);
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > t).collect();
    let mut out = Mat::zeros(n, cols.len());
    for (k, &i) in cols.iter().enumerate() {
        out.set_column(k, &eig.eigenvectors.column(i));
    }
    out
}

/// Moore-Penrose pseudo-inverse.
pub fn pinv(a: &Mat, rel: f64) -> Mat {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Mat::zeros(a.ncols(), a.nrows());
    }
    let s = singular_values(a);
    let t = rank_tol(&s, rel, a.nrows().max(a.ncols()));
    a.clone().pseudo_inverse(t.max(f64::MIN_POSITIVE)).expect("nonnegative tolerance")
}

/// Symmetrizes and diagonalizes `a`.
pub fn sym_eigen(a: &Mat) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let s = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(s)
}

/// Applies `f` to the spectrum of a symmetric matrix.
pub fn sym_function(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let eig = sym_eigen(a);
    let d = Vector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| f(l)));
    &eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Principal square root of a positive semidefinite matrix.
pub fn sqrt_psd(a: &Mat) -> Result<Mat> {
    let eig = sym_eigen(a);
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if let Some(&neg) = eig.eigenvalues.iter().find(|&&l| l < -1e-10 * lmax.max(1.0)) {
        return Err(Error::Singular { what: "negative eigenvalue in square root".into(), spectrum: vec![neg] });
    }
    Ok(sym_function(a, |l| l.max(0.0).sqrt()))
}

/// `log det` of a symmetric positive definite matrix.
pub fn logdet_spd(a: &Mat) -> Result<f64> {
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let ch = a.clone().cholesky().ok_or_else(|| Error::Singular {
        what: "matrix not positive definite".into(),
        spectrum: smallest(&sym_eigen(a).eigenvalues.iter().copied().collect::<Vec<_>>()),
    })?;
    Ok(2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

fn smallest(v: &[f64]) -> Vec<f64> {
    let mut w = v.to_vec();
    w.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    w.truncate(4);
    w
}

pub fn cdet(a: &CMat) -> Complex64 {
    if a.nrows() == 0 {
        return Complex64::new(1.0, 0.0);
    }
    a.clone().lu().determinant()
}

/// `log det` as a complex number, accumulated from LU pivots to avoid overflow.
pub fn clogdet(a: &CMat) -> Complex64 {
    if a.nrows() == 0 {
        return Complex64::new(0.0, 0.0);
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let mut s = Complex64::new(0.0, 0.0);
    for i in 0..u.nrows() {
        s += u[(i, i)].ln();
    }
    let p = lu.p();
    if p.determinant::<f64>() < 0.0 {
        s += Complex64::new(0.0, std::f64::consts::PI);
    }
    s
}

pub fn cinverse(a: &CMat) -> Result<CMat> {
    a.clone().try_inverse().ok_or_else(|| Error::Singular {
        what: "complex matrix inverse".into(),
        spectrum: {
            let mut s = csingular_values(a);
            s.reverse();
            s.truncate(4);
            s
        },
    })
}

pub fn inverse(a: &Mat) -> Result<Mat> {
    a.clone().try_inverse().ok_or_else(|| Error::Singular {
        what: "matrix inverse".into(),
        spectrum: {
            let mut s = singular_values(a);
            s.reverse();
            s.truncate(4);
            s
        },
    })
}

pub fn to_complex(a: &Mat) -> CMat {
    a.map(|x| Complex64::new(x, 0.0))
}

/// Largest entrywise modulus of `a - b`.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn cmax_abs_diff(a: &CMat, b: &CMat) -> f64 {
    (a - b).iter().fold(0.0, |m, x| m.max(x.norm()))
}

/// Maximum absolute row sum, the `l^inf -> l^inf` norm.
pub fn max_row_l1(a: &CMat) -> f64 {
    a.row_iter().map(|r| r.iter().map(|x| x.norm()).sum::<f64>()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_wide_matrix() {
        let a = Mat::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let n = null_space(&a, 1e-12);
        assert_eq!(n.ncols(), 2);
        assert!((&a * &n).norm() < 1e-12);
        assert!((n.transpose() * &n - Mat::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn sqrt_and_logdet() {
        let a = Mat::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sqrt_psd(&a).unwrap();
        assert!((&r * &r - &a).norm() < 1e-12);
        assert!((logdet_spd(&a).unwrap() - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn complex_logdet_matches_det() {
        let a = CMat::from_fn(3, 3, |i, j| Complex64::new((i * 3 + j) as f64 * 0.1 + if i == j { 1.0 } else { 0.0 }, (i as f64) - (j as f64)));
        let d = cdet(&a);
        let l = clogdet(&a).exp();
        assert!((d - l).norm() < 1e-10 * d.norm());
    }
}
