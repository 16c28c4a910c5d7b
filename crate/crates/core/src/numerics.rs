//! Dense linear-algebra helpers for the projection operators.
//!
//! Everything here works on small dynamically sized matrices (at most a
//! dozen rows), so there is no attempt at a sparse or blocked path.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub const DEFAULT_RELATIVE_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinvOptions {
    /// Singular values below `relative_tolerance * sigma_max` are dropped.
    pub relative_tolerance: f64,
    /// Tikhonov damping. Zero selects the plain Moore-Penrose inverse.
    pub damping: f64,
}

impl Default for PinvOptions {
    fn default() -> Self {
        Self {
            relative_tolerance: DEFAULT_RELATIVE_TOLERANCE,
            damping: 0.0,
        }
    }
}

impl PinvOptions {
    pub fn damped(damping: f64) -> Self {
        Self {
            damping,
            ..Self::default()
        }
    }
}

fn ensure_finite(a: &Mat) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidMatrix)
    }
}

/// Moore-Penrose pseudoinverse through the SVD, or the damped least-squares
/// inverse `A^T (A A^T + lambda^2 I)^-1` when `opts.damping > 0`.
pub fn pinv(a: &Mat, opts: PinvOptions) -> Result<Mat> {
    ensure_finite(a)?;
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Ok(Mat::zeros(cols, rows));
    }
    if opts.damping > 0.0 {
        let lambda2 = opts.damping * opts.damping;
        let gram = a * a.transpose() + Mat::identity(rows, rows) * lambda2;
        let inv = gram.cholesky().ok_or(Error::NotPositiveDefinite)?.inverse();
        return Ok(a.transpose() * inv);
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = opts.relative_tolerance * sigma_max;
    let u = svd.u.as_ref().expect("svd computed with U");
    let v_t = svd.v_t.as_ref().expect("svd computed with V^T");
    let mut out = Mat::zeros(cols, rows);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            out += (v_t.row(i).transpose() / s) * u.column(i).transpose();
        }
    }
    Ok(out)
}

/// Ratio `sigma_min / sigma_max` of a wide matrix; zero for an all-zero matrix.
pub fn conditioning_ratio(a: &Mat) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    if max <= 0.0 {
        return 0.0;
    }
    sv.min() / max
}

/// Full row rank check that shares the pseudoinverse cutoff.
pub fn check_full_row_rank(a: &Mat, relative_tolerance: f64) -> Result<()> {
    ensure_finite(a)?;
    if a.nrows() == 0 {
        return Ok(());
    }
    if a.nrows() > a.ncols() {
        return Err(Error::RankDeficientConstraint { ratio: 0.0 });
    }
    let ratio = conditioning_ratio(a);
    if ratio <= relative_tolerance {
        return Err(Error::RankDeficientConstraint { ratio });
    }
    Ok(())
}

/// `P = I - Jc^+ Jc`, the orthogonal projector onto the null space of `jc`.
pub fn orth_projector(jc: &Mat) -> Result<Mat> {
    orth_projector_with(jc, PinvOptions::default()).map(|(p, _)| p)
}

/// Projector together with the pseudoinverse used to build it.
pub fn orth_projector_with(jc: &Mat, opts: PinvOptions) -> Result<(Mat, Mat)> {
    let n = jc.ncols();
    check_full_row_rank(jc, opts.relative_tolerance)?;
    let jc_pinv = pinv(
        jc,
        PinvOptions {
            damping: 0.0,
            ..opts
        },
    )?;
    let mut p = Mat::identity(n, n) - &jc_pinv * jc;
    symmetrize(&mut p);
    Ok((p, jc_pinv))
}

pub fn symmetrize(m: &mut Mat) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

fn symmetric_eigen_checked(m: &Mat) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    ensure_finite(m)?;
    if !m.is_square() {
        return Err(Error::NotPositiveDefinite);
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::NotPositiveDefinite);
    }
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(eig)
}

/// Principal square root of a symmetric positive-definite matrix.
pub fn matrix_sqrt(m: &Mat) -> Result<Mat> {
    let eig = symmetric_eigen_checked(m)?;
    let d = Mat::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let mut s = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    symmetrize(&mut s);
    Ok(s)
}

/// Inverse of the principal square root.
pub fn matrix_inv_sqrt(m: &Mat) -> Result<Mat> {
    let eig = symmetric_eigen_checked(m)?;
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let mut s = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    symmetrize(&mut s);
    Ok(s)
}

/// Inverse of an SPD matrix by Cholesky.
pub fn spd_inverse(m: &Mat) -> Result<Mat> {
    ensure_finite(m)?;
    let mut inv = m
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?
        .inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn skew_dyn(v: &Vector3<f64>) -> Mat {
    let s = skew(v);
    Mat::from_fn(3, 3, |i, j| s[(i, j)])
}

pub fn diag(values: &[f64]) -> Mat {
    Mat::from_diagonal(&Vector::from_column_slice(values))
}

pub fn max_abs(m: &Mat) -> f64 {
    m.amax()
}
