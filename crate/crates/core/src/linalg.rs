//! Dense kernels: thin SVD with a fixed sign convention, spectral norms,
//! singular-value soft-thresholding and the double-centering projector onto
//! the interaction space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default cut-off used when counting the rank of a fitted interaction matrix.
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

/// Thin singular value decomposition `m = u * diag(s) * v^T`.
///
/// Singular values are sorted in nonincreasing order. Each left singular
/// vector is oriented so that its entry of largest magnitude (lowest index on
/// ties) is nonnegative; the matching right vector is flipped with it.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u * diag(s) * v^T`, optionally keeping only the leading `d` triplets.
    pub fn reconstruct(&self, d: Option<usize>) -> DMatrix<f64> {
        let d = d.unwrap_or(self.s.len()).min(self.s.len());
        let mut us = self.u.columns(0, d).into_owned();
        for (k, mut col) in us.column_iter_mut().enumerate() {
            col *= self.s[k];
        }
        us * self.v.columns(0, d).transpose()
    }
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn svd_thin(m: &DMatrix<f64>) -> Result<SvdFactors> {
    check_finite(m, "svd input")?;
    let (n, p) = m.shape();
    if n.min(p) == 0 {
        return Ok(SvdFactors {
            u: DMatrix::zeros(n, 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(p, 0),
        });
    }
    // Work on the orientation with at least as many rows as columns.
    let (u_raw, s_raw, v_raw) = if n >= p {
        jacobi_svd(m)?
    } else {
        let (u, s, v) = jacobi_svd(&m.transpose())?;
        (v, s, u)
    };
    let r = s_raw.len();

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| s_raw[b].total_cmp(&s_raw[a]).then(a.cmp(&b)));

    let mut u = DMatrix::zeros(n, r);
    let mut v = DMatrix::zeros(p, r);
    let mut s = DVector::zeros(r);
    for (k, &src) in order.iter().enumerate() {
        let ucol = u_raw.column(src);
        let mut pivot = 0;
        for i in 1..n {
            if ucol[i].abs() > ucol[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if ucol[pivot] < 0.0 { -1.0 } else { 1.0 };
        u.set_column(k, &(ucol * sign));
        v.set_column(k, &(v_raw.column(src) * sign));
        s[k] = s_raw[src];
    }
    Ok(SvdFactors { u, s, v })
}

/// Singular values only, in nonincreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(svd_thin(m)?.s)
}

const MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD of a matrix with `rows >= cols`.
/// Tall inputs are first reduced to their square triangular QR factor.
fn jacobi_svd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (n, p) = m.shape();
    debug_assert!(n >= p);
    if n > p + p / 2 {
        let qr = m.clone().qr();
        let (q, r) = qr.unpack();
        let (ur, s, v) = jacobi_square(r)?;
        return Ok((q * ur, s, v));
    }
    jacobi_square(m.clone())
}

fn jacobi_square(mut a: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (n, p) = a.shape();
    let mut v = DMatrix::<f64>::identity(p, p);
    let mut converged = false;
    // Orthogonality is declared once the cosine between two columns drops
    // below `rows * eps`; a tighter bound lets rounding keep rotating.
    let threshold = f64::EPSILON * n.max(1) as f64;
    {
        let data = a.as_mut_slice();
        let vdata = v.as_mut_slice();
        for _ in 0..MAX_SWEEPS {
            let mut rotated = false;
            for j in 0..p {
                for k in (j + 1)..p {
                    let (left, right) = data.split_at_mut(k * n);
                    let cj = &mut left[j * n..(j + 1) * n];
                    let ck = &mut right[..n];
                    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                    for (x, y) in cj.iter().zip(ck.iter()) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    if gamma == 0.0 || gamma.abs() <= threshold * alpha.sqrt() * beta.sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    rotate(cj, ck, c, s);
                    let (vl, vr) = vdata.split_at_mut(k * p);
                    rotate(&mut vl[j * p..(j + 1) * p], &mut vr[..p], c, s);
                }
            }
            if !rotated {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(Error::SvdFailure);
    }

    let sigma: Vec<f64> = a.column_iter().map(|c| c.norm()).collect();
    let top = sigma.iter().copied().fold(0.0, f64::max);
    let floor = top * f64::EPSILON * n.max(p) as f64;
    let mut u = DMatrix::zeros(n, p);
    let mut null_cols = Vec::new();
    for (k, &s) in sigma.iter().enumerate() {
        if s > floor && s > 0.0 {
            u.set_column(k, &(a.column(k) / s));
        } else {
            null_cols.push(k);
        }
    }
    complete_orthonormal(&mut u, &null_cols);
    let sigma = sigma
        .iter()
        .map(|&s| if s > floor { s } else { 0.0 })
        .collect();
    Ok((u, sigma, v))
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column. Each new column is the standard basis vector with the
/// largest component outside the current span, orthogonalized twice.
fn complete_orthonormal(u: &mut DMatrix<f64>, missing: &[usize]) {
    let n = u.nrows();
    let mut filled: Vec<usize> = (0..u.ncols()).filter(|k| !missing.contains(k)).collect();
    for &k in missing {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for basis in 0..n {
            let mut w = DVector::<f64>::zeros(n);
            w[basis] = 1.0;
            for _ in 0..2 {
                for &f in &filled {
                    let proj = u.column(f).dot(&w);
                    w -= u.column(f) * proj;
                }
            }
            let norm = w.norm();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, w));
            }
        }
        if let Some((norm, w)) = best {
            u.set_column(k, &(w / norm));
            filled.push(k);
        }
    }
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.sum())
}

pub fn operator_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.iter().copied().fold(0.0, f64::max))
}

/// Proximal operator of `lambda * ||.||_*`: shrinks every singular value by
/// `lambda` and clips at zero.
pub fn singular_value_soft_threshold(m: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    Ok(soft_threshold_with_norm(m, lambda)?.0)
}

/// Same as [`singular_value_soft_threshold`] but also returns the nuclear
/// norm of the result, which falls out of the thresholded spectrum for free.
pub fn soft_threshold_with_norm(m: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, f64)> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!(
            "soft-threshold level must be nonnegative, got {lambda}"
        )));
    }
    let (n, p) = m.shape();
    let svd = svd_thin(m)?;
    let kept: Vec<usize> = (0..svd.s.len()).filter(|&k| svd.s[k] > lambda).collect();
    if kept.is_empty() {
        return Ok((DMatrix::zeros(n, p), 0.0));
    }
    let d = kept.len();
    let mut us = DMatrix::zeros(n, d);
    let mut norm = 0.0;
    for k in 0..d {
        let shrunk = svd.s[k] - lambda;
        norm += shrunk;
        us.set_column(k, &(svd.u.column(k) * shrunk));
    }
    Ok((us * svd.v.columns(0, d).transpose(), norm))
}

/// Orthogonal projection onto the doubly centered matrices:
/// `m_ij - rowmean_i - colmean_j + grandmean`.
pub fn interaction_projector(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite(m, "projector input")?;
    let (n, p) = m.shape();
    let row_means: Vec<f64> = m.row_iter().map(|r| r.sum() / p as f64).collect();
    let col_means: Vec<f64> = m.column_iter().map(|c| c.sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    Ok(DMatrix::from_fn(n, p, |i, j| {
        m[(i, j)] - row_means[i] - col_means[j] + grand
    }))
}

/// Number of singular values strictly above `tol`.
pub fn effective_rank(m: &DMatrix<f64>, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("rank tolerance must be positive, got {tol}")));
    }
    Ok(singular_values(m)?.iter().filter(|&&s| s > tol).count())
}

/// Largest absolute row or column sum; zero for a doubly centered matrix.
pub fn centering_residual(m: &DMatrix<f64>) -> f64 {
    let rows = m.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max);
    let cols = m.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max);
    rows.max(cols)
}
