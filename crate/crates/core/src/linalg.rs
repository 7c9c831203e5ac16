//! Small dense linear-algebra helpers on complex matrices.

use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::error::{DnError, Result};

pub type CMat = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Determinant by partially pivoted LU.
pub fn det(m: &CMat) -> Complex64 {
    if m.nrows() == 0 {
        return Complex64::new(1.0, 0.0);
    }
    m.clone().lu().determinant()
}

/// Leading κ×κ block A[κ].
pub fn principal_minor(m: &CMat, k: usize) -> CMat {
    m.view((0, 0), (k, k)).into_owned()
}

/// Singular values in decreasing order.
pub fn singular_values(m: &CMat) -> Vec<f64> {
    let mut s: Vec<f64> = m
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Spectral norm.
pub fn norm2(m: &CMat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    singular_values(m)[0]
}

/// 2-norm condition number (infinite when singular).
pub fn cond2(m: &CMat) -> f64 {
    let s = singular_values(m);
    let smin = *s.last().unwrap_or(&0.0);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        s[0] / smin
    }
}

/// Inverse together with its condition number, refusing above `cap`.
pub fn inverse_capped(m: &CMat, cap: f64) -> std::result::Result<(CMat, f64), f64> {
    let c = cond2(m);
    if !(c < cap) {
        return Err(c);
    }
    match m.clone().lu().try_inverse() {
        Some(inv) => Ok((inv, c)),
        None => Err(f64::INFINITY),
    }
}

/// Eigenvalues and unit eigenvectors (columns) of a general complex matrix.
pub fn eig(m: &CMat) -> Result<(Vec<Complex64>, CMat)> {
    let n = m.nrows();
    if n == 0 {
        return Ok((Vec::new(), CMat::zeros(0, 0)));
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| DnError::Numerical("Schur iteration did not converge".into()))?;
    let (q, t) = schur.unpack();
    let vals: Vec<Complex64> = (0..n).map(|i| t[(i, i)]).collect();
    let scale = t
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut y = CMat::zeros(n, n);
    for k in 0..n {
        y[(k, k)] = Complex64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = ZERO;
            for j in (i + 1)..=k {
                s += t[(i, j)] * y[(j, k)];
            }
            let mut d = t[(i, i)] - t[(k, k)];
            if d.norm() < f64::EPSILON * scale {
                d = Complex64::new(f64::EPSILON * scale, 0.0);
            }
            y[(i, k)] = -s / d;
        }
    }
    let mut v = q * y;
    for k in 0..n {
        let nrm = v.column(k).norm();
        if nrm > 0.0 {
            v.column_mut(k).scale_mut(1.0 / nrm);
        }
    }
    Ok((vals, v))
}

/// Solve A x = b, returning `None` when LU fails.
pub fn solve(a: &CMat, b: &CMat) -> Option<CMat> {
    a.clone().lu().solve(b)
}

/// Matrix exponential.
pub fn expm(m: &CMat) -> CMat {
    m.exp()
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(NonZeroUsize::new(n.max(1)).expect("nonzero"));
    let mut pairs: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    pairs
}

/// Least-squares line fit y ≈ slope·x + intercept.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(DnError::Fit(format!(
            "need at least two points, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(DnError::Fit("abscissae are all equal".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Complex identity matrix.
pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Frobenius-normalised max-abs entry.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

pub fn column(v: &[Complex64]) -> DVector<Complex64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn eigen_of_triangular_and_rotation() {
        let m = CMat::from_row_slice(2, 2, &[c(1.0, 0.0), c(2.0, 0.0), c(0.0, 0.0), c(3.0, 0.0)]);
        let (vals, v) = eig(&m).unwrap();
        for k in 0..2 {
            let r = &m * v.column(k) - v.column(k) * vals[k];
            assert!(r.norm() < 1e-12);
        }
        let m = CMat::from_row_slice(2, 2, &[c(0.0, 0.0), c(-1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
        let (vals, v) = eig(&m).unwrap();
        let mut ims: Vec<f64> = vals.iter().map(|z| z.im).collect();
        ims.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ims[0] + 1.0).abs() < 1e-12 && (ims[1] - 1.0).abs() < 1e-12);
        for k in 0..2 {
            let r = &m * v.column(k) - v.column(k) * vals[k];
            assert!(r.norm() < 1e-12);
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let rule = gauss_legendre(5);
        let s: f64 = rule.iter().map(|(x, w)| w * x.powi(8)).sum();
        assert!((s - 2.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn fit_recovers_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| -2.0 * x + 1.0).collect();
        let (s, b) = linear_fit(&xs, &ys).unwrap();
        assert!((s + 2.0).abs() < 1e-14 && (b - 1.0).abs() < 1e-14);
    }
}
