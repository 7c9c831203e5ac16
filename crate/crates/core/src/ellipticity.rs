//! Sampled Λ-ellipticity certificates.
//!
//! Two checkers are provided: the determinant bound
//! |det(A − λ)| ≥ C·Π(⟨ξ⟩^{rᵢ} + |λ|) and the principal-minor bound
//! |det(A[κ] − λE_κ)| ≥ C·⟨ξ⟩^{r₁+…+r_{κ−1}}(⟨ξ⟩^{r_κ} + |λ|). Both take the
//! minimum of the normalised ratio over a finite sample of (x, ξ, λ).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DnError, Result};
use crate::linalg::{det, eig, CMat};
use crate::symbols::{bracket, directions, norm, uniform_points, DNSystem};

/// The closed sector Λ(θ) = {r e^{iφ} : r ≥ 0, θ ≤ φ ≤ 2π − θ}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub theta: f64,
    /// Smallest dyadic exponent of sampled |λ|.
    pub k_min: i32,
    /// Largest dyadic exponent of sampled |λ|.
    pub k_max: i32,
    /// Include the bisector ray (the negative real axis).
    pub bisector: bool,
}

impl Sector {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < PI) {
            return Err(DnError::Input(format!(
                "sector angle must lie in (0, pi), got {theta}"
            )));
        }
        Ok(Sector {
            theta,
            k_min: -4,
            k_max: 40,
            bisector: true,
        })
    }

    /// Membership test with angular tolerance `tol`.
    pub fn contains_tol(&self, z: Complex64, tol: f64) -> bool {
        if z.norm() == 0.0 {
            return true;
        }
        z.arg().abs() >= self.theta - tol
    }

    pub fn contains(&self, z: Complex64) -> bool {
        self.contains_tol(z, 1e-12)
    }

    /// Point at distance t on the upper (`upper = true`) or lower boundary ray.
    pub fn boundary_point(&self, t: f64, upper: bool) -> Complex64 {
        let phi = if upper { self.theta } else { -self.theta };
        Complex64::from_polar(t, phi)
    }

    /// λ samples: the origin, both boundary rays and the bisector at dyadic radii.
    pub fn lambda_samples(&self) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0)];
        for k in self.k_min..=self.k_max {
            let r = 2f64.powi(k);
            out.push(self.boundary_point(r, true));
            out.push(self.boundary_point(r, false));
            if self.bisector {
                out.push(Complex64::new(-r, 0.0));
            }
        }
        out
    }
}

/// Sample points (x, ξ) for the checkers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticityGrid {
    pub xs: Vec<Vec<f64>>,
    pub xis: Vec<Vec<f64>>,
}

impl EllipticityGrid {
    /// The origin plus dyadic shells 2^k, k_min ≤ k ≤ k_max, with the
    /// standard direction set, and `x_per_axis`ⁿ uniform x-points.
    pub fn dyadic(dim: usize, k_min: i32, k_max: i32, x_per_axis: usize) -> Self {
        let mut xis = vec![vec![0.0; dim]];
        for k in k_min..=k_max {
            let r = 2f64.powi(k);
            for d in directions(dim) {
                xis.push(d.iter().map(|v| v * r).collect());
            }
        }
        EllipticityGrid {
            xs: uniform_points(dim, x_per_axis),
            xis,
        }
    }

    /// Default grid: 16 x-points per axis, shells 2^-4 … 2^20.
    pub fn default_for(dim: usize) -> Self {
        Self::dyadic(dim, -4, 20, 16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    Determinant,
    Minors,
    /// Scalar sector bound on the diagonal symbols of a diagonalization.
    Diagonal,
}

/// Sample point attaining the smallest ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub lambda_re: f64,
    pub lambda_im: f64,
    /// 1-based minor index; equals q in determinant mode.
    pub kappa: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticityReport {
    pub passed: bool,
    #[serde(rename = "C_lower")]
    pub c_lower: f64,
    #[serde(rename = "R_used")]
    pub r_used: f64,
    pub witness: Option<Witness>,
    pub mode: CheckMode,
    pub samples: usize,
}

/// Ratio above which the D₁/D₂ rescaled evaluation is used.
pub const SCALING_THRESHOLD: f64 = 1e4;

/// det(A − λI).
pub fn char_poly(sys: &DNSystem, x: &[f64], xi: &[f64], lambda: Complex64) -> Result<Complex64> {
    let a = sys.eval_matrix(x, xi)?;
    Ok(det(&shift_diag(&a, lambda)))
}

fn shift_diag(a: &CMat, lambda: Complex64) -> CMat {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] -= lambda;
    }
    m
}

/// |det(A − λ)| / Π(⟨ξ⟩^{rᵢ} + |λ|) evaluated directly.
pub fn det_ratio_raw(a: &CMat, r: &[f64], br: f64, lambda: Complex64) -> f64 {
    let d = det(&shift_diag(a, lambda)).norm();
    let denom: f64 = r.iter().map(|ri| br.powf(*ri) + lambda.norm()).product();
    d / denom
}

/// The same ratio as the determinant of D₁(A − λ)D₂ with
/// D₁ = diag(⟨ξ⟩^{−lᵢ}fᵢ), D₂ = diag(⟨ξ⟩^{−mⱼ}fⱼ), fᵢ = (1 + |λ|⟨ξ⟩^{−rᵢ})^{−1/2}.
pub fn det_ratio_scaled(a: &CMat, l: &[f64], m: &[f64], br: f64, lambda: Complex64) -> f64 {
    let q = a.nrows();
    let lb = br.ln();
    let f: Vec<f64> = (0..q)
        .map(|i| (1.0 + lambda.norm() * (-(l[i] + m[i]) * lb).exp()).powf(-0.5))
        .collect();
    let mut s = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in 0..q {
            let e = a[(i, j)]
                - if i == j {
                    lambda
                } else {
                    Complex64::new(0.0, 0.0)
                };
            let w = (-(l[i] + m[j]) * lb).exp() * f[i] * f[j];
            s[(i, j)] = if e == Complex64::new(0.0, 0.0) {
                e
            } else {
                e * w
            };
        }
    }
    det(&s).norm()
}

/// det(A[κ] − λE_κ) with λ subtracted in the corner (κ is 1-based).
pub fn minor_det(a: &CMat, lambda: Complex64, kappa: usize) -> Complex64 {
    let mut sub = a.view((0, 0), (kappa, kappa)).into_owned();
    sub[(kappa - 1, kappa - 1)] -= lambda;
    det(&sub)
}

/// Ratio for the κ-th principal minor (1-based), raw evaluation.
pub fn minor_ratio_raw(a: &CMat, r: &[f64], br: f64, lambda: Complex64, kappa: usize) -> f64 {
    let pre: f64 = r[..kappa - 1].iter().sum();
    minor_det(a, lambda, kappa).norm() / (br.powf(pre) * (br.powf(r[kappa - 1]) + lambda.norm()))
}

/// Ratio for the κ-th principal minor with the diagonal rescaling.
pub fn minor_ratio_scaled(
    a: &CMat,
    l: &[f64],
    m: &[f64],
    br: f64,
    lambda: Complex64,
    kappa: usize,
) -> f64 {
    let lb = br.ln();
    let k = kappa - 1;
    let fk = (1.0 + lambda.norm() * (-(l[k] + m[k]) * lb).exp()).powf(-0.5);
    let mut s = DMatrix::zeros(kappa, kappa);
    for i in 0..kappa {
        for j in 0..kappa {
            let mut e = a[(i, j)];
            if i == k && j == k {
                e -= lambda;
            }
            let mut w = (-(l[i] + m[j]) * lb).exp();
            if i == k {
                w *= fk;
            }
            if j == k {
                w *= fk;
            }
            s[(i, j)] = if e == Complex64::new(0.0, 0.0) {
                e
            } else {
                e * w
            };
        }
    }
    det(&s).norm()
}

struct Best {
    ratio: f64,
    x: usize,
    xi: usize,
    lambda: Complex64,
    kappa: usize,
    samples: usize,
}

fn run_check(
    sys: &DNSystem,
    sector: &Sector,
    grid: &EllipticityGrid,
    r_min: f64,
    threshold: f64,
    mode: CheckMode,
) -> Result<EllipticityReport> {
    if mode == CheckMode::Diagonal {
        return Err(DnError::Input(
            "diagonal mode is checked by the diagonalize module".into(),
        ));
    }
    let xi_idx: Vec<usize> = (0..grid.xis.len())
        .filter(|&k| norm(&grid.xis[k]) >= r_min)
        .collect();
    if xi_idx.is_empty() || grid.xs.is_empty() {
        return Err(DnError::Input(format!(
            "empty sample grid for |xi| >= {r_min}"
        )));
    }
    for p in grid.xis.iter().chain(&grid.xs) {
        if p.len() != sys.dim {
            return Err(DnError::Input(
                "grid point dimension does not match the system".into(),
            ));
        }
    }
    let nx = if sys.is_constant() { 1 } else { grid.xs.len() };
    let base = sector.lambda_samples();
    let q = sys.q;
    let pts: Vec<(usize, usize)> = (0..nx)
        .flat_map(|ix| xi_idx.iter().map(move |&k| (ix, k)))
        .collect();
    let partial: Vec<Result<Best>> = pts
        .par_iter()
        .map(|&(ix, k)| {
            let x = &grid.xs[ix];
            let xi = &grid.xis[k];
            let a = sys.eval_matrix(x, xi)?;
            let br = bracket(xi);
            let scaled = br > SCALING_THRESHOLD;
            let mut best = Best {
                ratio: f64::INFINITY,
                x: ix,
                xi: k,
                lambda: Complex64::new(0.0, 0.0),
                kappa: q,
                samples: 0,
            };
            let consider = |lam: Complex64, kappa: usize, best: &mut Best| {
                let v = match mode {
                    CheckMode::Determinant => {
                        if scaled {
                            det_ratio_scaled(&a, &sys.l, &sys.m, br, lam)
                        } else {
                            det_ratio_raw(&a, &sys.r, br, lam)
                        }
                    }
                    _ => {
                        if scaled {
                            minor_ratio_scaled(&a, &sys.l, &sys.m, br, lam, kappa)
                        } else {
                            minor_ratio_raw(&a, &sys.r, br, lam, kappa)
                        }
                    }
                };
                let v = if v.is_nan() { 0.0 } else { v };
                best.samples += 1;
                if v < best.ratio {
                    best.ratio = v;
                    best.lambda = lam;
                    best.kappa = kappa;
                }
            };
            match mode {
                CheckMode::Determinant => {
                    let mut lams = base.clone();
                    if a.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
                        if let Ok((vals, _)) = eig(&a) {
                            lams.extend(vals.into_iter().filter(|z| sector.contains(*z)));
                        }
                    }
                    for lam in lams {
                        consider(lam, q, &mut best);
                    }
                }
                _ => {
                    let mut prev = Complex64::new(1.0, 0.0);
                    for kappa in 1..=q {
                        let cur = det(&a.view((0, 0), (kappa, kappa)).into_owned());
                        let mut lams = base.clone();
                        if prev.norm() > 0.0 {
                            let root = cur / prev;
                            if sector.contains(root) {
                                lams.push(root);
                            }
                        }
                        for lam in lams {
                            consider(lam, kappa, &mut best);
                        }
                        prev = cur;
                    }
                }
            }
            Ok(best)
        })
        .collect();
    let mut total = 0;
    let mut best: Option<Best> = None;
    for b in partial {
        let b = b?;
        total += b.samples;
        if best.as_ref().is_none_or(|cur| b.ratio < cur.ratio) {
            best = Some(b);
        }
    }
    let best = best.expect("nonempty sample set");
    let passed = best.ratio >= threshold;
    Ok(EllipticityReport {
        passed,
        c_lower: best.ratio,
        r_used: r_min,
        witness: Some(Witness {
            x: grid.xs[best.x].clone(),
            xi: grid.xis[best.xi].clone(),
            lambda_re: best.lambda.re,
            lambda_im: best.lambda.im,
            kappa: best.kappa,
        }),
        mode,
        samples: total,
    })
}

/// Determinant-form certificate over samples with |ξ| ≥ R.
pub fn check_det_ellipticity(
    sys: &DNSystem,
    sector: &Sector,
    grid: &EllipticityGrid,
    r: f64,
    threshold: f64,
) -> Result<EllipticityReport> {
    run_check(sys, sector, grid, r, threshold, CheckMode::Determinant)
}

/// Principal-minor certificate over samples with |ξ| ≥ R.
pub fn check_minor_ellipticity(
    sys: &DNSystem,
    sector: &Sector,
    grid: &EllipticityGrid,
    r: f64,
    threshold: f64,
) -> Result<EllipticityReport> {
    run_check(sys, sector, grid, r, threshold, CheckMode::Minors)
}

/// Try R ∈ {0, 1, 2, 4, …} up to the largest sampled |ξ| and return the
/// first passing report, or the last failing one.
pub fn search_r(
    sys: &DNSystem,
    sector: &Sector,
    grid: &EllipticityGrid,
    threshold: f64,
    mode: CheckMode,
) -> Result<EllipticityReport> {
    let xi_max = grid.xis.iter().map(|v| norm(v)).fold(0.0, f64::max);
    let mut r = 0.0;
    let mut last = None;
    while r <= xi_max {
        let rep = run_check(sys, sector, grid, r, threshold, mode)?;
        if rep.passed {
            return Ok(rep);
        }
        last = Some(rep);
        r = if r == 0.0 { 1.0 } else { 2.0 * r };
    }
    last.ok_or_else(|| DnError::Input("empty sample grid".into()))
}

/// Smallest shift α₀ found for which A + α₀ passes with R = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftResult {
    pub alpha0: f64,
    pub report_at_alpha0: EllipticityReport,
}

/// Search configuration for [`find_shift`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSearch {
    pub alpha_max: f64,
    /// Absolute bisection tolerance.
    pub tolerance: f64,
}

impl Default for ShiftSearch {
    fn default() -> Self {
        ShiftSearch {
            alpha_max: 1e6,
            tolerance: 1e-4,
        }
    }
}

/// Doubling-then-bisection search for the smallest passing shift.
pub fn find_shift(
    sys: &DNSystem,
    sector: &Sector,
    grid: &EllipticityGrid,
    threshold: f64,
    search: ShiftSearch,
) -> Result<ShiftResult> {
    let check =
        |alpha: f64| check_det_ellipticity(&sys.shifted(alpha), sector, grid, 0.0, threshold);
    let rep0 = check(0.0)?;
    if rep0.passed {
        return Ok(ShiftResult {
            alpha0: 0.0,
            report_at_alpha0: rep0,
        });
    }
    let mut lo = 0.0;
    let mut hi = search.tolerance.max(1e-12);
    let mut hi_rep;
    loop {
        let rep = check(hi)?;
        if rep.passed {
            hi_rep = rep;
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > search.alpha_max {
            return Err(DnError::NotFound(format!(
                "no passing shift up to alpha_max = {}",
                search.alpha_max
            )));
        }
    }
    while hi - lo > search.tolerance {
        let mid = 0.5 * (lo + hi);
        let rep = check(mid)?;
        if rep.passed {
            hi = mid;
            hi_rep = rep;
        } else {
            lo = mid;
        }
    }
    Ok(ShiftResult {
        alpha0: hi,
        report_at_alpha0: hi_rep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::{ScalarSymbol, SymbolExpr};

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn scalar(expr: SymbolExpr, order: f64) -> DNSystem {
        DNSystem::diagonal(vec![ScalarSymbol::from_expr(expr, 1, order, 0.0).unwrap()]).unwrap()
    }

    #[test]
    fn sector_membership() {
        let s = Sector::new(PI / 2.0).unwrap();
        assert!(s.contains(c(0.0)));
        assert!(s.contains(c(-1.0)));
        assert!(s.contains(Complex64::new(0.0, 1.0)));
        assert!(!s.contains(c(1.0)));
        for lam in s.lambda_samples() {
            assert!(s.contains(lam));
        }
        assert!(Sector::new(0.0).is_err());
        assert!(Sector::new(PI).is_err());
    }

    #[test]
    fn char_poly_examples() {
        let sys = scalar(SymbolExpr::bracket(2.0), 2.0);
        assert!(char_poly(&sys, &[0.0], &[0.0], c(1.0)).unwrap().norm() < 1e-15);
        let d = DNSystem::diagonal(vec![
            ScalarSymbol::bracket_pow(1, 2.0),
            ScalarSymbol::bracket_pow(1, 1.0),
        ])
        .unwrap();
        let xi = [1.5];
        let lam = Complex64::new(-0.3, 0.7);
        let a = bracket(&xi).powi(2);
        let b = bracket(&xi);
        let p = char_poly(&d, &[0.0], &xi, lam).unwrap();
        assert!((p - (a - lam) * (b - lam)).norm() < 1e-13);
    }

    #[test]
    fn bracket_squared_passes() {
        let sys = scalar(SymbolExpr::bracket(2.0), 2.0);
        let s = Sector::new(PI / 2.0).unwrap();
        let g = EllipticityGrid::default_for(1);
        let rep = check_det_ellipticity(&sys, &s, &g, 0.0, 1e-6).unwrap();
        assert!(rep.passed);
        assert!(rep.c_lower >= 0.7, "{}", rep.c_lower);
        let rep2 = check_minor_ellipticity(&sys, &s, &g, 0.0, 1e-6).unwrap();
        assert_eq!(rep.c_lower, rep2.c_lower);
    }

    #[test]
    fn negative_bracket_fails_with_witness() {
        let sys = scalar(SymbolExpr::bracket(2.0).scaled(c(-1.0)), 2.0);
        let s = Sector::new(PI / 2.0).unwrap();
        let g = EllipticityGrid::default_for(1);
        let rep = check_det_ellipticity(&sys, &s, &g, 0.0, 1e-6).unwrap();
        assert!(!rep.passed);
        let w = rep.witness.unwrap();
        let expect = -bracket(&w.xi).powi(2);
        assert!((w.lambda_re - expect).abs() < 1e-9 * expect.abs());
        assert!(w.lambda_im.abs() < 1e-12);
    }

    #[test]
    fn scaled_ratio_matches_raw_on_diagonal() {
        let a = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![c(3e8), c(2e4), c(5.0)]));
        let r = [2.0, 1.0, 0.0];
        let (l, m) = ([2.0, 1.0, 0.0], [0.0, 0.0, 0.0]);
        let br = 1e4;
        let lam = Complex64::new(-7.0, 1e3);
        let raw = det_ratio_raw(&a, &r, br, lam);
        let sc = det_ratio_scaled(&a, &l, &m, br, lam);
        assert!((raw - sc).abs() <= 1e-14 * raw);
        for kappa in 1..=3 {
            let raw = minor_ratio_raw(&a, &r, br, lam, kappa);
            let sc = minor_ratio_scaled(&a, &l, &m, br, lam, kappa);
            assert!((raw - sc).abs() <= 1e-14 * raw);
        }
    }

    #[test]
    fn triangular_minor_check_passes() {
        let e = |p: f64, c0: f64| {
            ScalarSymbol::from_expr(SymbolExpr::bracket(p).scaled(c(c0)), 1, p, 0.0).unwrap()
        };
        let rows = vec![
            vec![e(2.0, 1.5), e(1.5, 4.0)],
            vec![ScalarSymbol::zero(1), e(1.0, 0.5)],
        ];
        let sys = DNSystem::new(rows, vec![2.0, 1.0], vec![0.0, 0.0]).unwrap();
        let s = Sector::new(PI / 2.0).unwrap();
        let g = EllipticityGrid::default_for(1);
        assert!(
            check_minor_ellipticity(&sys, &s, &g, 0.0, 1e-6)
                .unwrap()
                .passed
        );
        assert!(
            check_det_ellipticity(&sys, &s, &g, 0.0, 1e-6)
                .unwrap()
                .passed
        );
    }

    #[test]
    fn shift_examples() {
        let s = Sector::new(PI / 2.0).unwrap();
        let g = EllipticityGrid::default_for(1);
        let sys = scalar(SymbolExpr::bracket(2.0), 2.0);
        let res = find_shift(&sys, &s, &g, 1e-6, ShiftSearch::default()).unwrap();
        assert_eq!(res.alpha0, 0.0);

        // P = ⟨ξ⟩² − 5 + α − λ vanishes at ξ = 0, λ = 0 for α = 4.
        let sys = scalar(SymbolExpr::bracket(2.0).plus(SymbolExpr::real(-5.0)), 2.0);
        let res = find_shift(&sys, &s, &g, 1e-6, ShiftSearch::default()).unwrap();
        assert!(
            res.alpha0 >= 4.0 && res.alpha0 <= 4.0 + 2e-4,
            "{}",
            res.alpha0
        );
        assert!(res.report_at_alpha0.passed);
        assert_eq!(res.report_at_alpha0.r_used, 0.0);
    }

    #[test]
    fn shift_cap_reports_not_found() {
        let s = Sector::new(PI / 2.0).unwrap();
        let g = EllipticityGrid::dyadic(1, 0, 4, 1);
        let sys = scalar(SymbolExpr::bracket(2.0).scaled(c(-1.0)), 2.0);
        let err = find_shift(
            &sys,
            &s,
            &g,
            1e-6,
            ShiftSearch {
                alpha_max: 10.0,
                tolerance: 1e-3,
            },
        )
        .unwrap_err();
        assert!(matches!(err, DnError::NotFound(_)));
    }
}
