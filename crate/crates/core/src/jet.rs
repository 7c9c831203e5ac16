//! Truncated multivariate Taylor polynomials with complex coefficients.
//!
//! A [`Jet`] stores the coefficients c_γ of Σ c_γ h^γ for all multi-indices
//! |γ| ≤ degree. Partial derivatives are recovered as γ!·c_γ.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;

/// Multi-index layout shared by all jets of one (nvars, degree).
#[derive(Debug)]
pub struct JetShape {
    pub nvars: usize,
    pub degree: usize,
    /// Multi-indices ordered by total degree.
    pub indices: Vec<Vec<u8>>,
    /// Total degree of each multi-index.
    pub total: Vec<usize>,
    lookup: Vec<u32>,
    /// (i, j, k) with indices[i] + indices[j] = indices[k].
    mul_table: Vec<(u32, u32, u32)>,
}

const NONE: u32 = u32::MAX;

impl JetShape {
    fn build(nvars: usize, degree: usize) -> Self {
        let mut indices: Vec<Vec<u8>> = Vec::new();
        for d in 0..=degree {
            let mut cur = vec![0u8; nvars];
            enumerate(nvars, d, 0, &mut cur, &mut indices);
        }
        let base = degree + 1;
        let size = base.pow(nvars as u32);
        let mut lookup = vec![NONE; size];
        for (k, idx) in indices.iter().enumerate() {
            lookup[encode(idx, base)] = k as u32;
        }
        let total: Vec<usize> = indices
            .iter()
            .map(|v| v.iter().map(|&a| a as usize).sum())
            .collect();
        let mut mul_table = Vec::new();
        for (i, a) in indices.iter().enumerate() {
            for (j, b) in indices.iter().enumerate() {
                if total[i] + total[j] > degree {
                    continue;
                }
                let s: Vec<u8> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                let k = lookup[encode(&s, base)];
                mul_table.push((i as u32, j as u32, k));
            }
        }
        JetShape {
            nvars,
            degree,
            indices,
            total,
            lookup,
            mul_table,
        }
    }

    /// Position of a multi-index, or `None` if its degree is too high.
    pub fn position(&self, idx: &[u8]) -> Option<usize> {
        if idx.len() != self.nvars {
            return None;
        }
        let t: usize = idx.iter().map(|&a| a as usize).sum();
        if t > self.degree {
            return None;
        }
        let k = self.lookup[encode(idx, self.degree + 1)];
        (k != NONE).then_some(k as usize)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Cached shape for the given layout.
    pub fn get(nvars: usize, degree: usize) -> Arc<JetShape> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<JetShape>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("jet shape cache poisoned");
        guard
            .entry((nvars, degree))
            .or_insert_with(|| Arc::new(JetShape::build(nvars, degree)))
            .clone()
    }
}

fn encode(idx: &[u8], base: usize) -> usize {
    idx.iter().fold(0usize, |acc, &a| acc * base + a as usize)
}

fn enumerate(
    nvars: usize,
    remaining: usize,
    pos: usize,
    cur: &mut Vec<u8>,
    out: &mut Vec<Vec<u8>>,
) {
    if pos + 1 == nvars {
        cur[pos] = remaining as u8;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for a in (0..=remaining).rev() {
        cur[pos] = a as u8;
        enumerate(nvars, remaining - a, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

/// Factorial of a multi-index.
pub fn multi_factorial(idx: &[u8]) -> f64 {
    idx.iter().map(|&a| factorial(a as usize)).product()
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, v| acc * v as f64)
}

/// Truncated Taylor polynomial.
#[derive(Debug, Clone)]
pub struct Jet {
    shape: Arc<JetShape>,
    pub coeffs: Vec<Complex64>,
}

impl Jet {
    pub fn zero(nvars: usize, degree: usize) -> Self {
        let shape = JetShape::get(nvars, degree);
        let coeffs = vec![Complex64::new(0.0, 0.0); shape.len()];
        Jet { shape, coeffs }
    }

    pub fn constant(nvars: usize, degree: usize, c: Complex64) -> Self {
        let mut j = Self::zero(nvars, degree);
        j.coeffs[0] = c;
        j
    }

    /// The jet of the coordinate function `var` expanded at `value`.
    pub fn variable(nvars: usize, degree: usize, var: usize, value: f64) -> Self {
        let mut j = Self::constant(nvars, degree, Complex64::new(value, 0.0));
        if degree >= 1 {
            let mut idx = vec![0u8; nvars];
            idx[var] = 1;
            let k = j.shape.position(&idx).expect("degree one index");
            j.coeffs[k] = Complex64::new(1.0, 0.0);
        }
        j
    }

    pub fn shape(&self) -> &Arc<JetShape> {
        &self.shape
    }

    pub fn nvars(&self) -> usize {
        self.shape.nvars
    }

    pub fn degree(&self) -> usize {
        self.shape.degree
    }

    pub fn value(&self) -> Complex64 {
        self.coeffs[0]
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    pub fn coeff(&self, idx: &[u8]) -> Complex64 {
        match self.shape.position(idx) {
            Some(k) => self.coeffs[k],
            None => Complex64::new(0.0, 0.0),
        }
    }

    /// Plain partial derivative ∂^idx at the expansion point.
    pub fn derivative(&self, idx: &[u8]) -> Complex64 {
        self.coeff(idx) * multi_factorial(idx)
    }

    /// The jet of ∂^idx f truncated to `degree`; requires
    /// `degree + |idx| <= self.degree()`.
    pub fn partial(&self, idx: &[u8], degree: usize) -> Jet {
        let order: usize = idx.iter().map(|&a| a as usize).sum();
        assert!(degree + order <= self.degree(), "jet too short for partial");
        let shape = JetShape::get(self.nvars(), degree);
        let mut coeffs = Vec::with_capacity(shape.len());
        let mut shifted = vec![0u8; self.nvars()];
        for g in &shape.indices {
            let mut ratio = 1.0;
            for v in 0..g.len() {
                shifted[v] = g[v] + idx[v];
                for t in (g[v] as usize + 1)..=(shifted[v] as usize) {
                    ratio *= t as f64;
                }
            }
            coeffs.push(self.coeff(&shifted) * ratio);
        }
        Jet { shape, coeffs }
    }

    /// Truncate to a lower degree.
    pub fn truncate(&self, degree: usize) -> Jet {
        self.partial(&vec![0u8; self.nvars()], degree)
    }

    pub fn add(&self, other: &Jet) -> Jet {
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a + b)
            .collect();
        Jet {
            shape: self.shape.clone(),
            coeffs,
        }
    }

    pub fn sub(&self, other: &Jet) -> Jet {
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a - b)
            .collect();
        Jet {
            shape: self.shape.clone(),
            coeffs,
        }
    }

    pub fn scale(&self, s: Complex64) -> Jet {
        let coeffs = self.coeffs.iter().map(|a| a * s).collect();
        Jet {
            shape: self.shape.clone(),
            coeffs,
        }
    }

    pub fn add_const(&self, c: Complex64) -> Jet {
        let mut j = self.clone();
        j.coeffs[0] += c;
        j
    }

    pub fn mul(&self, other: &Jet) -> Jet {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); self.coeffs.len()];
        for &(i, j, k) in &self.shape.mul_table {
            let a = self.coeffs[i as usize];
            if a.re == 0.0 && a.im == 0.0 {
                continue;
            }
            coeffs[k as usize] += a * other.coeffs[j as usize];
        }
        Jet {
            shape: self.shape.clone(),
            coeffs,
        }
    }

    /// f ∘ self, where `derivs[k]` = f⁽ᵏ⁾ at the constant term.
    pub fn compose(&self, derivs: &[Complex64]) -> Jet {
        let deg = self.degree();
        let mut h = self.clone();
        h.coeffs[0] = Complex64::new(0.0, 0.0);
        let mut out = Jet::constant(self.nvars(), deg, derivs[0]);
        let mut power = Jet::constant(self.nvars(), deg, Complex64::new(1.0, 0.0));
        for (k, d) in derivs.iter().enumerate().take(deg + 1).skip(1) {
            power = power.mul(&h);
            if power.is_zero() {
                break;
            }
            let c = d / factorial(k);
            out = out.add(&power.scale(c));
        }
        out
    }

    /// self^p for real p; the constant term must be nonzero unless p is a
    /// non-negative integer.
    pub fn powf(&self, p: f64) -> Jet {
        let c = self.value();
        let deg = self.degree();
        if p.fract() == 0.0 && p >= 0.0 && (p as usize) <= 64 {
            let mut out = Jet::constant(self.nvars(), deg, Complex64::new(1.0, 0.0));
            for _ in 0..(p as usize) {
                out = out.mul(self);
            }
            return out;
        }
        let mut derivs = Vec::with_capacity(deg + 1);
        let mut falling = 1.0;
        for k in 0..=deg {
            derivs.push(falling * cpowf(c, p - k as f64));
            falling *= p - k as f64;
        }
        self.compose(&derivs)
    }

    pub fn recip(&self) -> Jet {
        let c = self.value();
        let deg = self.degree();
        let inv = 1.0 / c;
        let mut derivs = Vec::with_capacity(deg + 1);
        let mut term = inv;
        for k in 0..=deg {
            derivs.push(term);
            term = term * inv * (-((k + 1) as f64));
        }
        self.compose(&derivs)
    }

    pub fn sqrt(&self) -> Jet {
        self.powf(0.5)
    }

    pub fn exp(&self) -> Jet {
        let e = self.value().exp();
        let derivs = vec![e; self.degree() + 1];
        self.compose(&derivs)
    }

    pub fn sin(&self) -> Jet {
        let c = self.value();
        let (s, co) = (c.sin(), c.cos());
        let derivs: Vec<Complex64> = (0..=self.degree())
            .map(|k| match k % 4 {
                0 => s,
                1 => co,
                2 => -s,
                _ => -co,
            })
            .collect();
        self.compose(&derivs)
    }

    pub fn cos(&self) -> Jet {
        let c = self.value();
        let (s, co) = (c.sin(), c.cos());
        let derivs: Vec<Complex64> = (0..=self.degree())
            .map(|k| match k % 4 {
                0 => co,
                1 => -s,
                2 => -co,
                _ => s,
            })
            .collect();
        self.compose(&derivs)
    }
}

/// Complex power with a real exponent, exact for positive reals.
pub fn cpowf(c: Complex64, p: f64) -> Complex64 {
    if c.im == 0.0 && c.re > 0.0 {
        Complex64::new(c.re.powf(p), 0.0)
    } else if c.re == 0.0 && c.im == 0.0 {
        if p == 0.0 {
            Complex64::new(1.0, 0.0)
        } else if p > 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(f64::INFINITY, 0.0)
        }
    } else {
        c.powf(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn shape_counts() {
        let s = JetShape::get(2, 3);
        assert_eq!(s.len(), 10);
        let s = JetShape::get(4, 4);
        assert_eq!(s.len(), 70);
        assert_eq!(s.position(&[0, 0, 0, 0]), Some(0));
        assert_eq!(s.position(&[5, 0, 0, 0]), None);
    }

    #[test]
    fn product_of_variables() {
        let x = Jet::variable(2, 3, 0, 2.0);
        let y = Jet::variable(2, 3, 1, 3.0);
        let p = x.mul(&y);
        assert_eq!(p.value(), c(6.0));
        assert_eq!(p.derivative(&[1, 0]), c(3.0));
        assert_eq!(p.derivative(&[0, 1]), c(2.0));
        assert_eq!(p.derivative(&[1, 1]), c(1.0));
        assert_eq!(p.derivative(&[2, 0]), c(0.0));
    }

    #[test]
    fn bracket_power_derivatives() {
        // f(t) = (1 + t²)^{3/2}; f' = 3t(1+t²)^{1/2}; f'' = 3(1+2t²)/(1+t²)^{1/2}
        let t0 = 0.7;
        let t = Jet::variable(1, 4, 0, t0);
        let f = t.mul(&t).add_const(c(1.0)).powf(1.5);
        let b = 1.0 + t0 * t0;
        assert!((f.value().re - b.powf(1.5)).abs() < 1e-14);
        assert!((f.derivative(&[1]).re - 3.0 * t0 * b.sqrt()).abs() < 1e-13);
        assert!((f.derivative(&[2]).re - 3.0 * (1.0 + 2.0 * t0 * t0) / b.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn partial_shifts_coefficients() {
        // f = x³y² ; ∂x f = 3x²y² ; at (2, 1): value 12, ∂y(∂x f) = 6x²y = 24
        let x = Jet::variable(2, 5, 0, 2.0);
        let y = Jet::variable(2, 5, 1, 1.0);
        let f = x.mul(&x).mul(&x).mul(&y).mul(&y);
        let fx = f.partial(&[1, 0], 2);
        assert_eq!(fx.value(), c(12.0));
        assert_eq!(fx.derivative(&[0, 1]), c(24.0));
        assert_eq!(fx.derivative(&[1, 1]), c(24.0));
    }

    #[test]
    fn sin_cos_exp_recip() {
        let t0 = 0.3;
        let t = Jet::variable(1, 5, 0, t0);
        let s = t.sin();
        for k in 0..=5 {
            let expect = (t0 + k as f64 * std::f64::consts::FRAC_PI_2).sin();
            assert!((s.derivative(&[k as u8]).re - expect).abs() < 1e-12);
        }
        let e = t.exp();
        assert!((e.derivative(&[4]).re - t0.exp()).abs() < 1e-12);
        let r = t.recip();
        assert!((r.derivative(&[3]).re + 6.0 / t0.powi(4)).abs() < 1e-9);
        let one = t.sin().mul(&t.sin()).add(&t.cos().mul(&t.cos()));
        assert!((one.value().re - 1.0).abs() < 1e-14);
        for k in 1..one.coeffs.len() {
            assert!(one.coeffs[k].norm() < 1e-13);
        }
    }
}
