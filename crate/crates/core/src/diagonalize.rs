//! Order reduction and diagonalization of DN systems by conjugation.
//!
//! B = L A L⁻¹ with L = diag(⟨D⟩^{−lᵢ}) has entries b_ij of order rⱼ.
//! The conjugator S = S⁽⁰⁾ + S⁽¹⁾ + … (unit diagonal in S⁽⁰⁾, zero diagonal
//! in the corrections) and D = D⁽⁰⁾ + D⁽¹⁾ + … satisfy B#S − S#D ≈ 0.
//!
//! The literal leading step solves, column by column,
//! B[j−1]·(s₁ⱼ…s_{j−1,j}) = −(b₁ⱼ…b_{j−1,j}), dⱼⱼ = bⱼⱼ + Σ_{k<j} bⱼₖsₖⱼ,
//! sᵢⱼ = (Σ_{k≤j} bᵢₖsₖⱼ)/dⱼⱼ for i > j, which gives dⱼⱼ = det B[j]/det B[j−1].
//! The exact step replaces the columns by unit-normalized eigenvectors of
//! B(x, ξ), matched to the literal solution and polished by Newton.
//! Column indices are 0-based.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretize::{quantize_matrix_symbol, TorusGrid};
use crate::ellipticity::{minor_det, CheckMode, EllipticityReport, Sector, Witness};
use crate::error::{DnError, Result};
use crate::jet::Jet;
use crate::linalg::{cond2, det, eig, linear_fit, norm2, CMat};
use crate::symbols::{
    bracket, leibniz_compose_truncated, norm, DNSystem, SamplingGrid, ScalarSymbol, SymbolKind,
};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// B = L A L⁻¹ as a DN system with l' = 0 and m' = r.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub base: DNSystem,
    pub system: DNSystem,
    pub l: Vec<f64>,
    /// Leibniz truncation used for variable entries.
    pub nc: usize,
}

impl ReducedSystem {
    pub fn q(&self) -> usize {
        self.system.q
    }

    pub fn r(&self) -> &[f64] {
        &self.system.r
    }

    pub fn eval(&self, x: &[f64], xi: &[f64]) -> Result<CMat> {
        self.system.eval_matrix(x, xi)
    }
}

/// Order reduction with the default truncation N_c = 2.
pub fn reduce_orders(sys: &DNSystem) -> Result<ReducedSystem> {
    reduce_orders_with(sys, 2)
}

/// b_ij = ⟨ξ⟩^{−lᵢ} # a_ij⟨ξ⟩^{lⱼ}; exact for constant-coefficient entries.
pub fn reduce_orders_with(sys: &DNSystem, nc: usize) -> Result<ReducedSystem> {
    if nc == 0 {
        return Err(DnError::Input(
            "Leibniz truncation must be at least 1".into(),
        ));
    }
    let q = sys.q;
    let mut rows = Vec::with_capacity(q);
    for i in 0..q {
        let mut row = Vec::with_capacity(q);
        for j in 0..q {
            let a = sys.entry(i, j);
            if a.order == f64::NEG_INFINITY {
                row.push(a.clone());
                continue;
            }
            let right = a.pointwise_product(
                &ScalarSymbol::bracket_pow(sys.dim, sys.l[j]).with_delta(a.delta),
            )?;
            let left = ScalarSymbol::bracket_pow(sys.dim, -sys.l[i]).with_delta(a.delta);
            let b = if sys.l[i] == 0.0 {
                right
            } else if a.kind == SymbolKind::ConstantCoefficient {
                left.pointwise_product(&right)?
            } else {
                leibniz_compose_truncated(&left, &right, nc)?
            };
            row.push(b.with_order(sys.r[j]));
        }
        rows.push(row);
    }
    let zeros = vec![0.0; q];
    let system = if sys.orders_valid() {
        DNSystem::new(rows, zeros, sys.r.clone())?
    } else {
        DNSystem::new_unordered(rows, zeros, sys.r.clone())?
    };
    Ok(ReducedSystem {
        base: sys.clone(),
        system,
        l: sys.l.clone(),
        nc,
    })
}

/// Column j of S⁽⁰⁾ and dⱼⱼ⁽⁰⁾.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSolution {
    pub s: Vec<Complex64>,
    pub d: Complex64,
}

fn singular(x: &[f64], xi: &[f64], j: usize, detail: &str) -> DnError {
    DnError::Singular {
        x: x.to_vec(),
        xi: xi.to_vec(),
        lambda: "n/a".into(),
        detail: format!("column {j}: {detail}"),
    }
}

/// Literal Cramer step on a matrix value B.
pub fn leading_column(b: &CMat, j: usize) -> std::result::Result<ColumnSolution, String> {
    let q = b.nrows();
    if j >= q {
        return Err(format!("column index {j} out of range"));
    }
    let mut s = vec![ZERO; q];
    s[j] = ONE;
    if j > 0 {
        let minor = b.view((0, 0), (j, j)).into_owned();
        let rhs = -b.view((0, j), (j, 1)).into_owned();
        let scale = minor.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if scale == 0.0 || cond2(&minor) > 1e12 {
            return Err(format!("leading minor B[{j}] is singular"));
        }
        let sol = minor
            .lu()
            .solve(&rhs)
            .ok_or_else(|| format!("leading minor B[{j}] is singular"))?;
        for k in 0..j {
            s[k] = sol[(k, 0)];
        }
    }
    let d = b[(j, j)] + (0..j).map(|k| b[(j, k)] * s[k]).sum::<Complex64>();
    if d == ZERO {
        return Err("diagonal entry vanishes".into());
    }
    for i in (j + 1)..q {
        s[i] = (0..=j).map(|k| b[(i, k)] * s[k]).sum::<Complex64>() / d;
    }
    Ok(ColumnSolution { s, d })
}

/// Literal leading diagonalization of column j at (x, ξ).
pub fn leading_diagonalization(
    red: &ReducedSystem,
    j: usize,
    x: &[f64],
    xi: &[f64],
) -> Result<ColumnSolution> {
    let b = red.eval(x, xi)?;
    leading_column(&b, j).map_err(|e| singular(x, xi, j, &e))
}

/// Newton polish of B s = d s with s_j = 1.
fn newton_column(b: &CMat, j: usize, s: &mut [Complex64], d: &mut Complex64) {
    let q = b.nrows();
    for _ in 0..4 {
        let mut f = vec![ZERO; q];
        for i in 0..q {
            f[i] = (0..q).map(|k| b[(i, k)] * s[k]).sum::<Complex64>() - *d * s[i];
        }
        let jac = column_jacobian(b, j, s, *d);
        let Some(delta) = jac.lu().solve(&DMatrix::from_column_slice(q, 1, &f)) else {
            return;
        };
        for k in 0..q {
            if k == j {
                *d -= delta[(k, 0)];
            } else {
                s[k] -= delta[(k, 0)];
            }
        }
    }
}

fn column_jacobian(b: &CMat, j: usize, s: &[Complex64], d: Complex64) -> CMat {
    let q = b.nrows();
    let mut jac = CMat::zeros(q, q);
    for i in 0..q {
        for k in 0..q {
            jac[(i, k)] = if k == j {
                -s[i]
            } else {
                b[(i, k)] - if i == k { d } else { ZERO }
            };
        }
    }
    jac
}

fn permutations(q: usize) -> Vec<Vec<usize>> {
    if q == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(q - 1) {
        for pos in 0..q {
            let mut v = p.clone();
            v.insert(pos, q - 1);
            out.push(v);
        }
    }
    out
}

/// Exact pointwise diagonalization B S = S D with diag(S) = 1.
pub fn exact_diagonalization(b: &CMat) -> std::result::Result<(CMat, Vec<Complex64>), String> {
    let q = b.nrows();
    let (vals, vecs) = eig(b).map_err(|e| e.to_string())?;
    let seeds: Vec<Option<Complex64>> = (0..q)
        .map(|j| leading_column(b, j).ok().map(|c| c.d))
        .collect();
    let assign: Vec<usize> = if q <= 6 && seeds.iter().all(|s| s.is_some()) {
        let mut best = (f64::INFINITY, Vec::new());
        for p in permutations(q) {
            let cost: f64 = (0..q)
                .map(|j| {
                    let d = seeds[j].expect("seed");
                    (vals[p[j]] - d).norm() / d.norm().max(f64::MIN_POSITIVE)
                })
                .sum();
            if cost < best.0 {
                best = (cost, p);
            }
        }
        best.1
    } else {
        let mut idx: Vec<usize> = (0..q).collect();
        idx.sort_by(|&a, &c| {
            vals[c]
                .norm()
                .partial_cmp(&vals[a].norm())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        idx
    };
    let mut s = CMat::zeros(q, q);
    let mut d = vec![ZERO; q];
    let scale = vals
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for j in 0..q {
        let col = vecs.column(assign[j]);
        let pivot = col[j];
        if pivot.norm() < 1e-13 {
            return Err(format!("eigenvector for column {j} has no component {j}"));
        }
        let mut sj: Vec<Complex64> = col.iter().map(|v| v / pivot).collect();
        sj[j] = ONE;
        let mut dj = vals[assign[j]];
        newton_column(b, j, &mut sj, &mut dj);
        if !dj.re.is_finite() || (dj - vals[assign[j]]).norm() > 1e-6 * scale {
            return Err(format!("Newton refinement for column {j} drifted"));
        }
        for i in 0..q {
            s[(i, j)] = sj[i];
        }
        d[j] = dj;
    }
    Ok((s, d))
}

/// Which leading step to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadingMode {
    Literal,
    Exact,
}

/// Diagonalization to order N ∈ {1, 2}.
#[derive(Debug, Clone)]
pub struct Diagonalization {
    pub red: ReducedSystem,
    pub n: usize,
    pub mode: LeadingMode,
}

/// Conjugator terms S⁽ᵛ⁾ at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Conjugator {
    pub s_terms: Vec<CMat>,
}

/// Diagonal terms d⁽ᵛ⁾ⱼⱼ at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalPart {
    pub d_terms: Vec<Vec<Complex64>>,
}

impl Conjugator {
    pub fn total(&self) -> CMat {
        self.s_terms.iter().fold(
            CMat::zeros(self.s_terms[0].nrows(), self.s_terms[0].ncols()),
            |a, b| a + b,
        )
    }
}

impl DiagonalPart {
    pub fn total(&self) -> Vec<Complex64> {
        let q = self.d_terms[0].len();
        (0..q)
            .map(|j| self.d_terms.iter().map(|d| d[j]).sum())
            .collect()
    }
}

pub fn build_diagonalization(
    red: &ReducedSystem,
    n: usize,
    mode: LeadingMode,
) -> Result<Diagonalization> {
    if !(1..=2).contains(&n) {
        return Err(DnError::Input(format!(
            "diagonalization is implemented for N = 1, 2; got {n}"
        )));
    }
    if n == 2 && mode == LeadingMode::Literal {
        return Err(DnError::Input(
            "the N = 2 correction needs the exact leading step".into(),
        ));
    }
    Ok(Diagonalization {
        red: red.clone(),
        n,
        mode,
    })
}

type JMat = Vec<Jet>;

fn jmat_value(m: &JMat, q: usize) -> CMat {
    CMat::from_fn(q, q, |i, j| m[i * q + j].value())
}

fn jmat_mul(a: &JMat, b: &JMat, q: usize) -> JMat {
    let mut out = Vec::with_capacity(q * q);
    for i in 0..q {
        for j in 0..q {
            let mut acc = a[i * q].mul(&b[j]);
            for k in 1..q {
                acc = acc.add(&a[i * q + k].mul(&b[k * q + j]));
            }
            out.push(acc);
        }
    }
    out
}

fn jmat_sub(a: &JMat, b: &JMat) -> JMat {
    a.iter().zip(b).map(|(x, y)| x.sub(y)).collect()
}

fn jmat_add(a: &JMat, b: &JMat) -> JMat {
    a.iter().zip(b).map(|(x, y)| x.add(y)).collect()
}

fn jmat_truncate(a: &JMat, degree: usize) -> JMat {
    a.iter().map(|x| x.truncate(degree)).collect()
}

fn jdiag(d: &[Jet], q: usize) -> JMat {
    let nv = d[0].nvars();
    let deg = d[0].degree();
    (0..q * q)
        .map(|t| {
            if t / q == t % q {
                d[t / q].clone()
            } else {
                Jet::zero(nv, deg)
            }
        })
        .collect()
}

/// First-order Leibniz term Σ_v ∂_{ξ_v}P · (−i)∂_{x_v}Q, of degree deg − 1.
fn leibniz_first(p: &JMat, qm: &JMat, q: usize, dim: usize) -> JMat {
    let deg = p[0].degree();
    let nv = 2 * dim;
    let mut out: Option<JMat> = None;
    for v in 0..dim {
        let mut ixi = vec![0u8; nv];
        ixi[dim + v] = 1;
        let mut ix = vec![0u8; nv];
        ix[v] = 1;
        let dp: JMat = p.iter().map(|e| e.partial(&ixi, deg - 1)).collect();
        let dq: JMat = qm
            .iter()
            .map(|e| e.partial(&ix, deg - 1).scale(Complex64::new(0.0, -1.0)))
            .collect();
        let t = jmat_mul(&dp, &dq, q);
        out = Some(match out {
            None => t,
            Some(o) => jmat_add(&o, &t),
        });
    }
    out.expect("dimension at least 1")
}

/// Chord-Newton lift of an exact column solution to jets.
fn lift_column(b: &JMat, q: usize, j: usize, s0: &[Complex64], d0: Complex64) -> (Vec<Jet>, Jet) {
    let nv = b[0].nvars();
    let deg = b[0].degree();
    let bval = jmat_value(b, q);
    let jinv = column_jacobian(&bval, j, s0, d0)
        .lu()
        .try_inverse()
        .unwrap_or_else(|| CMat::zeros(q, q));
    let mut s: Vec<Jet> = s0.iter().map(|v| Jet::constant(nv, deg, *v)).collect();
    let mut d = Jet::constant(nv, deg, d0);
    for _ in 0..=deg {
        let f: Vec<Jet> = (0..q)
            .map(|i| {
                let mut acc = d.mul(&s[i]).scale(-ONE);
                for k in 0..q {
                    acc = acc.add(&b[i * q + k].mul(&s[k]));
                }
                acc
            })
            .collect();
        for k in 0..q {
            let mut delta = Jet::zero(nv, deg);
            for i in 0..q {
                delta = delta.add(&f[i].scale(jinv[(k, i)]));
            }
            if k == j {
                d = d.sub(&delta);
            } else {
                s[k] = s[k].sub(&delta);
            }
        }
    }
    (s, d)
}

/// Solve S X = R in jets by chord iteration with the value-level inverse.
fn jet_solve(s: &JMat, r: &JMat, q: usize) -> Option<JMat> {
    let sinv = jmat_value(s, q).lu().try_inverse()?;
    let deg = r[0].degree();
    let s = jmat_truncate(s, deg);
    let apply = |m: &JMat| -> JMat {
        let mut out = Vec::with_capacity(q * q);
        for i in 0..q {
            for j in 0..q {
                let mut acc = m[j].scale(sinv[(i, 0)]);
                for k in 1..q {
                    acc = acc.add(&m[k * q + j].scale(sinv[(i, k)]));
                }
                out.push(acc);
            }
        }
        out
    };
    let mut x = apply(r);
    for _ in 0..deg {
        let res = jmat_sub(r, &jmat_mul(&s, &x, q));
        x = jmat_add(&x, &apply(&res));
    }
    Some(x)
}

/// Jets of S⁽⁰⁾, D⁽⁰⁾ and, for N = 2, S⁽¹⁾, D⁽¹⁾ at (x, ξ).
struct JetDiag {
    s: Vec<JMat>,
    d: Vec<Vec<Jet>>,
    b: JMat,
}

impl Diagonalization {
    fn q(&self) -> usize {
        self.red.q()
    }

    /// Pointwise S⁽ᵛ⁾ and D⁽ᵛ⁾ for ν < N.
    pub fn eval(&self, x: &[f64], xi: &[f64]) -> Result<(Conjugator, DiagonalPart)> {
        if self.n == 1 {
            let b = self.red.eval(x, xi)?;
            let (s, d) = self.leading(&b, x, xi)?;
            return Ok((
                Conjugator { s_terms: vec![s] },
                DiagonalPart { d_terms: vec![d] },
            ));
        }
        let jd = self.jets(x, xi, 1)?;
        let q = self.q();
        Ok((
            Conjugator {
                s_terms: jd.s.iter().map(|m| jmat_value(m, q)).collect(),
            },
            DiagonalPart {
                d_terms: jd
                    .d
                    .iter()
                    .map(|v| v.iter().map(|e| e.value()).collect())
                    .collect(),
            },
        ))
    }

    fn leading(&self, b: &CMat, x: &[f64], xi: &[f64]) -> Result<(CMat, Vec<Complex64>)> {
        let q = self.q();
        match self.mode {
            LeadingMode::Exact => exact_diagonalization(b).map_err(|e| singular(x, xi, 0, &e)),
            LeadingMode::Literal => {
                let mut s = CMat::zeros(q, q);
                let mut d = vec![ZERO; q];
                for j in 0..q {
                    let c = leading_column(b, j).map_err(|e| singular(x, xi, j, &e))?;
                    for i in 0..q {
                        s[(i, j)] = c.s[i];
                    }
                    d[j] = c.d;
                }
                Ok((s, d))
            }
        }
    }

    /// Jets whose correction terms carry at least `degree` orders.
    fn jets(&self, x: &[f64], xi: &[f64], degree: usize) -> Result<JetDiag> {
        let q = self.q();
        let dim = self.red.system.dim;
        let g0 = degree + self.n - 1;
        let b = self.red.system.jet_matrix(x, xi, g0)?;
        let bval = jmat_value(&b, q);
        let (s0v, d0v) = self.leading(&bval, x, xi)?;
        let mut s0 = vec![Jet::zero(2 * dim, g0); q * q];
        let mut d0 = Vec::with_capacity(q);
        for j in 0..q {
            let col: Vec<Complex64> = (0..q).map(|i| s0v[(i, j)]).collect();
            let (sj, dj) = if self.mode == LeadingMode::Exact {
                lift_column(&b, q, j, &col, d0v[j])
            } else {
                (
                    col.iter().map(|v| Jet::constant(2 * dim, g0, *v)).collect(),
                    Jet::constant(2 * dim, g0, d0v[j]),
                )
            };
            for i in 0..q {
                s0[i * q + j] = sj[i].clone();
            }
            d0.push(dj);
        }
        let mut out = JetDiag {
            s: vec![s0.clone()],
            d: vec![d0.clone()],
            b: b.clone(),
        };
        if self.n == 2 {
            let r1 = jmat_sub(
                &leibniz_first(&b, &s0, q, dim),
                &leibniz_first(&s0, &jdiag(&d0, q), q, dim),
            );
            let e = jet_solve(&s0, &r1, q).ok_or_else(|| singular(x, xi, 0, "S(0) is singular"))?;
            let deg1 = g0 - 1;
            let d0t: Vec<Jet> = d0.iter().map(|v| v.truncate(deg1)).collect();
            let mut t: JMat = vec![Jet::zero(2 * dim, deg1); q * q];
            for i in 0..q {
                for j in 0..q {
                    if i != j {
                        let gap = d0t[i].sub(&d0t[j]);
                        if gap.value().norm() == 0.0 {
                            return Err(singular(x, xi, j, "repeated diagonal entries"));
                        }
                        t[i * q + j] = e[i * q + j].mul(&gap.recip()).scale(-ONE);
                    }
                }
            }
            let s0t = jmat_truncate(&s0, deg1);
            for j in 0..q {
                let mut acc = Jet::zero(2 * dim, deg1);
                for k in 0..q {
                    if k != j {
                        acc = acc.sub(&s0t[j * q + k].mul(&t[k * q + j]));
                    }
                }
                t[j * q + j] = acc;
            }
            let s1 = jmat_mul(&s0t, &t, q);
            let d1: Vec<Jet> = (0..q).map(|j| e[j * q + j].clone()).collect();
            out.s.push(s1);
            out.d.push(d1);
        }
        Ok(out)
    }

    /// Σ_{|α|<N_c}(1/α!)(∂_ξ^α B·D_x^α S − ∂_ξ^α S·D_x^α D) at (x, ξ), N_c = 2.
    pub fn residual(&self, x: &[f64], xi: &[f64]) -> Result<CMat> {
        let q = self.q();
        let dim = self.red.system.dim;
        if self.red.system.is_constant() {
            let (s, d) = self.eval(x, xi)?;
            let b = self.red.eval(x, xi)?;
            let st = s.total();
            let dt = d.total();
            let dm = CMat::from_diagonal(&nalgebra::DVector::from_vec(dt));
            return Ok(&b * &st - &st * dm);
        }
        let jd = self.jets(x, xi, 1)?;
        let deg_s = jd.s.last().expect("terms")[0].degree();
        let b = jmat_truncate(&jd.b, deg_s);
        let mut s = jmat_truncate(&jd.s[0], deg_s);
        let mut d: Vec<Jet> = jd.d[0].iter().map(|v| v.truncate(deg_s)).collect();
        for nu in 1..jd.s.len() {
            s = jmat_add(&s, &jd.s[nu]);
            d = d.iter().zip(&jd.d[nu]).map(|(a, c)| a.add(c)).collect();
        }
        let dm = jdiag(&d, q);
        let zero_order = jmat_sub(&jmat_mul(&b, &s, q), &jmat_mul(&s, &dm, q));
        let first = jmat_sub(
            &leibniz_first(&b, &s, q, dim),
            &leibniz_first(&s, &dm, q, dim),
        );
        Ok(CMat::from_fn(q, q, |i, j| {
            zero_order[i * q + j].value() + first[i * q + j].value()
        }))
    }
}

/// offdiag(S⁻¹BS) for constant-coefficient systems, relative to
/// cond(S)·‖B‖, and the eigenvalue-multiset gap relative to ‖B‖.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactnessCheck {
    pub offdiag_rel: f64,
    pub eigen_gap_rel: f64,
}

pub fn exactness_check(b: &CMat, s: &CMat, d: &[Complex64]) -> Result<ExactnessCheck> {
    let sinv = s
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| DnError::Numerical("conjugator is singular".into()))?;
    let m = &sinv * b * s;
    let mut off = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                off += m[(i, j)].norm_sqr();
            }
        }
    }
    let nb = norm2(b).max(f64::MIN_POSITIVE);
    let offdiag_rel = off.sqrt() / (cond2(s) * nb);
    let (mut ev, _) = eig(b)?;
    let mut dv = d.to_vec();
    let key = |z: &Complex64| (z.norm(), z.arg());
    ev.sort_by(|a, c| {
        key(a)
            .partial_cmp(&key(c))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    dv.sort_by(|a, c| {
        key(a)
            .partial_cmp(&key(c))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let gap = ev
        .iter()
        .zip(&dv)
        .map(|(a, c)| (a - c).norm())
        .fold(0.0, f64::max);
    Ok(ExactnessCheck {
        offdiag_rel,
        eigen_gap_rel: gap / nb,
    })
}

/// One row of the diagonalization export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffdiagSample {
    pub xi_norm: f64,
    pub j: usize,
    pub d_abs: f64,
    /// max over x and rows i of |residual_ij|·⟨ξ⟩^{−rⱼ}.
    pub offdiag_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffdiagProbe {
    #[serde(rename = "N")]
    pub n: usize,
    /// Worst per-column ⟨ξ⟩-slope of the normalized residual.
    #[serde(with = "crate::parametrix::slope_serde")]
    pub fitted_slope: f64,
    pub column_slopes: Vec<f64>,
    pub samples: Vec<OffdiagSample>,
}

impl OffdiagProbe {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "xi_norm,j,d_abs,offdiag_residual")?;
        for s in &self.samples {
            writeln!(
                w,
                "{:e},{},{:e},{:e}",
                s.xi_norm, s.j, s.d_abs, s.offdiag_residual
            )?;
        }
        Ok(())
    }
}

/// Residual decay of a diagonalization over |ξ| ≥ 1 samples.
pub fn offdiag_decay_probe(diag: &Diagonalization, grid: &SamplingGrid) -> Result<OffdiagProbe> {
    let q = diag.q();
    let r = diag.red.r().to_vec();
    let xis: Vec<&Vec<f64>> = grid.xis.iter().filter(|v| norm(v) >= 1.0).collect();
    if xis.len() < 3 {
        return Err(DnError::Fit(format!(
            "need at least 3 points with |xi| >= 1, got {}",
            xis.len()
        )));
    }
    let xs: Vec<&Vec<f64>> = if diag.red.system.is_constant() {
        grid.xs.iter().take(1).collect()
    } else {
        grid.xs.iter().collect()
    };
    let rows: Vec<Result<Vec<OffdiagSample>>> = xis
        .par_iter()
        .map(|xi| {
            let br = bracket(xi);
            let mut res = vec![0.0f64; q];
            let mut dabs = vec![0.0f64; q];
            for x in &xs {
                let m = diag.residual(x, xi)?;
                let (_, d) = diag.eval(x, xi)?;
                let dt = d.total();
                for j in 0..q {
                    for i in 0..q {
                        res[j] = res[j].max(m[(i, j)].norm() / br.powf(r[j]));
                    }
                    dabs[j] = dabs[j].max(dt[j].norm());
                }
            }
            Ok((0..q)
                .map(|j| OffdiagSample {
                    xi_norm: norm(xi),
                    j,
                    d_abs: dabs[j],
                    offdiag_residual: res[j],
                })
                .collect())
        })
        .collect();
    let mut samples = Vec::new();
    for r in rows {
        samples.extend(r?);
    }
    let mut column_slopes = Vec::with_capacity(q);
    for j in 0..q {
        let pts: Vec<(f64, f64)> = samples
            .iter()
            .filter(|s| s.j == j)
            .map(|s| {
                (
                    (1.0 + s.xi_norm * s.xi_norm).sqrt().ln(),
                    s.offdiag_residual,
                )
            })
            .collect();
        column_slopes.push(slope_or_neg_inf(&pts)?);
    }
    let fitted_slope = column_slopes
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(OffdiagProbe {
        n: diag.n,
        fitted_slope,
        column_slopes,
        samples,
    })
}

/// |dⱼⱼ⁽⁰⁾ − λ| ≥ C(⟨ξ⟩^{rⱼ} + |λ|) over the sampled set, using the literal
/// leading step.
pub fn diag_lambda_ellipticity_check(
    red: &ReducedSystem,
    sector: &Sector,
    grid: &SamplingGrid,
    threshold: f64,
) -> Result<EllipticityReport> {
    let q = red.q();
    let r = red.r().to_vec();
    if grid.is_empty() {
        return Err(DnError::Input("empty sample grid".into()));
    }
    let xs: Vec<usize> = if red.system.is_constant() {
        vec![0]
    } else {
        (0..grid.xs.len()).collect()
    };
    let base = sector.lambda_samples();
    let pts: Vec<(usize, usize)> = xs
        .iter()
        .flat_map(|&i| (0..grid.xis.len()).map(move |k| (i, k)))
        .collect();
    let partial: Vec<Result<(f64, Witness, usize)>> = pts
        .par_iter()
        .map(|&(ix, k)| {
            let (x, xi) = (&grid.xs[ix], &grid.xis[k]);
            let b = red.eval(x, xi)?;
            let br = bracket(xi);
            let mut best = (f64::INFINITY, ZERO, 0usize);
            let mut count = 0;
            for j in 0..q {
                let c = leading_column(&b, j).map_err(|e| singular(x, xi, j, &e))?;
                let mut lams = base.clone();
                if sector.contains(c.d) {
                    lams.push(c.d);
                }
                for lam in lams {
                    let v = (c.d - lam).norm() / (br.powf(r[j]) + lam.norm());
                    count += 1;
                    if v < best.0 {
                        best = (v, lam, j);
                    }
                }
            }
            Ok((
                best.0,
                Witness {
                    x: x.clone(),
                    xi: xi.clone(),
                    lambda_re: best.1.re,
                    lambda_im: best.1.im,
                    kappa: best.2 + 1,
                },
                count,
            ))
        })
        .collect();
    let mut samples = 0;
    let mut worst: Option<(f64, Witness)> = None;
    for p in partial {
        let (v, w, c) = p?;
        samples += c;
        if worst.as_ref().is_none_or(|(b, _)| v < *b) {
            worst = Some((v, w));
        }
    }
    let (c_lower, witness) = worst.expect("nonempty grid");
    Ok(EllipticityReport {
        passed: c_lower >= threshold,
        c_lower,
        r_used: 0.0,
        witness: Some(witness),
        mode: CheckMode::Diagonal,
        samples,
    })
}

/// Relative error of dⱼⱼ⁽⁰⁾ − λ = det(B[j] − λE_j)/det B[j−1] (j 0-based).
pub fn quotient_identity_error(
    b: &CMat,
    j: usize,
    lambda: Complex64,
) -> std::result::Result<f64, String> {
    let c = leading_column(b, j)?;
    let lhs = c.d - lambda;
    let prev = if j == 0 {
        ONE
    } else {
        det(&b.view((0, 0), (j, j)).into_owned())
    };
    let rhs = minor_det(b, lambda, j + 1) / prev;
    Ok((lhs - rhs).norm() / rhs.norm().max(lhs.norm()).max(f64::MIN_POSITIVE))
}

/// V = L⁻¹SL and W = V⁻¹ for constant-coefficient systems at ξ.
pub fn back_conjugation(diag: &Diagonalization, xi: &[f64]) -> Result<(CMat, CMat)> {
    if !diag.red.system.is_constant() {
        return Err(DnError::Input(
            "back-conjugation is provided for constant-coefficient systems".into(),
        ));
    }
    let x0 = vec![0.0; xi.len()];
    let (s, _) = diag.eval(&x0, xi)?;
    let s = s.total();
    let br = bracket(xi);
    let l = &diag.red.l;
    let v = CMat::from_fn(s.nrows(), s.ncols(), |i, j| {
        s[(i, j)] * br.powf(l[i] - l[j])
    });
    let w = v
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| DnError::Singular {
            x: x0,
            xi: xi.to_vec(),
            lambda: "n/a".into(),
            detail: "V is singular".into(),
        })?;
    Ok((v, w))
}

/// Condition number of the quantized conjugator S(x, D) on a grid and
/// whether it is below 10¹⁰.
pub fn discrete_invertibility(diag: &Diagonalization, grid: &TorusGrid) -> Result<(f64, bool)> {
    let q = diag.q();
    let variable = !diag.red.system.is_constant();
    let m = quantize_matrix_symbol(q, grid, variable, |x, xi| Ok(diag.eval(x, xi)?.0.total()))?;
    let c = cond2(&m);
    Ok((c, c < 1e10))
}

/// Slope of log y against the given abscissae; −∞ when every y is zero.
fn slope_or_neg_inf(pts: &[(f64, f64)]) -> Result<f64> {
    let nz: Vec<(f64, f64)> = pts
        .iter()
        .filter(|p| p.1 > 0.0)
        .map(|p| (p.0, p.1.ln()))
        .collect();
    if nz.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    if nz.len() < 3 {
        return Err(DnError::Fit(
            "fewer than 3 nonzero samples for the slope fit".into(),
        ));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = nz.into_iter().unzip();
    Ok(linear_fit(&xs, &ys)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::SymbolExpr;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn m2(a: [f64; 4]) -> CMat {
        CMat::from_row_slice(2, 2, &[c(a[0]), c(a[1]), c(a[2]), c(a[3])])
    }

    #[test]
    fn literal_two_by_two_example() {
        let b = m2([2.0, 1.0, 1.0, 1.0]);
        let c1 = leading_column(&b, 0).unwrap();
        assert_eq!(c1.d, c(2.0));
        let c2 = leading_column(&b, 1).unwrap();
        assert!((c2.s[0] - c(-0.5)).norm() < 1e-15);
        assert!((c2.d - c(0.5)).norm() < 1e-15);
        let lam = c(0.3);
        assert!(quotient_identity_error(&b, 1, lam).unwrap() < 1e-14);
        assert!((c2.d - lam - (c(1.0) - lam * 2.0) / 2.0).norm() < 1e-15);
    }

    #[test]
    fn upper_triangular_literal() {
        let b = CMat::from_row_slice(
            3,
            3,
            &[
                c(5.0),
                c(1.0),
                c(2.0),
                ZERO,
                c(3.0),
                c(-1.0),
                ZERO,
                ZERO,
                c(1.0),
            ],
        );
        for j in 0..3 {
            let col = leading_column(&b, j).unwrap();
            assert!((col.d - b[(j, j)]).norm() < 1e-14);
            for i in (j + 1)..3 {
                assert_eq!(col.s[i], ZERO);
            }
        }
    }

    #[test]
    fn exact_on_example_and_eigenvalues() {
        let b = m2([2.0, 1.0, 1.0, 1.0]);
        let (s, d) = exact_diagonalization(&b).unwrap();
        let chk = exactness_check(&b, &s, &d).unwrap();
        assert!(chk.offdiag_rel < 1e-14 && chk.eigen_gap_rel < 1e-14);
        assert!((d[0].re - (3.0 + 5f64.sqrt()) / 2.0).abs() < 1e-13);
        assert_eq!(s[(0, 0)], ONE);
        assert_eq!(s[(1, 1)], ONE);
    }

    #[test]
    fn reduce_diagonal_and_scalar() {
        let sys = DNSystem::diagonal(vec![
            ScalarSymbol::bracket_pow(1, 2.0),
            ScalarSymbol::bracket_pow(1, 1.0),
        ])
        .unwrap();
        let red = reduce_orders(&sys).unwrap();
        for xi in [0.0, 3.0, 100.0] {
            let a = sys.eval_matrix(&[0.0], &[xi]).unwrap();
            let b = red.eval(&[0.0], &[xi]).unwrap();
            assert!((a - b).norm() < 1e-9 * bracket(&[xi]).powi(2));
        }
    }

    #[test]
    fn reduce_constant_bracket_system() {
        let cm = CMat::from_row_slice(2, 2, &[c(2.0), c(1.0), c(0.5), c(1.0)]);
        let sys = DNSystem::constant_bracket(&cm, vec![1.5, 0.5], vec![0.5, 0.0], 1).unwrap();
        let red = reduce_orders(&sys).unwrap();
        for xi in [1.0, 7.0, 1000.0] {
            let br = bracket(&[xi]);
            let b = red.eval(&[0.0], &[xi]).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let want = cm[(i, j)] * br.powf(sys.r[j]);
                    assert!((b[(i, j)] - want).norm() < 1e-10 * want.norm());
                }
            }
        }
    }

    fn variable_system() -> DNSystem {
        let br = |p: f64| SymbolExpr::bracket(p);
        let e = |expr: SymbolExpr, p: f64| ScalarSymbol::from_expr(expr, 1, p, 0.0).unwrap();
        let a11 = e(
            SymbolExpr::real(2.0)
                .plus(SymbolExpr::sin(vec![1.0], 0.0))
                .times(br(2.0)),
            2.0,
        );
        let a12 = e(
            SymbolExpr::real(1.0)
                .plus(SymbolExpr::cos(vec![1.0], 0.0).scaled(c(0.5)))
                .times(br(1.0)),
            1.0,
        );
        let a21 = e(
            SymbolExpr::sin(vec![1.0], 0.0)
                .scaled(c(0.5))
                .times(br(2.0)),
            2.0,
        );
        let a22 = e(
            SymbolExpr::real(2.0)
                .plus(SymbolExpr::cos(vec![1.0], 0.0))
                .times(br(1.0)),
            1.0,
        );
        DNSystem::new(
            vec![vec![a11, a12], vec![a21, a22]],
            vec![0.0, 0.0],
            vec![2.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn variable_residual_gains_an_order() {
        let red = reduce_orders(&variable_system()).unwrap();
        let grid = SamplingGrid {
            xs: (0..8)
                .map(|i| vec![i as f64 * std::f64::consts::PI / 4.0])
                .collect(),
            xis: (4..=12).map(|k| vec![2f64.powi(k)]).collect(),
        };
        let p1 = offdiag_decay_probe(
            &build_diagonalization(&red, 1, LeadingMode::Exact).unwrap(),
            &grid,
        )
        .unwrap();
        let p2 = offdiag_decay_probe(
            &build_diagonalization(&red, 2, LeadingMode::Exact).unwrap(),
            &grid,
        )
        .unwrap();
        assert!((p1.fitted_slope + 1.0).abs() < 0.3, "{p1:?}");
        assert!(
            (p1.fitted_slope - p2.fitted_slope - 1.0).abs() < 0.3,
            "{} {}",
            p1.fitted_slope,
            p2.fitted_slope
        );
        for j in 0..2 {
            let gain = p1.column_slopes[j] - p2.column_slopes[j];
            assert!((gain - 1.0).abs() < 0.3, "column {j}: {gain}");
        }
        let dg = build_diagonalization(&red, 2, LeadingMode::Exact).unwrap();
        let (s, _) = dg.eval(&[0.7], &[300.0]).unwrap();
        for j in 0..2 {
            assert_eq!(s.s_terms[0][(j, j)], ONE);
            assert!(s.s_terms[1][(j, j)].norm() < 1e-14);
        }
    }

    #[test]
    fn back_conjugation_intertwines() {
        let cm = CMat::from_row_slice(2, 2, &[c(2.0), c(1.0), c(0.5), c(1.0)]);
        let sys = DNSystem::constant_bracket(&cm, vec![1.5, 0.5], vec![0.5, 0.0], 1).unwrap();
        let red = reduce_orders(&sys).unwrap();
        let dg = build_diagonalization(&red, 1, LeadingMode::Exact).unwrap();
        let xi = [5.0];
        let (v, w) = back_conjugation(&dg, &xi).unwrap();
        let (_, d) = dg.eval(&[0.0], &xi).unwrap();
        let a = sys.eval_matrix(&[0.0], &xi).unwrap();
        let dm = CMat::from_diagonal(&nalgebra::DVector::from_vec(d.total()));
        assert!((&a * &v - &v * dm).norm() < 1e-10 * a.norm());
        assert!((&v * &w - CMat::identity(2, 2)).norm() < 1e-12);
        let g = TorusGrid::new(1, 16, 1.0).unwrap();
        let (cond, ok) = discrete_invertibility(&dg, &g).unwrap();
        assert!(ok, "{cond}");
    }

    #[test]
    fn diagonal_check_on_positive_system() {
        let sys = DNSystem::diagonal(vec![
            ScalarSymbol::bracket_pow(1, 2.0),
            ScalarSymbol::bracket_pow(1, 1.0),
        ])
        .unwrap();
        let red = reduce_orders(&sys).unwrap();
        let grid = SamplingGrid::dyadic(1, 1, 0, 12);
        let rep = diag_lambda_ellipticity_check(
            &red,
            &Sector::new(std::f64::consts::FRAC_PI_2).unwrap(),
            &grid,
            1e-6,
        )
        .unwrap();
        assert!(rep.passed);
        assert_eq!(rep.mode, CheckMode::Diagonal);
    }
}
