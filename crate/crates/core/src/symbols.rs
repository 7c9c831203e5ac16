//! Scalar symbols a(x, ξ), Douglis–Nirenberg systems, seminorm estimates and
//! truncated Leibniz composition.
//!
//! Derivatives are taken from Taylor jets: built-in expressions carry exact
//! jets, user closures fall back to central finite differences.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DnError, Result, SymbolError};
use crate::jet::{multi_factorial, Jet, JetShape};

/// Japanese bracket ⟨ξ⟩ = (1 + |ξ|²)^{1/2}.
pub fn bracket(xi: &[f64]) -> f64 {
    (1.0 + xi.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

pub fn norm(xi: &[f64]) -> f64 {
    xi.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Quintic smoothstep excision: 0 for t ≤ 1, 1 for t ≥ 2.
pub fn excision(t: f64) -> f64 {
    if t <= 1.0 {
        0.0
    } else if t >= 2.0 {
        1.0
    } else {
        let u = t - 1.0;
        u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    }
}

fn excision_derivs(t: f64, degree: usize) -> Vec<Complex64> {
    let u = t - 1.0;
    let all = [
        u * u * u * (10.0 - 15.0 * u + 6.0 * u * u),
        30.0 * u * u - 60.0 * u * u * u + 30.0 * u.powi(4),
        60.0 * u - 180.0 * u * u + 120.0 * u * u * u,
        60.0 - 360.0 * u + 360.0 * u * u,
        -360.0 + 720.0 * u,
        720.0,
    ];
    (0..=degree)
        .map(|k| Complex64::new(if k < all.len() { all[k] } else { 0.0 }, 0.0))
        .collect()
}

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Whether a symbol depends on x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SymbolKind {
    ConstantCoefficient,
    Variable,
}

/// A pure evaluator of a(x, ξ). Jet variables are ordered (x₁..xₙ, ξ₁..ξₙ).
pub trait SymbolFn: Send + Sync {
    fn eval(&self, x: &[f64], xi: &[f64]) -> std::result::Result<Complex64, SymbolError>;

    /// Exact Taylor jet, if the evaluator can provide one.
    fn jet(
        &self,
        _x: &[f64],
        _xi: &[f64],
        _degree: usize,
    ) -> Option<std::result::Result<Jet, SymbolError>> {
        None
    }
}

impl<F> SymbolFn for F
where
    F: Fn(&[f64], &[f64]) -> Complex64 + Send + Sync,
{
    fn eval(&self, x: &[f64], xi: &[f64]) -> std::result::Result<Complex64, SymbolError> {
        Ok(self(x, xi))
    }
}

/// Finite-difference configuration for symbols without exact jets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    /// Relative ξ-step, multiplied by ⟨ξ⟩.
    pub h_xi_rel: f64,
    /// Absolute x-step.
    pub h_x: f64,
    /// Largest total derivative order |α|+|β|.
    pub max_order: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            h_xi_rel: 1e-4,
            h_x: 1e-4,
            max_order: 4,
        }
    }
}

/// Built-in symbol expressions with exact jets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SymbolExpr {
    Const {
        re: f64,
        im: f64,
    },
    /// ⟨ξ⟩^p
    Bracket {
        p: f64,
    },
    /// |ξ|^p
    AbsPow {
        p: f64,
    },
    /// χ(scale·|ξ|)
    Excision {
        scale: f64,
    },
    /// sin(k·x + phase)
    Sin {
        k: Vec<f64>,
        phase: f64,
    },
    /// cos(k·x + phase)
    Cos {
        k: Vec<f64>,
        phase: f64,
    },
    X {
        i: usize,
    },
    Xi {
        i: usize,
    },
    Add {
        a: Box<SymbolExpr>,
        b: Box<SymbolExpr>,
    },
    Mul {
        a: Box<SymbolExpr>,
        b: Box<SymbolExpr>,
    },
    Scale {
        re: f64,
        im: f64,
        a: Box<SymbolExpr>,
    },
}

impl SymbolExpr {
    pub fn constant(c: Complex64) -> Self {
        SymbolExpr::Const { re: c.re, im: c.im }
    }

    pub fn real(c: f64) -> Self {
        SymbolExpr::Const { re: c, im: 0.0 }
    }

    pub fn bracket(p: f64) -> Self {
        SymbolExpr::Bracket { p }
    }

    pub fn abs_pow(p: f64) -> Self {
        SymbolExpr::AbsPow { p }
    }

    pub fn excision(scale: f64) -> Self {
        SymbolExpr::Excision { scale }
    }

    pub fn sin(k: Vec<f64>, phase: f64) -> Self {
        SymbolExpr::Sin { k, phase }
    }

    pub fn cos(k: Vec<f64>, phase: f64) -> Self {
        SymbolExpr::Cos { k, phase }
    }

    pub fn x(i: usize) -> Self {
        SymbolExpr::X { i }
    }

    pub fn xi(i: usize) -> Self {
        SymbolExpr::Xi { i }
    }

    pub fn plus(self, other: SymbolExpr) -> Self {
        SymbolExpr::Add {
            a: Box::new(self),
            b: Box::new(other),
        }
    }

    pub fn times(self, other: SymbolExpr) -> Self {
        SymbolExpr::Mul {
            a: Box::new(self),
            b: Box::new(other),
        }
    }

    pub fn scaled(self, c: Complex64) -> Self {
        SymbolExpr::Scale {
            re: c.re,
            im: c.im,
            a: Box::new(self),
        }
    }

    /// True if the expression contains an x-dependent node.
    pub fn depends_on_x(&self) -> bool {
        match self {
            SymbolExpr::Sin { k, .. } | SymbolExpr::Cos { k, .. } => k.iter().any(|v| *v != 0.0),
            SymbolExpr::X { .. } => true,
            SymbolExpr::Add { a, b } | SymbolExpr::Mul { a, b } => {
                a.depends_on_x() || b.depends_on_x()
            }
            SymbolExpr::Scale { a, .. } => a.depends_on_x(),
            _ => false,
        }
    }

    fn check_dim(&self, dim: usize) -> std::result::Result<(), SymbolError> {
        match self {
            SymbolExpr::Sin { k, .. } | SymbolExpr::Cos { k, .. } if k.len() != dim => {
                Err(SymbolError::Input(format!(
                    "wave vector of length {} in dimension {dim}",
                    k.len()
                )))
            }
            SymbolExpr::X { i } | SymbolExpr::Xi { i } if *i >= dim => Err(SymbolError::Input(
                format!("coordinate index {i} out of range for dimension {dim}"),
            )),
            SymbolExpr::Add { a, b } | SymbolExpr::Mul { a, b } => {
                a.check_dim(dim)?;
                b.check_dim(dim)
            }
            SymbolExpr::Scale { a, .. } => a.check_dim(dim),
            _ => Ok(()),
        }
    }

    fn value(&self, x: &[f64], xi: &[f64]) -> Complex64 {
        match self {
            SymbolExpr::Const { re, im } => Complex64::new(*re, *im),
            SymbolExpr::Bracket { p } => Complex64::new(bracket(xi).powf(*p), 0.0),
            SymbolExpr::AbsPow { p } => {
                let r = norm(xi);
                let v = if r == 0.0 {
                    if *p == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    r.powf(*p)
                };
                Complex64::new(v, 0.0)
            }
            SymbolExpr::Excision { scale } => Complex64::new(excision(scale * norm(xi)), 0.0),
            SymbolExpr::Sin { k, phase } => Complex64::new((dot(k, x) + phase).sin(), 0.0),
            SymbolExpr::Cos { k, phase } => Complex64::new((dot(k, x) + phase).cos(), 0.0),
            SymbolExpr::X { i } => Complex64::new(x[*i], 0.0),
            SymbolExpr::Xi { i } => Complex64::new(xi[*i], 0.0),
            SymbolExpr::Add { a, b } => a.value(x, xi) + b.value(x, xi),
            SymbolExpr::Mul { a, b } => {
                let va = a.value(x, xi);
                if va == ZERO {
                    return ZERO;
                }
                va * b.value(x, xi)
            }
            SymbolExpr::Scale { re, im, a } => Complex64::new(*re, *im) * a.value(x, xi),
        }
    }

    fn jet_at(
        &self,
        x: &[f64],
        xi: &[f64],
        degree: usize,
    ) -> std::result::Result<Jet, SymbolError> {
        let n = x.len();
        let nv = 2 * n;
        let sq_norm = || {
            let mut s = Jet::zero(nv, degree);
            for i in 0..n {
                let v = Jet::variable(nv, degree, n + i, xi[i]);
                s = s.add(&v.mul(&v));
            }
            s
        };
        let phase_jet = |k: &[f64], phase: f64| {
            let mut s = Jet::constant(nv, degree, Complex64::new(phase, 0.0));
            for i in 0..n {
                if k[i] != 0.0 {
                    s = s.add(&Jet::variable(nv, degree, i, x[i]).scale(Complex64::new(k[i], 0.0)));
                }
            }
            s
        };
        Ok(match self {
            SymbolExpr::Const { re, im } => Jet::constant(nv, degree, Complex64::new(*re, *im)),
            SymbolExpr::Bracket { p } => sq_norm().add_const(ONE).powf(p / 2.0),
            SymbolExpr::AbsPow { p } => {
                let r = norm(xi);
                if r == 0.0 {
                    let even = p.fract() == 0.0 && *p >= 0.0 && (*p as i64) % 2 == 0;
                    if even {
                        sq_norm().powf(p / 2.0)
                    } else if degree == 0 {
                        Jet::constant(nv, 0, self.value(x, xi))
                    } else {
                        return Err(SymbolError::Numerical(format!(
                            "|xi|^{p} is not differentiable at xi = 0"
                        )));
                    }
                } else {
                    sq_norm().powf(p / 2.0)
                }
            }
            SymbolExpr::Excision { scale } => {
                let t = scale * norm(xi);
                if t <= 1.0 {
                    Jet::zero(nv, degree)
                } else if t >= 2.0 {
                    Jet::constant(nv, degree, ONE)
                } else {
                    let tj = sq_norm().sqrt().scale(Complex64::new(*scale, 0.0));
                    tj.compose(&excision_derivs(t, degree))
                }
            }
            SymbolExpr::Sin { k, phase } => phase_jet(k, *phase).sin(),
            SymbolExpr::Cos { k, phase } => phase_jet(k, *phase).cos(),
            SymbolExpr::X { i } => Jet::variable(nv, degree, *i, x[*i]),
            SymbolExpr::Xi { i } => Jet::variable(nv, degree, n + *i, xi[*i]),
            SymbolExpr::Add { a, b } => a.jet_at(x, xi, degree)?.add(&b.jet_at(x, xi, degree)?),
            SymbolExpr::Mul { a, b } => {
                let ja = a.jet_at(x, xi, degree)?;
                if ja.is_zero() {
                    return Ok(ja);
                }
                let jb = b.jet_at(x, xi, degree)?;
                ja.mul(&jb)
            }
            SymbolExpr::Scale { re, im, a } => {
                a.jet_at(x, xi, degree)?.scale(Complex64::new(*re, *im))
            }
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

impl SymbolFn for SymbolExpr {
    fn eval(&self, x: &[f64], xi: &[f64]) -> std::result::Result<Complex64, SymbolError> {
        Ok(self.value(x, xi))
    }

    fn jet(
        &self,
        x: &[f64],
        xi: &[f64],
        degree: usize,
    ) -> Option<std::result::Result<Jet, SymbolError>> {
        Some(self.jet_at(x, xi, degree))
    }
}

/// A scalar symbol a ∈ S^μ_δ with its metadata.
#[derive(Clone)]
pub struct ScalarSymbol {
    inner: Arc<dyn SymbolFn>,
    pub order: f64,
    pub delta: f64,
    pub kind: SymbolKind,
    pub dim: usize,
    pub fd: FdConfig,
    label: String,
}

impl fmt::Debug for ScalarSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarSymbol")
            .field("label", &self.label)
            .field("order", &self.order)
            .field("delta", &self.delta)
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .finish()
    }
}

impl ScalarSymbol {
    /// Wrap an arbitrary evaluator.
    pub fn new(
        inner: Arc<dyn SymbolFn>,
        dim: usize,
        order: f64,
        delta: f64,
        kind: SymbolKind,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&delta) {
            return Err(DnError::Input(format!(
                "delta must lie in [0, 1), got {delta}"
            )));
        }
        if dim == 0 {
            return Err(DnError::Input("space dimension must be positive".into()));
        }
        Ok(ScalarSymbol {
            inner,
            order,
            delta,
            kind,
            dim,
            fd: FdConfig::default(),
            label: "custom".into(),
        })
    }

    /// Symbol from a closure; derivatives use finite differences.
    pub fn from_fn<F>(dim: usize, order: f64, delta: f64, kind: SymbolKind, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &[f64]) -> Complex64 + Send + Sync + 'static,
    {
        Self::new(Arc::new(f), dim, order, delta, kind)
    }

    /// Symbol from a built-in expression with exact jets.
    pub fn from_expr(expr: SymbolExpr, dim: usize, order: f64, delta: f64) -> Result<Self> {
        expr.check_dim(dim)?;
        let kind = if expr.depends_on_x() {
            SymbolKind::Variable
        } else {
            SymbolKind::ConstantCoefficient
        };
        let label = format!("{expr:?}");
        let mut s = Self::new(Arc::new(expr), dim, order, delta, kind)?;
        s.label = label;
        Ok(s)
    }

    pub fn constant(dim: usize, c: Complex64) -> Self {
        Self::from_expr(SymbolExpr::constant(c), dim, 0.0, 0.0).expect("valid constant symbol")
    }

    /// The zero symbol, admissible in every order.
    pub fn zero(dim: usize) -> Self {
        let mut s = Self::constant(dim, ZERO);
        s.order = f64::NEG_INFINITY;
        s
    }

    /// ⟨ξ⟩^p, of order p.
    pub fn bracket_pow(dim: usize, p: f64) -> Self {
        Self::from_expr(SymbolExpr::bracket(p), dim, p, 0.0).expect("valid bracket symbol")
    }

    pub fn with_fd(mut self, fd: FdConfig) -> Self {
        self.fd = fd;
        self
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_order(mut self, order: f64) -> Self {
        self.order = order;
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn has_exact_jet(&self) -> bool {
        let x = vec![0.0; self.dim];
        self.inner.jet(&x, &x, 0).is_some()
    }

    fn check_point(&self, x: &[f64], xi: &[f64]) -> std::result::Result<(), SymbolError> {
        if x.len() != self.dim || xi.len() != self.dim {
            return Err(SymbolError::Input(format!(
                "point dimensions ({}, {}) do not match symbol dimension {}",
                x.len(),
                xi.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// a(x, ξ).
    pub fn eval(&self, x: &[f64], xi: &[f64]) -> std::result::Result<Complex64, SymbolError> {
        self.check_point(x, xi)?;
        let v = self.inner.eval(x, xi)?;
        if v.re.is_nan() || v.im.is_nan() {
            return Err(SymbolError::Evaluation {
                x: x.to_vec(),
                xi: xi.to_vec(),
            });
        }
        Ok(v)
    }

    /// Taylor jet in (x, ξ) of the given degree.
    pub fn jet(
        &self,
        x: &[f64],
        xi: &[f64],
        degree: usize,
    ) -> std::result::Result<Jet, SymbolError> {
        self.check_point(x, xi)?;
        let j = match self.inner.jet(x, xi, degree) {
            Some(j) => j?,
            None => self.fd_jet(x, xi, degree)?,
        };
        if j.coeffs.iter().any(|c| c.re.is_nan() || c.im.is_nan()) {
            return Err(SymbolError::Evaluation {
                x: x.to_vec(),
                xi: xi.to_vec(),
            });
        }
        Ok(j)
    }

    /// Plain partial derivative ∂_ξ^α ∂_x^β a(x, ξ).
    pub fn derivative(
        &self,
        alpha: &[u8],
        beta: &[u8],
        x: &[f64],
        xi: &[f64],
    ) -> std::result::Result<Complex64, SymbolError> {
        if alpha.len() != self.dim || beta.len() != self.dim {
            return Err(SymbolError::Input("multi-index length mismatch".into()));
        }
        let deg: usize = alpha.iter().chain(beta).map(|&a| a as usize).sum();
        let j = self.jet(x, xi, deg)?;
        let mut idx = beta.to_vec();
        idx.extend_from_slice(alpha);
        Ok(j.derivative(&idx))
    }

    fn fd_jet(
        &self,
        x: &[f64],
        xi: &[f64],
        degree: usize,
    ) -> std::result::Result<Jet, SymbolError> {
        if degree > self.fd.max_order {
            return Err(SymbolError::Capability {
                requested: degree,
                available: self.fd.max_order,
            });
        }
        let n = self.dim;
        let shape = JetShape::get(2 * n, degree);
        let br = bracket(xi);
        let mut coeffs = Vec::with_capacity(shape.len());
        let mut px = x.to_vec();
        let mut pxi = xi.to_vec();
        for idx in &shape.indices {
            let total: usize = idx.iter().map(|&a| a as usize).sum();
            let widen = f64::EPSILON.powf(1.0 / (total as f64 + 2.0));
            let mut steps = Vec::with_capacity(2 * n);
            for v in 0..2 * n {
                let k = idx[v] as usize;
                if k == 0 {
                    steps.push(0.0);
                    continue;
                }
                let (base, center) = if v < n {
                    (self.fd.h_x, x[v])
                } else {
                    (self.fd.h_xi_rel * br, xi[v - n])
                };
                let scale = if v < n { 1.0 } else { br };
                let h = base.max(widen * scale);
                if !(h > 0.0) || center + h == center {
                    return Err(SymbolError::Numerical(format!(
                        "finite-difference step {h:e} underflows at coordinate {center:e}"
                    )));
                }
                steps.push(h);
            }
            let mut acc = ZERO;
            let mut counters = vec![0usize; 2 * n];
            let stencils: Vec<&[f64]> = idx.iter().map(|&k| stencil(k as usize)).collect();
            loop {
                let mut w = 1.0;
                for v in 0..2 * n {
                    let st = stencils[v];
                    let half = (st.len() / 2) as f64;
                    w *= st[counters[v]];
                    let off = (counters[v] as f64 - half) * steps[v];
                    if v < n {
                        px[v] = x[v] + off;
                    } else {
                        pxi[v - n] = xi[v - n] + off;
                    }
                }
                if w != 0.0 {
                    let val = self.inner.eval(&px, &pxi)?;
                    if val.re.is_nan() || val.im.is_nan() {
                        return Err(SymbolError::Evaluation {
                            x: px.clone(),
                            xi: pxi.clone(),
                        });
                    }
                    acc += val * w;
                }
                let mut v = 0;
                loop {
                    if v == 2 * n {
                        break;
                    }
                    counters[v] += 1;
                    if counters[v] < stencils[v].len() {
                        break;
                    }
                    counters[v] = 0;
                    v += 1;
                }
                if v == 2 * n {
                    break;
                }
            }
            let mut denom = 1.0;
            for v in 0..2 * n {
                if idx[v] > 0 {
                    denom *= steps[v].powi(idx[v] as i32);
                }
            }
            coeffs.push(acc / denom / multi_factorial(idx));
        }
        let mut j = Jet::zero(2 * n, degree);
        j.coeffs = coeffs;
        Ok(j)
    }

    /// Sum of two symbols; the order is the larger one.
    pub fn add(&self, other: &ScalarSymbol) -> Result<ScalarSymbol> {
        self.combine(other, Combine::Sum, self.order.max(other.order))
    }

    /// Pointwise product a₁·a₂ (the N = 1 truncation of the Leibniz product).
    pub fn pointwise_product(&self, other: &ScalarSymbol) -> Result<ScalarSymbol> {
        self.combine(other, Combine::Product, self.order + other.order)
    }

    /// a + c for a complex constant c.
    pub fn plus_const(&self, c: Complex64) -> ScalarSymbol {
        let cs = ScalarSymbol::constant(self.dim, c).with_delta(self.delta);
        self.combine(&cs, Combine::Sum, self.order.max(0.0))
            .expect("compatible constant")
    }

    fn combine(&self, other: &ScalarSymbol, how: Combine, order: f64) -> Result<ScalarSymbol> {
        if self.dim != other.dim {
            return Err(DnError::Input(
                "symbols live in different dimensions".into(),
            ));
        }
        let kind = if self.kind == SymbolKind::Variable || other.kind == SymbolKind::Variable {
            SymbolKind::Variable
        } else {
            SymbolKind::ConstantCoefficient
        };
        let label = format!("({} {} {})", self.label, how.sym(), other.label);
        let mut s = ScalarSymbol::new(
            Arc::new(Combined {
                a: self.clone(),
                b: other.clone(),
                how,
            }),
            self.dim,
            order,
            self.delta.max(other.delta),
            kind,
        )?;
        s.label = label;
        s.fd = self.fd;
        Ok(s)
    }
}

#[derive(Clone, Copy)]
enum Combine {
    Sum,
    Product,
}

impl Combine {
    fn sym(&self) -> &'static str {
        match self {
            Combine::Sum => "+",
            Combine::Product => "*",
        }
    }
}

struct Combined {
    a: ScalarSymbol,
    b: ScalarSymbol,
    how: Combine,
}

impl SymbolFn for Combined {
    fn eval(&self, x: &[f64], xi: &[f64]) -> std::result::Result<Complex64, SymbolError> {
        let a = self.a.eval(x, xi)?;
        let b = self.b.eval(x, xi)?;
        Ok(match self.how {
            Combine::Sum => a + b,
            Combine::Product => a * b,
        })
    }

    fn jet(
        &self,
        x: &[f64],
        xi: &[f64],
        degree: usize,
    ) -> Option<std::result::Result<Jet, SymbolError>> {
        let run = || -> std::result::Result<Jet, SymbolError> {
            let a = self.a.jet(x, xi, degree)?;
            let b = self.b.jet(x, xi, degree)?;
            Ok(match self.how {
                Combine::Sum => a.add(&b),
                Combine::Product => a.mul(&b),
            })
        };
        Some(run())
    }
}

fn stencil(k: usize) -> &'static [f64] {
    match k {
        0 => &[1.0],
        1 => &[-0.5, 0.0, 0.5],
        2 => &[1.0, -2.0, 1.0],
        3 => &[-0.5, 1.0, 0.0, -1.0, 0.5],
        4 => &[1.0, -4.0, 6.0, -4.0, 1.0],
        _ => unreachable!("finite-difference order capped at 4"),
    }
}

/// All multi-indices of length `n` with |α| = `total`.
pub fn multi_indices(n: usize, total: usize) -> Vec<Vec<u8>> {
    let shape = JetShape::get(n, total);
    shape
        .indices
        .iter()
        .zip(&shape.total)
        .filter(|(_, t)| **t == total)
        .map(|(i, _)| i.clone())
        .collect()
}

/// Σ_{|α|<N} (1/α!) ∂_ξ^α a₁ · D_x^α a₂ as a symbol.
pub fn leibniz_compose_truncated(
    a1: &ScalarSymbol,
    a2: &ScalarSymbol,
    n_trunc: usize,
) -> Result<ScalarSymbol> {
    if n_trunc == 0 {
        return Err(DnError::Input(
            "truncation order N must be at least 1".into(),
        ));
    }
    if a1.dim != a2.dim {
        return Err(DnError::Input(
            "symbols live in different dimensions".into(),
        ));
    }
    if (a1.delta - a2.delta).abs() > 1e-15 {
        return Err(DnError::Input("composed symbols must share delta".into()));
    }
    let kind = if a1.kind == SymbolKind::Variable || a2.kind == SymbolKind::Variable {
        SymbolKind::Variable
    } else {
        SymbolKind::ConstantCoefficient
    };
    let label = format!("({} #{} {})", a1.label, n_trunc, a2.label);
    let mut s = ScalarSymbol::new(
        Arc::new(Leibniz {
            a1: a1.clone(),
            a2: a2.clone(),
            n: n_trunc,
        }),
        a1.dim,
        a1.order + a2.order,
        a1.delta,
        kind,
    )?;
    s.label = label;
    s.fd = a1.fd;
    Ok(s)
}

struct Leibniz {
    a1: ScalarSymbol,
    a2: ScalarSymbol,
    n: usize,
}

impl Leibniz {
    fn expand(
        &self,
        x: &[f64],
        xi: &[f64],
        degree: usize,
    ) -> std::result::Result<Jet, SymbolError> {
        let dim = self.a1.dim;
        let reach = self.n - 1;
        let j1 = self.a1.jet(x, xi, reach + degree)?;
        if self.a2.kind == SymbolKind::ConstantCoefficient || reach == 0 {
            let j2 = self.a2.jet(x, xi, degree)?;
            return Ok(j1.truncate(degree).mul(&j2));
        }
        let j2 = self.a2.jet(x, xi, reach + degree)?;
        let mut out = Jet::zero(2 * dim, degree);
        for total in 0..self.n {
            let minus_i = Complex64::new(0.0, -1.0).powu(total as u32);
            for alpha in multi_indices(dim, total) {
                let mut xi_idx = vec![0u8; dim];
                xi_idx.extend_from_slice(&alpha);
                let mut x_idx = alpha.clone();
                x_idx.extend(std::iter::repeat_n(0u8, dim));
                let d1 = j1.partial(&xi_idx, degree);
                let d2 = j2.partial(&x_idx, degree);
                let c = minus_i / multi_factorial(&alpha);
                out = out.add(&d1.mul(&d2).scale(c));
            }
        }
        Ok(out)
    }
}

impl SymbolFn for Leibniz {
    fn eval(&self, x: &[f64], xi: &[f64]) -> std::result::Result<Complex64, SymbolError> {
        Ok(self.expand(x, xi, 0)?.value())
    }

    fn jet(
        &self,
        x: &[f64],
        xi: &[f64],
        degree: usize,
    ) -> Option<std::result::Result<Jet, SymbolError>> {
        Some(self.expand(x, xi, degree))
    }
}

/// Sample set for seminorm estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    pub xs: Vec<Vec<f64>>,
    pub xis: Vec<Vec<f64>>,
}

impl SamplingGrid {
    /// Uniform x-points on [0, 2π)ⁿ and ξ on dyadic shells with ±axis and
    /// diagonal directions.
    pub fn dyadic(dim: usize, x_per_axis: usize, k_min: i32, k_max: i32) -> Self {
        let xs = uniform_points(dim, x_per_axis);
        let mut xis = vec![vec![0.0; dim]];
        for k in k_min..=k_max {
            let r = 2f64.powi(k);
            for d in directions(dim) {
                xis.push(d.iter().map(|v| v * r).collect());
            }
        }
        SamplingGrid { xs, xis }
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty() || self.xis.is_empty()
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.xis.len()
    }
}

/// Unit directions used on each dyadic shell: ±1 in one dimension, eight
/// equally spaced angles in two, axis and diagonal directions in three.
pub fn directions(dim: usize) -> Vec<Vec<f64>> {
    match dim {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..8)
            .map(|k| {
                let t = k as f64 * std::f64::consts::FRAC_PI_4;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => {
            let mut out = Vec::new();
            for i in 0..dim {
                for s in [1.0, -1.0] {
                    let mut v = vec![0.0; dim];
                    v[i] = s;
                    out.push(v);
                }
            }
            let d = 1.0 / (dim as f64).sqrt();
            out.push(vec![d; dim]);
            out.push(vec![-d; dim]);
            out
        }
    }
}

/// Uniform tensor grid of `per_axis`ⁿ points on [0, 2π)ⁿ.
pub fn uniform_points(dim: usize, per_axis: usize) -> Vec<Vec<f64>> {
    let per_axis = per_axis.max(1);
    let total = per_axis.pow(dim as u32);
    (0..total)
        .map(|mut k| {
            let mut p = vec![0.0; dim];
            for v in (0..dim).rev() {
                p[v] = 2.0 * std::f64::consts::PI * (k % per_axis) as f64 / per_axis as f64;
                k /= per_axis;
            }
            p
        })
        .collect()
}

/// Sampled seminorm ‖a‖^μ_{δ,k}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeminormEstimate {
    pub k: usize,
    pub value: f64,
    pub grid_used: GridDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDescriptor {
    pub x_points: usize,
    pub xi_points: usize,
    pub xi_max: f64,
}

/// max over samples and |α|+|β| ≤ k of |D_ξ^α D_x^β a|·⟨ξ⟩^{−μ+|α|−δ|β|}.
pub fn estimate_seminorm(
    sym: &ScalarSymbol,
    k: usize,
    grid: &SamplingGrid,
) -> Result<SeminormEstimate> {
    if grid.is_empty() {
        return Err(DnError::Input("empty sampling grid".into()));
    }
    let n = sym.dim;
    let mut best: f64 = 0.0;
    let xs: Vec<Vec<f64>> = if sym.kind == SymbolKind::ConstantCoefficient {
        vec![grid.xs[0].clone()]
    } else {
        grid.xs.clone()
    };
    for x in &xs {
        for xi in &grid.xis {
            let j = sym.jet(x, xi, k)?;
            let br = bracket(xi);
            for (pos, idx) in j.shape().indices.iter().enumerate() {
                let b: usize = idx[..n].iter().map(|&a| a as usize).sum();
                let a: usize = idx[n..].iter().map(|&a| a as usize).sum();
                let d = j.coeffs[pos].norm() * multi_factorial(idx);
                let w = br.powf(-sym.order + a as f64 - sym.delta * b as f64);
                best = best.max(d * w);
            }
        }
    }
    Ok(SeminormEstimate {
        k,
        value: best,
        grid_used: GridDescriptor {
            x_points: xs.len(),
            xi_points: grid.xis.len(),
            xi_max: grid.xis.iter().map(|v| norm(v)).fold(0.0, f64::max),
        },
    })
}

/// A q×q Douglis–Nirenberg system with order vectors l, m.
#[derive(Clone, Debug)]
pub struct DNSystem {
    pub q: usize,
    pub dim: usize,
    entries: Vec<ScalarSymbol>,
    pub l: Vec<f64>,
    pub m: Vec<f64>,
    pub r: Vec<f64>,
    pub delta: f64,
}

impl DNSystem {
    /// Build from row-major entries; rejects non-strict r ordering.
    pub fn new(entries: Vec<Vec<ScalarSymbol>>, l: Vec<f64>, m: Vec<f64>) -> Result<Self> {
        Self::build(entries, l, m, true)
    }

    /// Like [`DNSystem::new`] but without the ordering check on r.
    pub fn new_unordered(
        entries: Vec<Vec<ScalarSymbol>>,
        l: Vec<f64>,
        m: Vec<f64>,
    ) -> Result<Self> {
        Self::build(entries, l, m, false)
    }

    /// True when r₁ > … > r_q ≥ 0.
    pub fn orders_valid(&self) -> bool {
        self.r.windows(2).all(|w| w[0] > w[1]) && self.r[self.q - 1] >= 0.0
    }

    fn build(
        entries: Vec<Vec<ScalarSymbol>>,
        l: Vec<f64>,
        m: Vec<f64>,
        ordered: bool,
    ) -> Result<Self> {
        let q = l.len();
        if q == 0 {
            return Err(DnError::Input("system size q must be positive".into()));
        }
        if m.len() != q || entries.len() != q || entries.iter().any(|row| row.len() != q) {
            return Err(DnError::Input(format!(
                "system entries and order vectors must be {q}x{q}"
            )));
        }
        let r: Vec<f64> = l.iter().zip(&m).map(|(a, b)| a + b).collect();
        for w in r.windows(2) {
            if ordered && !(w[0] > w[1]) {
                return Err(DnError::Input(format!(
                    "orders not strictly decreasing: r = {r:?}"
                )));
            }
        }
        if ordered && r[q - 1] < 0.0 {
            return Err(DnError::Input(format!(
                "last diagonal order must be non-negative: r = {r:?}"
            )));
        }
        let dim = entries[0][0].dim;
        let delta = entries
            .iter()
            .flatten()
            .filter(|e| e.order > f64::NEG_INFINITY)
            .map(|e| e.delta)
            .next()
            .unwrap_or(0.0);
        for (i, row) in entries.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                if e.dim != dim {
                    return Err(DnError::Input(
                        "entries live in different dimensions".into(),
                    ));
                }
                if e.order > l[i] + m[j] + 1e-12 {
                    return Err(DnError::Input(format!(
                        "entry ({}, {}) has order {} above l_i + m_j = {}",
                        i + 1,
                        j + 1,
                        e.order,
                        l[i] + m[j]
                    )));
                }
                if e.order > f64::NEG_INFINITY && (e.delta - delta).abs() > 1e-15 {
                    return Err(DnError::Input("entries must share delta".into()));
                }
            }
        }
        let entries = entries.into_iter().flatten().collect();
        Ok(DNSystem {
            q,
            dim,
            entries,
            l,
            m,
            r,
            delta,
        })
    }

    /// Diagonal system with entries a_ii of orders r_i, l = r, m = 0.
    pub fn diagonal(diag: Vec<ScalarSymbol>) -> Result<Self> {
        let q = diag.len();
        let dim = diag.first().map(|s| s.dim).unwrap_or(1);
        let r: Vec<f64> = diag.iter().map(|s| s.order).collect();
        let mut entries = vec![vec![ScalarSymbol::zero(dim); q]; q];
        for (i, s) in diag.into_iter().enumerate() {
            entries[i][i] = s;
        }
        DNSystem::new(entries, r, vec![0.0; q])
    }

    pub fn entry(&self, i: usize, j: usize) -> &ScalarSymbol {
        &self.entries[i * self.q + j]
    }

    pub fn entries(&self) -> &[ScalarSymbol] {
        &self.entries
    }

    pub fn is_constant(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.kind == SymbolKind::ConstantCoefficient)
    }

    /// Order l_i + m_j of entry (i, j).
    pub fn entry_order(&self, i: usize, j: usize) -> f64 {
        self.l[i] + self.m[j]
    }

    fn check_point(&self, x: &[f64], xi: &[f64]) -> Result<()> {
        if x.len() != self.dim || xi.len() != self.dim {
            return Err(DnError::Input(format!(
                "dimension mismatch: x has {}, xi has {}, system has {}",
                x.len(),
                xi.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// A(x, ξ).
    pub fn eval_matrix(&self, x: &[f64], xi: &[f64]) -> Result<DMatrix<Complex64>> {
        self.check_point(x, xi)?;
        let mut out = DMatrix::zeros(self.q, self.q);
        for i in 0..self.q {
            for j in 0..self.q {
                out[(i, j)] = self.entry(i, j).eval(x, xi)?;
            }
        }
        Ok(out)
    }

    /// Row-major jets of all entries.
    pub fn jet_matrix(&self, x: &[f64], xi: &[f64], degree: usize) -> Result<Vec<Jet>> {
        self.check_point(x, xi)?;
        self.entries
            .iter()
            .map(|e| e.jet(x, xi, degree).map_err(DnError::from))
            .collect()
    }

    /// A + α·I.
    pub fn shifted(&self, alpha: f64) -> DNSystem {
        if alpha == 0.0 {
            return self.clone();
        }
        let mut out = self.clone();
        for i in 0..self.q {
            let e = &self.entries[i * self.q + i];
            let order = e.order;
            out.entries[i * self.q + i] = e
                .plus_const(Complex64::new(alpha, 0.0))
                .with_order(order.max(0.0));
        }
        out
    }

    /// A + P where P has entries of lower order.
    pub fn perturbed(&self, p: &[Vec<ScalarSymbol>]) -> Result<DNSystem> {
        let mut rows = Vec::with_capacity(self.q);
        for i in 0..self.q {
            let mut row = Vec::with_capacity(self.q);
            for j in 0..self.q {
                let s = self.entry(i, j).add(&p[i][j])?;
                row.push(s.with_order(self.entry_order(i, j)).with_delta(self.delta));
            }
            rows.push(row);
        }
        DNSystem::new(rows, self.l.clone(), self.m.clone())
    }

    /// Constant-coefficient system c_ij⟨ξ⟩^{l_i+m_j}.
    pub fn constant_bracket(
        c: &DMatrix<Complex64>,
        l: Vec<f64>,
        m: Vec<f64>,
        dim: usize,
    ) -> Result<DNSystem> {
        let q = l.len();
        if c.nrows() != q || c.ncols() != q {
            return Err(DnError::Input(
                "coefficient matrix has the wrong size".into(),
            ));
        }
        let mut rows = Vec::with_capacity(q);
        for i in 0..q {
            let mut row = Vec::with_capacity(q);
            for j in 0..q {
                let p = l[i] + m[j];
                let e = SymbolExpr::bracket(p).scaled(c[(i, j)]);
                row.push(ScalarSymbol::from_expr(e, dim, p, 0.0)?);
            }
            rows.push(row);
        }
        DNSystem::new(rows, l, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn constant_symbol_matrix() {
        let s = ScalarSymbol::constant(1, c(1.0));
        let sys = DNSystem::new(vec![vec![s]], vec![0.0], vec![0.0]).unwrap();
        let m = sys.eval_matrix(&[0.3], &[7.0]).unwrap();
        assert_eq!(m[(0, 0)], c(1.0));
    }

    #[test]
    fn diag_bracket_at_origin() {
        let sys = DNSystem::diagonal(vec![
            ScalarSymbol::bracket_pow(1, 2.0),
            ScalarSymbol::bracket_pow(1, 1.0),
        ])
        .unwrap();
        let m = sys.eval_matrix(&[0.0], &[0.0]).unwrap();
        assert_eq!(m, DMatrix::identity(2, 2));
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let sys = DNSystem::diagonal(vec![ScalarSymbol::bracket_pow(1, 2.0)]).unwrap();
        assert!(matches!(
            sys.eval_matrix(&[0.0, 1.0], &[0.0]),
            Err(DnError::Input(_))
        ));
    }

    #[test]
    fn rejects_tied_orders() {
        let e = ScalarSymbol::bracket_pow(1, 1.0);
        let err = DNSystem::diagonal(vec![e.clone(), e]).unwrap_err();
        assert!(err.to_string().contains("orders not strictly decreasing"));
    }

    #[test]
    fn rejects_entry_order_above_budget() {
        let rows = vec![
            vec![
                ScalarSymbol::bracket_pow(1, 2.0),
                ScalarSymbol::bracket_pow(1, 5.0),
            ],
            vec![ScalarSymbol::zero(1), ScalarSymbol::bracket_pow(1, 1.0)],
        ];
        assert!(DNSystem::new(rows, vec![2.0, 1.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn seminorm_examples() {
        let grid = SamplingGrid::dyadic(1, 8, -4, 20);
        let a = ScalarSymbol::bracket_pow(1, 1.5);
        let v = estimate_seminorm(&a, 0, &grid).unwrap().value;
        assert!((v - 1.0).abs() < 1e-12);

        let s = SymbolExpr::sin(vec![1.0], 0.0).times(SymbolExpr::bracket(1.0));
        let a = ScalarSymbol::from_expr(s, 1, 1.0, 0.0).unwrap();
        let grid = SamplingGrid {
            xs: uniform_points(1, 64),
            xis: grid.xis.clone(),
        };
        let v = estimate_seminorm(&a, 0, &grid).unwrap().value;
        assert!((v - 1.0).abs() < 1e-12);

        let a = ScalarSymbol::bracket_pow(1, 2.0);
        let v = estimate_seminorm(&a, 1, &grid).unwrap().value;
        // sup 2|ξ|/⟨ξ⟩ approaches 2 from below
        assert!(v <= 2.0 + 1e-12 && v > 2.0 - 1e-6, "{v}");
    }

    #[test]
    fn fd_matches_exact_jet() {
        let expr = SymbolExpr::real(2.0)
            .plus(SymbolExpr::sin(vec![1.0], 0.0))
            .times(SymbolExpr::bracket(2.0));
        let exact = ScalarSymbol::from_expr(expr.clone(), 1, 2.0, 0.0).unwrap();
        let e2 = expr.clone();
        let fd = ScalarSymbol::from_fn(1, 2.0, 0.0, SymbolKind::Variable, move |x, xi| {
            e2.eval(x, xi).unwrap()
        })
        .unwrap();
        let (x, xi) = ([0.4], [3.0]);
        let je = exact.jet(&x, &xi, 4).unwrap();
        let jf = fd.jet(&x, &xi, 4).unwrap();
        for (pos, idx) in je.shape().indices.iter().enumerate() {
            let a = je.coeffs[pos] * multi_factorial(idx);
            let b = jf.coeffs[pos] * multi_factorial(idx);
            let tol = 1e-5 * a.norm().max(1.0) * 10f64.powi(idx.iter().map(|&v| v as i32).sum());
            assert!((a - b).norm() <= tol, "{idx:?}: {a} vs {b}");
        }
        assert!(matches!(
            fd.jet(&x, &xi, 5),
            Err(SymbolError::Capability { .. })
        ));
    }

    #[test]
    fn nan_evaluation_reports_point() {
        let s = ScalarSymbol::from_fn(1, 0.0, 0.0, SymbolKind::ConstantCoefficient, |_, _| {
            Complex64::new(f64::NAN, 0.0)
        })
        .unwrap();
        match s.eval(&[0.0], &[1.0]) {
            Err(SymbolError::Evaluation { xi, .. }) => assert_eq!(xi, vec![1.0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn leibniz_xi_times_x() {
        let a1 = ScalarSymbol::from_expr(SymbolExpr::xi(0), 1, 1.0, 0.0).unwrap();
        let a2 = ScalarSymbol::from_expr(SymbolExpr::x(0), 1, 0.0, 0.0).unwrap();
        let p = leibniz_compose_truncated(&a1, &a2, 2).unwrap();
        let (x, xi) = (0.7, -1.3);
        let v = p.eval(&[x], &[xi]).unwrap();
        assert!((v - Complex64::new(x * xi, -1.0)).norm() < 1e-14);
        let p1 = leibniz_compose_truncated(&a1, &a2, 1).unwrap();
        assert!((p1.eval(&[x], &[xi]).unwrap() - c(x * xi)).norm() < 1e-14);
    }

    #[test]
    fn leibniz_jet_consistent_with_eval() {
        let a1 = ScalarSymbol::from_expr(
            SymbolExpr::bracket(2.0).times(SymbolExpr::cos(vec![1.0], 0.2)),
            1,
            2.0,
            0.0,
        )
        .unwrap();
        let a2 = ScalarSymbol::from_expr(
            SymbolExpr::sin(vec![2.0], 0.0)
                .plus(SymbolExpr::real(3.0))
                .times(SymbolExpr::bracket(1.0)),
            1,
            1.0,
            0.0,
        )
        .unwrap();
        let p = leibniz_compose_truncated(&a1, &a2, 3).unwrap();
        let (x, xi) = ([0.5], [2.0]);
        let j = p.jet(&x, &xi, 1).unwrap();
        let h = 1e-5;
        let fwd = p.eval(&[x[0] + h], &xi).unwrap();
        let bwd = p.eval(&[x[0] - h], &xi).unwrap();
        let fd = (fwd - bwd) / (2.0 * h);
        assert!((j.derivative(&[1, 0]) - fd).norm() < 1e-6 * fd.norm().max(1.0));
    }

    #[test]
    fn shift_adds_to_diagonal() {
        let sys = DNSystem::diagonal(vec![ScalarSymbol::bracket_pow(1, 2.0)]).unwrap();
        let s = sys.shifted(3.0);
        assert_eq!(s.eval_matrix(&[0.0], &[0.0]).unwrap()[(0, 0)], c(4.0));
    }
}
