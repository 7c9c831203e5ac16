//! Resolvent parametrix G⁽⁰⁾ + Σ χ(ε_ν|ξ|)G⁽ᵛ⁾ and its decay probes.
//!
//! The corrections are stored as term trees: signed sums of products
//! G⁽⁰⁾(∂_ξ^{α₁}∂_x^{β₁}A)G⁽⁰⁾…G⁽⁰⁾. The recursion is
//!
//! G⁽ᵛ⁾ = −Σ_{m+|α|=ν, m<ν} (1/α!) ∂_ξ^α G⁽ᵐ⁾ · D_x^α A · G⁽⁰⁾,
//!
//! so that Σ G⁽ᵛ⁾ is a left parametrix of A(x, ξ) − λ under the Leibniz
//! product. ξ-derivatives of a tree follow from the product rule and
//! ∂(G⁽⁰⁾) = −G⁽⁰⁾(∂A)G⁽⁰⁾.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ellipticity::Sector;
use crate::error::{DnError, Result};
use crate::jet::{multi_factorial, Jet};
use crate::linalg::{cond2, eye, linear_fit, CMat};
use crate::symbols::{bracket, excision, multi_indices, norm, uniform_points, DNSystem};

/// Condition-number cap for declaring A − λ singular.
pub const COND_CAP: f64 = 1e12;

/// Factor of a product term.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Item {
    G0,
    /// ∂_ξ^xi ∂_x^x A
    A {
        xi: Vec<u8>,
        x: Vec<u8>,
    },
}

impl Item {
    fn order(&self) -> usize {
        match self {
            Item::G0 => 0,
            Item::A { xi, x } => xi.iter().chain(x).map(|&a| a as usize).sum(),
        }
    }
}

/// coeff · Π items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coeff: Complex64,
    pub items: Vec<Item>,
}

fn merge(terms: impl IntoIterator<Item = Term>) -> Vec<Term> {
    let mut map: BTreeMap<Vec<Item>, Complex64> = BTreeMap::new();
    for t in terms {
        *map.entry(t.items).or_insert(Complex64::new(0.0, 0.0)) += t.coeff;
    }
    map.into_iter()
        .filter(|(_, c)| c.norm() > 1e-14)
        .map(|(items, coeff)| Term { coeff, items })
        .collect()
}

/// ∂_{ξ_j} of a sum of terms.
pub fn d_xi(terms: &[Term], j: usize, dim: usize) -> Vec<Term> {
    let mut e = vec![0u8; dim];
    e[j] = 1;
    let mut out = Vec::new();
    for t in terms {
        for (pos, it) in t.items.iter().enumerate() {
            match it {
                Item::G0 => {
                    let mut items = t.items[..pos].to_vec();
                    items.push(Item::G0);
                    items.push(Item::A {
                        xi: e.clone(),
                        x: vec![0; dim],
                    });
                    items.push(Item::G0);
                    items.extend_from_slice(&t.items[pos + 1..]);
                    out.push(Term {
                        coeff: -t.coeff,
                        items,
                    });
                }
                Item::A { xi, x } => {
                    let mut items = t.items.clone();
                    let mut nxi = xi.clone();
                    nxi[j] += 1;
                    items[pos] = Item::A {
                        xi: nxi,
                        x: x.clone(),
                    };
                    out.push(Term {
                        coeff: t.coeff,
                        items,
                    });
                }
            }
        }
    }
    merge(out)
}

/// ∂_ξ^α of a sum of terms.
pub fn d_xi_multi(terms: &[Term], alpha: &[u8]) -> Vec<Term> {
    let dim = alpha.len();
    let mut cur = terms.to_vec();
    for (j, &a) in alpha.iter().enumerate() {
        for _ in 0..a {
            cur = d_xi(&cur, j, dim);
        }
    }
    cur
}

/// Term trees of G⁽⁰⁾ … G⁽ᴺ⁾ in space dimension `dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermTrees {
    pub dim: usize,
    pub trees: Vec<Vec<Term>>,
}

impl TermTrees {
    pub fn new(dim: usize) -> Self {
        TermTrees {
            dim,
            trees: vec![vec![Term {
                coeff: Complex64::new(1.0, 0.0),
                items: vec![Item::G0],
            }]],
        }
    }

    /// Extend the recursion up to ν = `nu`.
    pub fn build_to(&mut self, nu: usize) {
        let dim = self.dim;
        while self.trees.len() <= nu {
            let v = self.trees.len();
            let mut out = Vec::new();
            for m in 0..v {
                let total = v - m;
                for alpha in multi_indices(dim, total) {
                    let dg = d_xi_multi(&self.trees[m], &alpha);
                    let c = -Complex64::new(0.0, -1.0).powu(total as u32) / multi_factorial(&alpha);
                    for t in dg {
                        let mut items = t.items;
                        items.push(Item::A {
                            xi: vec![0; dim],
                            x: alpha.clone(),
                        });
                        items.push(Item::G0);
                        out.push(Term {
                            coeff: t.coeff * c,
                            items,
                        });
                    }
                }
            }
            self.trees.push(merge(out));
        }
    }

    pub fn tree(&mut self, nu: usize) -> &[Term] {
        self.build_to(nu);
        &self.trees[nu]
    }
}

/// Pointwise evaluation context with cached derivatives of A.
pub struct PointEval<'a> {
    sys: &'a DNSystem,
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub lambda: Complex64,
    pub g0: CMat,
    jets: Vec<Jet>,
    cache: HashMap<(Vec<u8>, Vec<u8>), CMat>,
}

impl<'a> PointEval<'a> {
    /// Prepare evaluation with derivatives of A up to total order `degree`.
    pub fn new(
        sys: &'a DNSystem,
        x: &[f64],
        xi: &[f64],
        lambda: Complex64,
        degree: usize,
    ) -> Result<Self> {
        let g0 = g0_eval(sys, x, xi, lambda)?;
        let jets = sys.jet_matrix(x, xi, degree)?;
        Ok(PointEval {
            sys,
            x: x.to_vec(),
            xi: xi.to_vec(),
            lambda,
            g0,
            jets,
            cache: HashMap::new(),
        })
    }

    /// ∂_ξ^α ∂_x^β A at the point.
    pub fn a_deriv(&mut self, alpha: &[u8], beta: &[u8]) -> &CMat {
        let key = (alpha.to_vec(), beta.to_vec());
        let q = self.sys.q;
        let jets = &self.jets;
        self.cache.entry(key).or_insert_with(|| {
            let mut idx = beta.to_vec();
            idx.extend_from_slice(alpha);
            let mut m = CMat::zeros(q, q);
            for i in 0..q {
                for j in 0..q {
                    m[(i, j)] = jets[i * q + j].derivative(&idx);
                }
            }
            m
        })
    }

    pub fn eval_terms(&mut self, terms: &[Term]) -> CMat {
        let q = self.sys.q;
        let mut acc = CMat::zeros(q, q);
        for t in terms {
            let mut prod: Option<CMat> = None;
            for it in &t.items {
                let f = match it {
                    Item::G0 => self.g0.clone(),
                    Item::A { xi, x } => self.a_deriv(xi, x).clone(),
                };
                prod = Some(match prod {
                    None => f,
                    Some(p) => p * f,
                });
            }
            if let Some(p) = prod {
                acc += p * t.coeff;
            }
        }
        acc
    }
}

fn max_item_order(terms: &[Term]) -> usize {
    terms
        .iter()
        .flat_map(|t| t.items.iter().map(|i| i.order()))
        .max()
        .unwrap_or(0)
}

fn singular(x: &[f64], xi: &[f64], lambda: Complex64, detail: String) -> DnError {
    DnError::Singular {
        x: x.to_vec(),
        xi: xi.to_vec(),
        lambda: format!("{lambda}"),
        detail,
    }
}

/// (A(x, ξ) − λ)⁻¹ by pivoted LU.
pub fn g0_eval(sys: &DNSystem, x: &[f64], xi: &[f64], lambda: Complex64) -> Result<CMat> {
    let mut a = sys.eval_matrix(x, xi)?;
    for i in 0..sys.q {
        a[(i, i)] -= lambda;
    }
    if a.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(singular(x, xi, lambda, "non-finite matrix entries".into()));
    }
    let c = cond2(&a);
    if !(c < COND_CAP) {
        return Err(singular(
            x,
            xi,
            lambda,
            format!("condition number {c:e} exceeds cap"),
        ));
    }
    a.lu()
        .try_inverse()
        .ok_or_else(|| singular(x, xi, lambda, "LU breakdown".into()))
}

/// G⁽ᵛ⁾(x, ξ; λ) for ν ≥ 1.
pub fn gnu_eval(
    sys: &DNSystem,
    nu: usize,
    x: &[f64],
    xi: &[f64],
    lambda: Complex64,
) -> Result<CMat> {
    if nu == 0 {
        return Err(DnError::Input(
            "gnu_eval requires nu >= 1; use g0_eval for nu = 0".into(),
        ));
    }
    let mut trees = TermTrees::new(sys.dim);
    let terms = trees.tree(nu).to_vec();
    let mut pe = PointEval::new(sys, x, xi, lambda, max_item_order(&terms))?;
    Ok(pe.eval_terms(&terms))
}

/// One correction term with its tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParametrixTerm {
    pub nu: usize,
    pub term_tree: Vec<Term>,
}

/// Excision scale selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ExcisionConfig {
    /// Fixed ε₁; ε_ν = 2^{−(ν−1)}ε₁.
    Fixed { eps1: f64 },
    /// Halve ε₁ from 1 until each term obeys the calibration bound.
    Calibrate { sector_theta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excision {
    /// ε_ν for ν = 1 … N−1.
    pub eps: Vec<f64>,
}

/// Q^N = G⁽⁰⁾ + Σ_{1≤ν<N} χ(ε_ν|ξ|)G⁽ᵛ⁾.
#[derive(Debug, Clone)]
pub struct TruncatedParametrix {
    pub n: usize,
    pub terms: Vec<ParametrixTerm>,
    pub excision: Excision,
    sys: DNSystem,
}

impl TruncatedParametrix {
    pub fn system(&self) -> &DNSystem {
        &self.sys
    }

    /// Q^N(x, ξ; λ).
    pub fn eval(&self, x: &[f64], xi: &[f64], lambda: Complex64) -> Result<CMat> {
        let corrections: Vec<(f64, &ParametrixTerm)> = self.terms[1..]
            .iter()
            .zip(&self.excision.eps)
            .map(|(t, e)| (excision(e * norm(xi)), t))
            .filter(|(c, _)| *c != 0.0)
            .collect();
        let degree = corrections
            .iter()
            .map(|(_, t)| max_item_order(&t.term_tree))
            .max()
            .unwrap_or(0);
        let mut pe = PointEval::new(&self.sys, x, xi, lambda, degree)?;
        let mut out = pe.g0.clone();
        for (c, t) in corrections {
            out += pe.eval_terms(&t.term_tree) * Complex64::new(c, 0.0);
        }
        Ok(out)
    }
}

/// Build the truncated parametrix for ν < N.
pub fn build_truncated_parametrix(
    sys: &DNSystem,
    n: usize,
    config: ExcisionConfig,
) -> Result<TruncatedParametrix> {
    if n == 0 {
        return Err(DnError::Input(
            "truncation order N must be at least 1".into(),
        ));
    }
    let mut trees = TermTrees::new(sys.dim);
    trees.build_to(n.saturating_sub(1));
    let terms: Vec<ParametrixTerm> = (0..n)
        .map(|nu| ParametrixTerm {
            nu,
            term_tree: trees.trees[nu].clone(),
        })
        .collect();
    let eps1 = match config {
        ExcisionConfig::Fixed { eps1 } => {
            if !(eps1 > 0.0) {
                return Err(DnError::Input("eps1 must be positive".into()));
            }
            eps1
        }
        ExcisionConfig::Calibrate { sector_theta } => calibrate_eps1(sys, &terms, sector_theta)?,
    };
    let eps = (1..n)
        .map(|nu| eps1 * 2f64.powi(-(nu as i32 - 1)))
        .collect();
    Ok(TruncatedParametrix {
        n,
        terms,
        excision: Excision { eps },
        sys: sys.clone(),
    })
}

fn calibrate_eps1(sys: &DNSystem, terms: &[ParametrixTerm], theta: f64) -> Result<f64> {
    if terms.len() <= 1 {
        return Ok(1.0);
    }
    let sector = Sector::new(theta)?;
    let xs = if sys.is_constant() {
        vec![vec![0.0; sys.dim]]
    } else {
        uniform_points(sys.dim, 8)
    };
    let lambdas = [
        Complex64::new(-1.0, 0.0),
        sector.boundary_point(1.0, true),
        sector.boundary_point(16.0, false),
        sector.boundary_point(256.0, true),
    ];
    let mut dir = vec![0.0; sys.dim];
    dir[0] = 1.0;
    // Largest observed ‖G⁽ᵛ⁾‖/‖G⁽⁰⁾‖ at each |ξ|.
    let mut samples: Vec<(f64, Vec<f64>)> = Vec::new();
    for k in 0..=12 {
        let r = 2f64.powi(k);
        let xi: Vec<f64> = dir.iter().map(|d| d * r).collect();
        let mut worst = vec![0.0; terms.len()];
        for x in &xs {
            for &lam in &lambdas {
                let degree = terms
                    .iter()
                    .map(|t| max_item_order(&t.term_tree))
                    .max()
                    .unwrap_or(0);
                let mut pe = match PointEval::new(sys, x, &xi, lam, degree) {
                    Ok(p) => p,
                    Err(DnError::Singular { .. }) => continue,
                    Err(e) => return Err(e),
                };
                let g0n = crate::linalg::norm2(&pe.g0);
                for (nu, t) in terms.iter().enumerate().skip(1) {
                    let v = crate::linalg::norm2(&pe.eval_terms(&t.term_tree));
                    worst[nu] = f64::max(worst[nu], v / g0n);
                }
            }
        }
        samples.push((r, worst));
    }
    let mut eps1 = 1.0;
    for _ in 0..60 {
        let ok = samples.iter().all(|(r, worst)| {
            (1..terms.len()).all(|nu| {
                let e = eps1 * 2f64.powi(-(nu as i32 - 1));
                excision(e * r) * worst[nu] <= 2f64.powi(-(nu as i32))
            })
        });
        if ok {
            return Ok(eps1);
        }
        eps1 *= 0.5;
    }
    Ok(eps1)
}

/// Quantities measured by [`decay_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeQuantity {
    #[serde(rename = "J_minus_1")]
    JMinus1,
    #[serde(rename = "G_minus_G0")]
    GMinusG0,
    G0DiagBound,
    G0OffdiagBound,
    GnuBound,
}

/// Sample set for decay probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub xs: Vec<Vec<f64>>,
    /// |ξ| values (taken along the first axis).
    pub xi_norms: Vec<f64>,
    /// λ values used for slope fitting.
    pub fit_lambdas: Vec<Complex64>,
    /// Extra λ values, typically large, used for the λ-decay check only.
    pub sweep_lambdas: Vec<Complex64>,
    /// Leibniz depth for J^N − 1; `None` means N + 1.
    pub depth: Option<usize>,
}

impl ProbeGrid {
    /// Dyadic |ξ| = 2^k, k_min ≤ k ≤ k_max, with `per_octave` points per
    /// octave; λ = −1, e^{±iθ} for fits and 2^k e^{±iθ}, k ≤ 20, for decay.
    pub fn dyadic(
        dim: usize,
        sector: &Sector,
        k_min: i32,
        k_max: i32,
        per_octave: usize,
        x_per_axis: usize,
    ) -> Self {
        let per = per_octave.max(1);
        let xi_norms = (0..=((k_max - k_min) as usize * per))
            .map(|s| 2f64.powf(k_min as f64 + s as f64 / per as f64))
            .collect();
        let fit_lambdas = vec![
            Complex64::new(-1.0, 0.0),
            sector.boundary_point(1.0, true),
            sector.boundary_point(1.0, false),
        ];
        let sweep_lambdas = (0..=20)
            .step_by(2)
            .flat_map(|k| {
                let r = 2f64.powi(k);
                [
                    sector.boundary_point(r, true),
                    sector.boundary_point(r, false),
                ]
            })
            .collect();
        ProbeGrid {
            xs: uniform_points(dim, x_per_axis),
            xi_norms,
            fit_lambdas,
            sweep_lambdas,
            depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub xi_norm: f64,
    pub lambda_abs: f64,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Result of a decay probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProbe {
    pub quantity: ProbeQuantity,
    #[serde(rename = "N")]
    pub n: usize,
    /// Worst (largest) fitted log–log slope in ⟨ξ⟩ over the fit λ values;
    /// −∞ when every sample is exactly zero.
    #[serde(with = "slope_serde")]
    pub fitted_slope: f64,
    pub lambda_decay_ok: bool,
    /// Largest sampled value.
    pub sup_value: f64,
    pub samples: Vec<ProbeSample>,
}

pub(crate) mod slope_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            v.serialize(s)
        } else if *v < 0.0 {
            "-inf".serialize(s)
        } else {
            "inf".serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum V {
            N(f64),
            S(String),
        }
        Ok(match V::deserialize(d)? {
            V::N(v) => v,
            V::S(s) if s == "-inf" => f64::NEG_INFINITY,
            V::S(_) => f64::INFINITY,
        })
    }
}

/// Cap for the λ-decay check.
pub const LAMBDA_DECAY_CAP: f64 = 1e8;

impl DecayProbe {
    /// CSV with a JSON header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = serde_json::json!({
            "quantity": self.quantity,
            "N": self.n,
            "fitted_slope": if self.fitted_slope.is_finite() { serde_json::json!(self.fitted_slope) } else { serde_json::json!("-inf") },
            "lambda_decay_ok": self.lambda_decay_ok,
        });
        writeln!(w, "# {header}")?;
        writeln!(w, "xi_norm,lambda_abs,i,j,value")?;
        for s in &self.samples {
            writeln!(
                w,
                "{:e},{:e},{},{},{:e}",
                s.xi_norm, s.lambda_abs, s.i, s.j, s.value
            )?;
        }
        Ok(())
    }
}

/// Terms of J^N − 1 = Σ_{ν<N, |α|<depth, ν+|α|≥N} (1/α!) ∂_ξ^α G⁽ᵛ⁾ · D_x^α A.
pub fn j_minus_one_terms(trees: &mut TermTrees, n: usize, depth: usize) -> Vec<Term> {
    let dim = trees.dim;
    trees.build_to(n.saturating_sub(1));
    let mut out = Vec::new();
    for nu in 0..n {
        for total in 0..depth {
            if nu + total < n {
                continue;
            }
            for alpha in multi_indices(dim, total) {
                let dg = d_xi_multi(&trees.trees[nu], &alpha);
                let c = Complex64::new(0.0, -1.0).powu(total as u32) / multi_factorial(&alpha);
                for t in dg {
                    let mut items = t.items;
                    items.push(Item::A {
                        xi: vec![0; dim],
                        x: alpha.clone(),
                    });
                    out.push(Term {
                        coeff: t.coeff * c,
                        items,
                    });
                }
            }
        }
    }
    merge(out)
}

struct ProbeSetup {
    terms: Vec<Term>,
    degree: usize,
    nu_power: f64,
}

/// Sample one of the decay quantities and fit its ⟨ξ⟩-slope.
pub fn decay_probe(
    sys: &DNSystem,
    quantity: ProbeQuantity,
    n: usize,
    sector: &Sector,
    grid: &ProbeGrid,
) -> Result<DecayProbe> {
    if grid.xi_norms.len() < 3 {
        return Err(DnError::Fit(format!(
            "need at least 3 dyadic points, got {}",
            grid.xi_norms.len()
        )));
    }
    if n == 0 {
        return Err(DnError::Input("N must be at least 1".into()));
    }
    if quantity == ProbeQuantity::G0OffdiagBound && sys.q == 1 {
        return Err(DnError::Input("off-diagonal bound needs q >= 2".into()));
    }
    let _ = sector;
    let q = sys.q;
    let mut trees = TermTrees::new(sys.dim);
    let setup = match quantity {
        ProbeQuantity::JMinus1 => {
            let depth = grid.depth.unwrap_or(n + 1);
            let terms = j_minus_one_terms(&mut trees, n, depth);
            ProbeSetup {
                degree: max_item_order(&terms),
                terms,
                nu_power: 0.0,
            }
        }
        ProbeQuantity::GMinusG0 => {
            trees.build_to(n.saturating_sub(1));
            let terms: Vec<Term> = trees.trees[1..n].iter().flatten().cloned().collect();
            ProbeSetup {
                degree: max_item_order(&terms),
                terms: merge(terms),
                nu_power: 0.0,
            }
        }
        ProbeQuantity::G0DiagBound | ProbeQuantity::G0OffdiagBound => ProbeSetup {
            terms: trees.trees[0].clone(),
            degree: 0,
            nu_power: 0.0,
        },
        ProbeQuantity::GnuBound => {
            let terms = trees.tree(n).to_vec();
            ProbeSetup {
                degree: max_item_order(&terms),
                terms,
                nu_power: (1.0 - sys.delta) * n as f64,
            }
        }
    };
    let xs: Vec<Vec<f64>> = if sys.is_constant() {
        vec![grid
            .xs
            .first()
            .cloned()
            .unwrap_or_else(|| vec![0.0; sys.dim])]
    } else {
        grid.xs.clone()
    };
    let mut lambdas: Vec<(Complex64, bool)> = grid.fit_lambdas.iter().map(|l| (*l, true)).collect();
    lambdas.extend(grid.sweep_lambdas.iter().map(|l| (*l, false)));
    let jobs: Vec<(usize, usize)> = (0..lambdas.len())
        .flat_map(|li| (0..grid.xi_norms.len()).map(move |k| (li, k)))
        .collect();
    let rows: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(li, k)| {
            let lam = lambdas[li].0;
            let mut xi = vec![0.0; sys.dim];
            xi[0] = grid.xi_norms[k];
            let br = bracket(&xi);
            let mut vals = vec![0.0; q * q];
            for x in &xs {
                let mut pe = PointEval::new(sys, x, &xi, lam, setup.degree)?;
                let m = pe.eval_terms(&setup.terms);
                for i in 0..q {
                    for j in 0..q {
                        let lij = sys.l[i] + sys.m[j];
                        let ri = br.powf(sys.r[i]) + lam.norm();
                        let rj = br.powf(sys.r[j]) + lam.norm();
                        let w = match quantity {
                            ProbeQuantity::JMinus1 => br.powf(-lij) * ri,
                            ProbeQuantity::G0DiagBound => {
                                if i != j {
                                    continue;
                                }
                                ri
                            }
                            ProbeQuantity::G0OffdiagBound => {
                                if i == j {
                                    continue;
                                }
                                ri * rj * br.powf(-lij)
                            }
                            ProbeQuantity::GMinusG0 | ProbeQuantity::GnuBound => {
                                ri * rj * br.powf(-lij + setup.nu_power)
                            }
                        };
                        let v = m[(i, j)].norm() * w;
                        let slot = &mut vals[i * q + j];
                        *slot = f64::max(*slot, v);
                    }
                }
            }
            Ok(vals)
        })
        .collect();
    let mut table = vec![vec![Vec::new(); grid.xi_norms.len()]; lambdas.len()];
    for (&(li, k), row) in jobs.iter().zip(rows) {
        table[li][k] = row?;
    }
    let mut samples = Vec::new();
    let mut sup: f64 = 0.0;
    let mut finite_ok = true;
    let mut slope = f64::NEG_INFINITY;
    let mut any_fit = false;
    for (li, (lam, fit)) in lambdas.iter().enumerate() {
        let mut lx = Vec::new();
        let mut ly = Vec::new();
        for (k, r) in grid.xi_norms.iter().enumerate() {
            let row = &table[li][k];
            let mut worst: f64 = 0.0;
            for i in 0..q {
                for j in 0..q {
                    let keep = match quantity {
                        ProbeQuantity::G0DiagBound => i == j,
                        ProbeQuantity::G0OffdiagBound => i != j,
                        _ => true,
                    };
                    if !keep {
                        continue;
                    }
                    let v = row[i * q + j];
                    if !v.is_finite() || v > LAMBDA_DECAY_CAP {
                        finite_ok = false;
                    }
                    worst = worst.max(v);
                    sup = sup.max(v);
                    samples.push(ProbeSample {
                        xi_norm: *r,
                        lambda_abs: lam.norm(),
                        i: i + 1,
                        j: j + 1,
                        value: v,
                    });
                }
            }
            if *fit && worst > 0.0 {
                lx.push(bracket(&[*r]).ln());
                ly.push(worst.ln());
            }
        }
        if *fit && !lx.is_empty() {
            if lx.len() < 3 {
                return Err(DnError::Fit(
                    "fewer than 3 nonzero samples for the slope fit".into(),
                ));
            }
            let (s, _) = linear_fit(&lx, &ly)?;
            slope = slope.max(s);
            any_fit = true;
        }
    }
    if !any_fit {
        slope = f64::NEG_INFINITY;
    }
    Ok(DecayProbe {
        quantity,
        n,
        fitted_slope: slope,
        lambda_decay_ok: finite_ok,
        sup_value: sup,
        samples,
    })
}

/// ‖G⁽⁰⁾(A − λ) − I‖ at a point, for residual checks.
pub fn left_inverse_residual(
    sys: &DNSystem,
    x: &[f64],
    xi: &[f64],
    lambda: Complex64,
) -> Result<(f64, f64)> {
    let g = g0_eval(sys, x, xi, lambda)?;
    let mut a = sys.eval_matrix(x, xi)?;
    for i in 0..sys.q {
        a[(i, i)] -= lambda;
    }
    let r = &g * &a - eye(sys.q);
    Ok((crate::linalg::norm2(&r), cond2(&a)))
}
