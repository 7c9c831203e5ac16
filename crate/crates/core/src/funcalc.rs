//! Holomorphic functional calculus by Dunford contour quadrature.
//!
//! For f holomorphic and bounded on ℂ∖Λ,
//! f(𝒜) = (2πi)⁻¹ ∫_Γ f(λ)(λ − 𝒜)⁻¹ dλ, where Γ = ∂Λ runs in along the
//! upper ray and out along the lower ray (ℂ∖Λ on the left).
//! Each ray is split into [0, r_min], geometric ratio-2 panels up to
//! r_max, and a tail panel [r_max, ∞) mapped by t = 1/u.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretize::{DiscreteOperator, TorusGrid};
use crate::ellipticity::Sector;
use crate::error::{DnError, Result};
use crate::linalg::{cond2, eig, gauss_legendre, norm2, CMat};
use crate::symbols::{bracket, estimate_seminorm, DNSystem, SamplingGrid, ScalarSymbol};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// A holomorphic function on ℂ∖Λ with its decay exponent.
#[derive(Clone)]
pub struct HFunction {
    pub label: String,
    /// Family index k for the rational family, if any.
    pub k: Option<usize>,
    /// Rotation φ in λ ↦ f(e^{iφ}λ).
    pub phi: f64,
    /// Decay exponent s in |f(λ)| ≲ min(|λ|^s, |λ|^{−s}).
    pub decay_s: f64,
    /// Poles of f (all inside Λ).
    pub poles: Vec<Complex64>,
    func: Arc<dyn Fn(Complex64) -> Complex64 + Send + Sync>,
}

impl fmt::Debug for HFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HFunction")
            .field("label", &self.label)
            .field("decay_s", &self.decay_s)
            .finish()
    }
}

impl HFunction {
    pub fn new<F>(label: &str, decay_s: f64, poles: Vec<Complex64>, f: F) -> Self
    where
        F: Fn(Complex64) -> Complex64 + Send + Sync + 'static,
    {
        HFunction {
            label: label.to_string(),
            k: None,
            phi: 0.0,
            decay_s,
            poles,
            func: Arc::new(f),
        }
    }

    /// f_k(e^{iφ}λ) with f_k(z) = z^k (1 + z)^{−2k}.
    pub fn rational(k: usize, phi: f64) -> Self {
        let rot = Complex64::from_polar(1.0, phi);
        let mut h = HFunction::new(
            &format!("f_{k}(phi={phi})"),
            k as f64,
            vec![-rot.conj()],
            move |l| {
                let z = rot * l;
                (z / ((1.0 + z) * (1.0 + z))).powu(k as u32)
            },
        );
        h.k = Some(k);
        h.phi = phi;
        h
    }

    /// (c + λ)⁻¹.
    pub fn inverse_shift(c: f64) -> Self {
        HFunction::new(
            &format!("(lambda+{c})^-1"),
            1.0,
            vec![Complex64::new(-c, 0.0)],
            move |l| 1.0 / (c + l),
        )
    }

    pub fn zero() -> Self {
        HFunction::new("0", 1.0, Vec::new(), |_| ZERO)
    }

    pub fn product(a: &HFunction, b: &HFunction) -> Self {
        let (fa, fb) = (a.func.clone(), b.func.clone());
        let mut poles = a.poles.clone();
        poles.extend(&b.poles);
        HFunction::new(
            &format!("{}*{}", a.label, b.label),
            a.decay_s + b.decay_s,
            poles,
            move |l| fa(l) * fb(l),
        )
    }

    pub fn eval(&self, l: Complex64) -> Complex64 {
        (self.func)(l)
    }

    /// Sampled sup of |f| over ∂Λ (dense log sweep on both rays) plus 64
    /// points on interior rays.
    pub fn sup_norm(&self, theta: f64) -> f64 {
        let mut best = 0.0f64;
        let n = 4001;
        for i in 0..n {
            let t = 10f64.powf(-8.0 + 16.0 * i as f64 / (n - 1) as f64);
            for phi in [theta, -theta] {
                best = best.max(self.eval(Complex64::from_polar(t, phi)).norm());
            }
        }
        for i in 0..64 {
            let t = 10f64.powf(-6.0 + 12.0 * (i / 2) as f64 / 31.0);
            let phi = if i % 2 == 0 { 0.0 } else { 0.5 * theta };
            best = best.max(self.eval(Complex64::from_polar(t, phi)).norm());
        }
        best
    }

    /// max_j |f(λ_j)| · (|λ_j|^{−s} + |λ_j|^s)⁻¹ sampled weighting check.
    pub fn decay_ratio(&self, theta: f64) -> f64 {
        let s = self.decay_s;
        let mut best = 0.0f64;
        for i in 0..=400 {
            let t = 10f64.powf(-8.0 + 16.0 * i as f64 / 400.0);
            let w = t.powf(-s) + t.powf(s);
            for phi in [theta, -theta] {
                best = best.max(self.eval(Complex64::from_polar(t, phi)).norm() * w);
            }
        }
        best
    }
}

/// The default test family f_k, k = 1…8, with rotations 0 and ±φ.
pub fn rational_family(phi: f64) -> Vec<HFunction> {
    let mut out = Vec::new();
    for k in 1..=8 {
        out.push(HFunction::rational(k, 0.0));
        if phi != 0.0 {
            out.push(HFunction::rational(k, phi));
            out.push(HFunction::rational(k, -phi));
        }
    }
    out
}

/// Quadrature rule on ∂Λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorContour {
    pub theta: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub nodes_per_panel: usize,
    pub panels_per_ray: usize,
    /// Nodes λ_j.
    pub nodes: Vec<Complex64>,
    /// Weights including dλ and the 1/(2πi) factor.
    pub weights: Vec<Complex64>,
    /// Marks nodes of the [r_max, ∞) panel.
    tail_mask: Vec<bool>,
}

impl SectorContour {
    pub fn new(theta: f64, r_min: f64, r_max: f64, nodes_per_panel: usize) -> Result<Self> {
        Sector::new(theta)?;
        if !(r_min > 0.0 && r_max > r_min) || nodes_per_panel == 0 {
            return Err(DnError::Input(
                "contour needs 0 < r_min < r_max and nodes per panel > 0".into(),
            ));
        }
        let rule = gauss_legendre(nodes_per_panel);
        let mut edges = vec![0.0, r_min];
        while *edges.last().expect("nonempty") < r_max {
            let next = (edges.last().expect("nonempty") * 2.0).min(r_max);
            edges.push(next);
        }
        let mut radial: Vec<(f64, f64, bool)> = Vec::new();
        for w in edges.windows(2) {
            let (a, b) = (w[0], w[1]);
            for (x, wt) in &rule {
                radial.push((0.5 * (a + b) + 0.5 * (b - a) * x, 0.5 * (b - a) * wt, false));
            }
        }
        let ub = 1.0 / r_max;
        for (x, wt) in &rule {
            let u = 0.5 * ub * (1.0 + x);
            radial.push((1.0 / u, 0.5 * ub * wt / (u * u), true));
        }
        let pref = 1.0 / (2.0 * PI * I);
        let up = Complex64::from_polar(1.0, theta);
        let down = up.conj();
        let mut nodes = Vec::with_capacity(2 * radial.len());
        let mut weights = Vec::with_capacity(2 * radial.len());
        let mut tail_mask = Vec::with_capacity(2 * radial.len());
        for &(t, w, tail) in &radial {
            nodes.push(up * t);
            weights.push(-up * w * pref);
            tail_mask.push(tail);
            nodes.push(down * t);
            weights.push(down * w * pref);
            tail_mask.push(tail);
        }
        Ok(SectorContour {
            theta,
            r_min,
            r_max,
            nodes_per_panel,
            panels_per_ray: edges.len(),
            nodes,
            weights,
            tail_mask,
        })
    }

    /// Default rule: r_min = 1e-6, r_max = 1e6, 8 nodes per panel.
    pub fn default_for(theta: f64) -> Result<Self> {
        SectorContour::new(theta, 1e-6, 1e6, 8)
    }

    pub fn with_nodes(&self, nodes_per_panel: usize) -> Result<Self> {
        SectorContour::new(self.theta, self.r_min, self.r_max, nodes_per_panel)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// An operator whose resolvent can be evaluated on the contour.
pub trait CalcTarget: Sync {
    /// Number of independent blocks (Fourier modes, or 1 for a dense matrix).
    fn blocks(&self) -> usize;
    /// (λ − 𝒜)⁻¹ per block.
    fn resolvent(&self, lambda: Complex64) -> Result<Vec<CMat>>;
    /// ‖·‖ in ℒ(ℋ) of a block-structured operator.
    fn h_norm(&self, v: &[CMat]) -> f64;
    /// Matrices of 𝒜 per block.
    fn matrices(&self) -> Vec<&CMat>;
    /// Upper bound for the spectral radius.
    fn scale(&self) -> f64 {
        self.matrices()
            .iter()
            .map(|m| {
                (0..m.nrows())
                    .map(|r| m.row(r).iter().map(|v| v.norm()).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

fn inverse_at(m: &CMat, lambda: Complex64) -> Result<CMat> {
    let mut a = -m.clone();
    for d in 0..a.nrows() {
        a[(d, d)] += lambda;
    }
    a.lu()
        .try_inverse()
        .ok_or_else(|| DnError::Contour(format!("lambda - A is singular at lambda = {lambda}")))
}

/// Fourier-multiplier operator given by its q×q matrices per mode.
#[derive(Debug, Clone)]
pub struct ModeOperator {
    pub modes: Vec<CMat>,
    /// ℋ weights ⟨ξ_k⟩^{s−lᵢ} per mode.
    pub weights: Vec<Vec<f64>>,
}

impl ModeOperator {
    /// A(ξ_k) + α for a constant-coefficient system.
    pub fn from_system(sys: &DNSystem, grid: &TorusGrid, alpha: f64, s: f64) -> Result<Self> {
        if !sys.is_constant() {
            return Err(DnError::Input(
                "mode operator needs a constant-coefficient system".into(),
            ));
        }
        if sys.dim != grid.n {
            return Err(DnError::Input("system and grid dimensions differ".into()));
        }
        let x0 = vec![0.0; sys.dim];
        let mut modes = Vec::with_capacity(grid.size());
        let mut weights = Vec::with_capacity(grid.size());
        for xi in grid.frequencies() {
            let mut a = sys.eval_matrix(&x0, &xi)?;
            for d in 0..sys.q {
                a[(d, d)] += alpha;
            }
            let b = bracket(&xi);
            weights.push(sys.l.iter().map(|l| b.powf(s - l)).collect());
            modes.push(a);
        }
        Ok(ModeOperator { modes, weights })
    }
}

impl CalcTarget for ModeOperator {
    fn blocks(&self) -> usize {
        self.modes.len()
    }

    fn resolvent(&self, lambda: Complex64) -> Result<Vec<CMat>> {
        self.modes.iter().map(|m| inverse_at(m, lambda)).collect()
    }

    fn h_norm(&self, v: &[CMat]) -> f64 {
        v.iter()
            .zip(&self.weights)
            .map(|(b, w)| {
                let mut s = b.clone();
                for r in 0..s.nrows() {
                    for c in 0..s.ncols() {
                        s[(r, c)] *= w[r] / w[c];
                    }
                }
                norm2(&s)
            })
            .fold(0.0, f64::max)
    }

    fn matrices(&self) -> Vec<&CMat> {
        self.modes.iter().collect()
    }
}

impl CalcTarget for DiscreteOperator {
    fn blocks(&self) -> usize {
        1
    }

    fn resolvent(&self, lambda: Complex64) -> Result<Vec<CMat>> {
        Ok(vec![inverse_at(&self.matrix, lambda)?])
    }

    fn h_norm(&self, v: &[CMat]) -> f64 {
        DiscreteOperator::h_norm(self, &v[0])
    }

    fn matrices(&self) -> Vec<&CMat> {
        vec![&self.matrix]
    }
}

/// f(M) via eigendecomposition when cond(V) < 10⁸, else by a trapezoid
/// rule on a circle around the spectrum refined to 10⁻¹⁰.
pub fn matrix_holo_calc(f: &HFunction, m: &CMat) -> Result<CMat> {
    let n = m.nrows();
    if n == 0 {
        return Ok(CMat::zeros(0, 0));
    }
    let (vals, v) = eig(m)?;
    let scale = vals.iter().map(|z| z.norm()).fold(1.0, f64::max);
    for z in &vals {
        for p in &f.poles {
            if (z - p).norm() <= 1e-12 * scale {
                return Err(DnError::Domain(format!(
                    "eigenvalue {z} hits a pole of {}",
                    f.label
                )));
            }
        }
    }
    if cond2(&v) < 1e8 {
        let vinv = v
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| DnError::Numerical("eigenvector matrix is singular".into()))?;
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            n,
            vals.iter().map(|z| f.eval(*z)),
        ));
        return Ok(v * d * vinv);
    }
    let center = vals.iter().sum::<Complex64>() / n as f64;
    let spread = vals.iter().map(|z| (z - center).norm()).fold(0.0, f64::max);
    let radius = (1.5 * spread).max(0.1 * (1.0 + center.norm()));
    if f.poles.iter().any(|p| (p - center).norm() <= radius * 1.05) {
        return Err(DnError::Domain(format!(
            "spectrum of a non-diagonalizable matrix is too close to a pole of {}",
            f.label
        )));
    }
    let circle = |count: usize| -> Result<CMat> {
        let mut acc = CMat::zeros(n, n);
        for j in 0..count {
            let w = Complex64::from_polar(1.0, 2.0 * PI * j as f64 / count as f64);
            let z = center + w * radius;
            acc += inverse_at(m, z)? * (f.eval(z) * w * radius);
        }
        Ok(acc / Complex64::new(count as f64, 0.0))
    };
    let mut count = 32;
    let mut prev = circle(count)?;
    while count < 1 << 14 {
        count *= 2;
        let cur = circle(count)?;
        let diff = (&cur - &prev).norm();
        if diff <= 1e-10 * cur.norm().max(f64::MIN_POSITIVE) || diff == 0.0 {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(DnError::Quadrature(format!(
        "circle rule for {} did not settle",
        f.label
    )))
}

/// Quadrature metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureInfo {
    pub theta: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub nodes_per_panel: usize,
    pub panels_per_ray: usize,
    pub total_nodes: usize,
    /// Relative change of the last node doubling.
    pub last_change: f64,
    /// Size of the contribution of the [r_max, ∞) panels relative to the result.
    pub tail_estimate: f64,
}

/// f(𝒜) for each f in `fs`, one contour pass per rule.
fn quadrature_pass(
    target: &dyn CalcTarget,
    fs: &[HFunction],
    contour: &SectorContour,
) -> Result<(Vec<Vec<CMat>>, Vec<Vec<CMat>>)> {
    let nb = target.blocks();
    let dims: Vec<usize> = target.matrices().iter().map(|m| m.nrows()).collect();
    let zeros = || -> Vec<Vec<CMat>> {
        fs.iter()
            .map(|_| dims.iter().map(|&d| CMat::zeros(d, d)).collect())
            .collect()
    };
    let idx: Vec<usize> = (0..contour.len()).collect();
    let chunk = 16;
    let partials: Vec<Result<(Vec<Vec<CMat>>, Vec<Vec<CMat>>)>> = idx
        .par_chunks(chunk)
        .map(|c| {
            let mut acc = zeros();
            let mut tail = zeros();
            for &j in c {
                let lam = contour.nodes[j];
                let res = target.resolvent(lam)?;
                for (fi, f) in fs.iter().enumerate() {
                    let w = contour.weights[j] * f.eval(lam);
                    if w == ZERO {
                        continue;
                    }
                    let dst = if contour.tail_mask[j] {
                        &mut tail[fi]
                    } else {
                        &mut acc[fi]
                    };
                    for b in 0..nb {
                        dst[b] += &res[b] * w;
                    }
                }
            }
            Ok((acc, tail))
        })
        .collect();
    let mut acc = zeros();
    let mut tail = zeros();
    for p in partials {
        let (a, t) = p?;
        for fi in 0..fs.len() {
            for b in 0..nb {
                acc[fi][b] += &a[fi][b];
                tail[fi][b] += &t[fi][b];
            }
        }
    }
    for fi in 0..fs.len() {
        for b in 0..nb {
            let t = tail[fi][b].clone();
            acc[fi][b] += t;
        }
    }
    Ok((acc, tail))
}

fn frob(v: &[CMat]) -> f64 {
    v.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
}

/// √Σ‖aᵢ − bᵢ‖²_F / √Σ‖bᵢ‖²_F (absolute when b = 0).
pub fn relative_difference(a: &[CMat], b: &[CMat]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm_squared())
        .sum::<f64>()
        .sqrt();
    let nb = frob(b);
    if nb == 0.0 {
        d
    } else {
        d / nb
    }
}

/// Result of a Dunford evaluation.
#[derive(Debug, Clone)]
pub struct DunfordResult {
    /// values[i] = fᵢ(𝒜) per block.
    pub values: Vec<Vec<CMat>>,
    pub info: QuadratureInfo,
}

/// Evaluate fᵢ(𝒜) by contour quadrature, doubling the nodes per panel
/// until two rules agree to 10⁻⁶ relative (at most 128 nodes per panel).
pub fn dunford_eval_many(
    target: &dyn CalcTarget,
    fs: &[HFunction],
    contour: &SectorContour,
) -> Result<DunfordResult> {
    dunford_eval_tol(target, fs, contour, 1e-6)
}

pub fn dunford_eval_tol(
    target: &dyn CalcTarget,
    fs: &[HFunction],
    contour: &SectorContour,
    tol: f64,
) -> Result<DunfordResult> {
    let r_max = contour.r_max.max(64.0 * target.scale());
    let mut rule =
        SectorContour::new(contour.theta, contour.r_min, r_max, contour.nodes_per_panel)?;
    let (mut prev, _) = quadrature_pass(target, fs, &rule)?;
    loop {
        let finer = rule.with_nodes(rule.nodes_per_panel * 2)?;
        let (cur, tail) = quadrature_pass(target, fs, &finer)?;
        let change = cur
            .iter()
            .zip(&prev)
            .map(|(a, b)| relative_difference(a, b))
            .fold(0.0, f64::max);
        let tail_estimate = tail
            .iter()
            .zip(&cur)
            .map(|(t, c)| {
                let n = frob(c);
                if n == 0.0 {
                    frob(t)
                } else {
                    frob(t) / n
                }
            })
            .fold(0.0, f64::max);
        if change <= tol {
            return Ok(DunfordResult {
                values: cur,
                info: QuadratureInfo {
                    theta: finer.theta,
                    r_min: finer.r_min,
                    r_max: finer.r_max,
                    nodes_per_panel: finer.nodes_per_panel,
                    panels_per_ray: finer.panels_per_ray,
                    total_nodes: finer.len(),
                    last_change: change,
                    tail_estimate,
                },
            });
        }
        if finer.nodes_per_panel >= 128 {
            return Err(DnError::Quadrature(format!(
                "relative change {change:e} after {} nodes per panel",
                finer.nodes_per_panel
            )));
        }
        prev = cur;
        rule = finer;
    }
}

/// Single-function convenience wrapper.
pub fn dunford_eval(
    target: &dyn CalcTarget,
    f: &HFunction,
    contour: &SectorContour,
) -> Result<DunfordResult> {
    dunford_eval_many(target, std::slice::from_ref(f), contour)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionRatio {
    pub label: String,
    pub k: Option<usize>,
    pub phi: f64,
    pub sup_norm: f64,
    pub op_norm: f64,
    pub ratio: f64,
}

/// M_estimate = max ‖f(𝒜)‖_ℋ/‖f‖_∞ over a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalculusResult {
    pub per_function: Vec<FunctionRatio>,
    #[serde(rename = "M_estimate")]
    pub m_estimate: f64,
    pub quadrature: QuadratureInfo,
}

pub fn hinfty_bound_probe(
    target: &dyn CalcTarget,
    family: &[HFunction],
    contour: &SectorContour,
) -> Result<CalculusResult> {
    if family.is_empty() {
        return Err(DnError::Input("function family is empty".into()));
    }
    let res = dunford_eval_many(target, family, contour)?;
    let per_function: Vec<FunctionRatio> = family
        .iter()
        .zip(&res.values)
        .map(|(f, v)| {
            let sup = f.sup_norm(contour.theta);
            let op = target.h_norm(v);
            FunctionRatio {
                label: f.label.clone(),
                k: f.k,
                phi: f.phi,
                sup_norm: sup,
                op_norm: op,
                ratio: if sup > 0.0 { op / sup } else { 0.0 },
            }
        })
        .collect();
    let m_estimate = per_function.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(CalculusResult {
        per_function,
        m_estimate,
        quadrature: res.info,
    })
}

/// V⁻¹𝒜V with the same grid and weights.
pub fn conjugate(op: &DiscreteOperator, v: &CMat) -> Result<DiscreteOperator> {
    let vinv = v
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| DnError::Input("conjugating matrix is singular".into()))?;
    let mut out = op.clone();
    out.matrix = &vinv * &op.matrix * v;
    Ok(out)
}

/// Seeded I + (σ/√n)·G with complex Gaussian-like G, accepted when its
/// condition number is below `cond_cap`.
pub fn random_well_conditioned(n: usize, seed: u64, sigma: f64, cond_cap: f64) -> Result<CMat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        let mut v = CMat::identity(n, n);
        let s = sigma / (n as f64).sqrt();
        for r in 0..n {
            for c in 0..n {
                v[(r, c)] +=
                    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * s;
            }
        }
        if cond2(&v) < cond_cap {
            return Ok(v);
        }
    }
    Err(DnError::NotFound(
        "no well-conditioned random matrix found".into(),
    ))
}

/// Pac-man contour: segment 0 → ρe^{−iθ}, arc to ρe^{iθ} through ρ,
/// segment back to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacmanContour {
    pub xi: Vec<f64>,
    pub radius: f64,
    pub theta: f64,
}

impl PacmanContour {
    /// (2πi)⁻¹∮ g(λ) dλ, counterclockwise.
    fn integrate(&self, g: &dyn Fn(Complex64) -> Complex64, n: usize) -> Complex64 {
        let rule = gauss_legendre(n);
        let rho = self.radius;
        let mut acc = ZERO;
        let mut edges = vec![0.0, rho * 1e-10];
        while *edges.last().expect("nonempty") < rho {
            edges.push((edges.last().expect("nonempty") * 2.0).min(rho));
        }
        let up = Complex64::from_polar(1.0, self.theta);
        let down = up.conj();
        for w in edges.windows(2) {
            let (a, b) = (w[0], w[1]);
            for (x, wt) in &rule {
                let t = 0.5 * (a + b) + 0.5 * (b - a) * x;
                let h = 0.5 * (b - a) * wt;
                acc += g(down * t) * down * h;
                acc -= g(up * t) * up * h;
            }
        }
        let panels = 32;
        for p in 0..panels {
            let a = -self.theta + 2.0 * self.theta * p as f64 / panels as f64;
            let b = a + 2.0 * self.theta / panels as f64;
            for (x, wt) in &rule {
                let phi = 0.5 * (a + b) + 0.5 * (b - a) * x;
                let z = Complex64::from_polar(rho, phi);
                acc += g(z) * I * z * (0.5 * (b - a) * wt);
            }
        }
        acc / (2.0 * PI * I)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacmanSample {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub value_re: f64,
    pub value_im: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacmanResult {
    /// c = 2‖a‖^{r}_{δ,0} (after at most one doubling).
    pub c: f64,
    pub samples: Vec<PacmanSample>,
    /// sup |a_f| / ‖f‖_∞.
    pub sup_ratio: f64,
}

/// a_f(x, ξ) = (2πi)⁻¹∮_{𝒞(ξ)} f(λ)(λ − a(x, ξ))⁻¹ dλ over the pac-man
/// contour of radius c⟨ξ⟩^{r}.
pub fn pacman_symbol_calc(
    sym: &ScalarSymbol,
    f: &HFunction,
    sector: &Sector,
    xs: &[Vec<f64>],
    xis: &[Vec<f64>],
) -> Result<PacmanResult> {
    if xs.is_empty() || xis.is_empty() {
        return Err(DnError::Input("pac-man sample grid is empty".into()));
    }
    let grid = SamplingGrid {
        xs: xs.to_vec(),
        xis: xis.to_vec(),
    };
    let sem = estimate_seminorm(sym, 0, &grid)?;
    let mut c = 2.0 * sem.value;
    if !(c > 0.0) {
        c = 1.0;
    }
    let r = sym.order;
    let mut grown = false;
    let mut samples = Vec::with_capacity(xs.len() * xis.len());
    let sup = f.sup_norm(sector.theta);
    let mut best: f64;
    'outer: loop {
        samples.clear();
        best = 0.0;
        for x in xs {
            for xi in xis {
                let a = sym.eval(x, xi)?;
                let radius = c * bracket(xi).powf(r);
                if sector.contains_tol(a, 0.0) {
                    return Err(DnError::Contour(format!(
                        "a = {a} lies in the sector at xi = {xi:?}"
                    )));
                }
                if a.norm() >= radius {
                    if grown {
                        return Err(DnError::Contour(format!(
                            "pac-man contour of radius {radius} does not enclose a = {a} at xi = {xi:?}"
                        )));
                    }
                    grown = true;
                    c *= 2.0;
                    continue 'outer;
                }
                let pc = PacmanContour {
                    xi: xi.clone(),
                    radius,
                    theta: sector.theta,
                };
                let g = |l: Complex64| f.eval(l) / (l - a);
                let mut n = 16;
                let mut prev = pc.integrate(&g, n);
                let val = loop {
                    n *= 2;
                    let cur = pc.integrate(&g, n);
                    if (cur - prev).norm() <= 1e-12 * cur.norm().max(1e-300) || n >= 256 {
                        break cur;
                    }
                    prev = cur;
                };
                best = best.max(if sup > 0.0 { val.norm() / sup } else { 0.0 });
                samples.push(PacmanSample {
                    x: x.clone(),
                    xi: xi.clone(),
                    value_re: val.re,
                    value_im: val.im,
                    radius,
                });
            }
        }
        break;
    }
    Ok(PacmanResult {
        c,
        samples,
        sup_ratio: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::assemble_dense;
    use crate::thermoplate::{build_plate_system, PlateParams};

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn diag(v: &[f64]) -> CMat {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            v.len(),
            v.iter().map(|x| c(*x)),
        ))
    }

    #[test]
    fn holo_calc_examples() {
        let f = HFunction::inverse_shift(1.0);
        let r = matrix_holo_calc(&f, &diag(&[1.0, 2.0])).unwrap();
        assert!((r - diag(&[0.5, 1.0 / 3.0])).norm() < 1e-14);
        let g = HFunction::rational(1, 0.0);
        let r = matrix_holo_calc(&g, &diag(&[1.0])).unwrap();
        assert!((r[(0, 0)] - 0.25).norm() < 1e-15);
        let j = CMat::from_row_slice(2, 2, &[c(1.0), c(1.0), ZERO, c(1.0)]);
        let r = matrix_holo_calc(&f, &j).unwrap();
        let want = CMat::from_row_slice(2, 2, &[c(0.5), c(-0.25), ZERO, c(0.5)]);
        assert!((r - want).norm() < 1e-9);
        let err = matrix_holo_calc(&f, &diag(&[-1.0])).unwrap_err();
        assert!(matches!(err, DnError::Domain(_)));
    }

    #[test]
    fn identity_operator_ratio_half() {
        let sys = DNSystem::diagonal(vec![ScalarSymbol::constant(1, c(1.0))]).unwrap();
        let g = TorusGrid::new(1, 4, 1.0).unwrap();
        let op = ModeOperator::from_system(&sys, &g, 0.0, 0.0).unwrap();
        let contour = SectorContour::default_for(PI / 2.0).unwrap();
        let f = HFunction::inverse_shift(1.0);
        let res = hinfty_bound_probe(&op, &[f], &contour).unwrap();
        let row = &res.per_function[0];
        assert!((row.op_norm - 0.5).abs() < 1e-6, "{row:?}");
        assert!((row.sup_norm - 1.0).abs() < 1e-6);
        assert!((res.m_estimate - 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_function_gives_zero() {
        let sys = DNSystem::diagonal(vec![ScalarSymbol::bracket_pow(1, 2.0)]).unwrap();
        let g = TorusGrid::new(1, 8, 1.0).unwrap();
        let op = ModeOperator::from_system(&sys, &g, 0.0, 0.0).unwrap();
        let contour = SectorContour::default_for(PI / 2.0).unwrap();
        let res = dunford_eval(&op, &HFunction::zero(), &contour).unwrap();
        assert!(res.values[0].iter().all(|m| m.norm() == 0.0));
    }

    #[test]
    fn scalar_multiplier_matches_pointwise() {
        let sys = DNSystem::diagonal(vec![ScalarSymbol::bracket_pow(1, 2.0)]).unwrap();
        let g = TorusGrid::new(1, 16, 1.0).unwrap();
        let op = ModeOperator::from_system(&sys, &g, 0.0, 0.0).unwrap();
        let contour = SectorContour::default_for(PI / 2.0).unwrap();
        let f = HFunction::rational(1, 0.0);
        let res = dunford_eval(&op, &f, &contour).unwrap();
        for (k, m) in res.values[0].iter().enumerate() {
            let a = bracket(&g.frequency(k)).powi(2);
            let want = f.eval(c(a));
            assert!((m[(0, 0)] - want).norm() <= 1e-6 * want.norm(), "{k}");
        }
    }

    #[test]
    fn dense_matches_modes_and_homomorphism() {
        let ps = build_plate_system(PlateParams::new(2.0, 0.9, 0.75).unwrap()).unwrap();
        let g = TorusGrid::new(1, 8, 1.0).unwrap();
        let modes = ModeOperator::from_system(&ps.system, &g, 1.0, 0.0).unwrap();
        let dense = assemble_dense(&ps.system, &g, 1.0, None, 0.0).unwrap();
        let contour = SectorContour::default_for(PI / 2.0).unwrap();
        let f1 = HFunction::rational(1, 0.0);
        let f2 = HFunction::rational(2, 0.1);
        let f12 = HFunction::product(&f1, &f2);
        let res = dunford_eval_many(&dense, &[f1.clone(), f2.clone(), f12], &contour).unwrap();
        let prod = &res.values[0][0] * &res.values[1][0];
        let err = (&res.values[2][0] - prod).norm();
        assert!(
            err <= 1e-6 * f1.sup_norm(PI / 2.0) * f2.sup_norm(PI / 2.0),
            "{err}"
        );
        let rm = dunford_eval(&modes, &f1, &contour).unwrap();
        let exact: Vec<CMat> = modes
            .modes
            .iter()
            .map(|m| matrix_holo_calc(&f1, m).unwrap())
            .collect();
        assert!(relative_difference(&rm.values[0], &exact) < 1e-6);
        let hn = dense.h_norm(&res.values[0][0]);
        let hm = modes.h_norm(&rm.values[0]);
        assert!((hn - hm).abs() <= 1e-6 * hm, "{hn} vs {hm}");
    }

    #[test]
    fn rational_family_properties() {
        let fam = rational_family(0.1);
        assert_eq!(fam.len(), 24);
        for f in &fam {
            for p in &f.poles {
                assert!(Sector::new(PI / 2.0).unwrap().contains(*p));
            }
            assert!(f.decay_ratio(PI / 2.0).is_finite());
            assert!(f.sup_norm(PI / 2.0) > 0.0);
        }
        assert!((HFunction::rational(1, 0.0).sup_norm(PI / 2.0) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn pacman_cauchy_oracle() {
        let a = ScalarSymbol::bracket_pow(1, 2.0);
        let f = HFunction::rational(1, 0.0);
        let sector = Sector::new(3.0 * PI / 4.0).unwrap();
        let xis: Vec<Vec<f64>> = (0..12).map(|k| vec![2f64.powi(k) - 1.0]).collect();
        let res = pacman_symbol_calc(&a, &f, &sector, &[vec![0.0]], &xis).unwrap();
        for s in &res.samples {
            let want = f.eval(c(bracket(&s.xi).powi(2)));
            let got = Complex64::new(s.value_re, s.value_im);
            assert!((got - want).norm() <= 1e-8 * want.norm(), "{got} vs {want}");
        }
        assert!(res.sup_ratio.is_finite());
        let zero = pacman_symbol_calc(&a, &HFunction::zero(), &sector, &[vec![0.0]], &xis).unwrap();
        assert!(zero
            .samples
            .iter()
            .all(|s| s.value_re == 0.0 && s.value_im == 0.0));
    }
}
