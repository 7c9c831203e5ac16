//! Generalized thermoelastic plate system.
//!
//! With L = (−Δ)^η the plate equations
//! v_tt + Lv − L^β w = 0, c·w_t + L^α w + L^β v_t = 0
//! become u_t + Ã(D)u = 0 for u = (w, v_t, L^{1/2}v), where for s = |ξ|
//!
//! ```text
//!        ⎡ s^{2αη}   s^{2βη}   0   ⎤
//! Ã(ξ) = ⎢ −s^{2βη}  0         s^η ⎥
//!        ⎣ 0         −s^η      0   ⎦
//! ```
//!
//! The DN system is χ(ξ)Ã(ξ) with orders
//! m = (2η(α−β), 0, 2η(½+α−2β)), l = (2βη, 2η(2β−α), η).

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretize::{GridFft, TorusGrid};
use crate::error::{DnError, Result};
use crate::linalg::{expm, CMat};
use crate::symbols::{norm, DNSystem, ScalarSymbol, SymbolExpr};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Meaning of the three state components.
pub const STATE_COMPONENTS: [&str; 3] = ["w", "v_t", "L^(1/2) v"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateParams {
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Damping constant of the heat equation; used only by [`damped_matrix`].
    #[serde(default = "one")]
    pub c: f64,
    /// χ is evaluated at `excision_scale`·|ξ|.
    #[serde(default = "two")]
    pub excision_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

impl PlateParams {
    pub fn new(eta: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = PlateParams {
            eta,
            alpha,
            beta,
            c: 1.0,
            excision_scale: 2.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(DnError::Input(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DnError::Input(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(self.c > 0.0) {
            return Err(DnError::Input(format!(
                "damping c must be positive, got {}",
                self.c
            )));
        }
        if !(self.excision_scale > 0.0) {
            return Err(DnError::Input("excision scale must be positive".into()));
        }
        Ok(())
    }

    /// α > β and 2β − α > ½.
    pub fn parabolic(&self) -> bool {
        self.alpha > self.beta && 2.0 * self.beta - self.alpha > 0.5
    }

    pub fn l(&self) -> Vec<f64> {
        let (e, a, b) = (self.eta, self.alpha, self.beta);
        vec![2.0 * b * e, 2.0 * e * (2.0 * b - a), e]
    }

    pub fn m(&self) -> Vec<f64> {
        let (e, a, b) = (self.eta, self.alpha, self.beta);
        vec![2.0 * e * (a - b), 0.0, 2.0 * e * (0.5 + a - 2.0 * b)]
    }

    /// r = (2ηα, 2η(2β−α), 2η(1+α−2β)).
    pub fn r(&self) -> Vec<f64> {
        self.l().iter().zip(self.m()).map(|(a, b)| a + b).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PlateSystem {
    pub params: PlateParams,
    pub system: DNSystem,
    pub parabolic: bool,
    pub warning: Option<String>,
}

/// χ(ξ)Ã(ξ) as a DN system. Parameters outside the parabolic region are
/// accepted with a recorded warning.
pub fn build_plate_system(params: PlateParams) -> Result<PlateSystem> {
    params.validate()?;
    let (e, a, b) = (params.eta, params.alpha, params.beta);
    let l = params.l();
    let m = params.m();
    let chi = SymbolExpr::excision(params.excision_scale);
    let entry = |p: f64, sign: f64| -> Result<ScalarSymbol> {
        let expr = chi
            .clone()
            .times(SymbolExpr::abs_pow(p))
            .scaled(Complex64::new(sign, 0.0));
        Ok(ScalarSymbol::from_expr(expr, 1, p, 0.0)?.with_order(p))
    };
    let z = ScalarSymbol::zero(1);
    let entries = vec![
        vec![
            entry(2.0 * a * e, 1.0)?,
            entry(2.0 * b * e, 1.0)?,
            z.clone(),
        ],
        vec![entry(2.0 * b * e, -1.0)?, z.clone(), entry(e, 1.0)?],
        vec![z.clone(), entry(e, -1.0)?, z],
    ];
    let parabolic = params.parabolic();
    let (system, warning) = if parabolic {
        (DNSystem::new(entries, l, m)?, None)
    } else {
        let sys = DNSystem::new_unordered(entries, l, m)?;
        let msg = format!(
            "parameters outside the parabolic region (alpha > beta, 2 beta - alpha > 1/2): r = {:?}",
            sys.r
        );
        (sys, Some(msg))
    };
    Ok(PlateSystem {
        params,
        system,
        parabolic,
        warning,
    })
}

fn spow(s: f64, p: f64) -> f64 {
    if s == 0.0 {
        if p == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        s.powf(p)
    }
}

/// Ã at s = |ξ| (no excision).
pub fn untruncated_matrix_at(params: &PlateParams, s: f64) -> CMat {
    let (e, a, b) = (params.eta, params.alpha, params.beta);
    let c = |v: f64| Complex64::new(v, 0.0);
    let p11 = spow(s, 2.0 * a * e);
    let p12 = spow(s, 2.0 * b * e);
    let p23 = spow(s, e);
    DMatrix::from_row_slice(
        3,
        3,
        &[
            c(p11),
            c(p12),
            ZERO,
            c(-p12),
            ZERO,
            c(p23),
            ZERO,
            c(-p23),
            ZERO,
        ],
    )
}

/// Ã(ξ).
pub fn untruncated_matrix(params: &PlateParams, xi: &[f64]) -> CMat {
    untruncated_matrix_at(params, norm(xi))
}

/// First-order matrix with the damping constant c kept (first row divided
/// by c). Experimental.
pub fn damped_matrix(params: &PlateParams, xi: &[f64]) -> CMat {
    let mut a = untruncated_matrix(params, xi);
    for j in 0..3 {
        a[(0, j)] /= params.c;
    }
    a
}

/// Closed-form det(Ã[κ](ξ) − λE_κ):
/// κ=1: s^{r₁}−λ, κ=2: s^{r₁}(s^{r₂}−λ), κ=3: s^{r₁+r₂}(s^{r₃}−λ).
pub fn plate_minor_dets(
    params: &PlateParams,
    xi: &[f64],
    lambda: Complex64,
    kappa: usize,
) -> Result<Complex64> {
    let s = norm(xi);
    let r = params.r();
    match kappa {
        1 => Ok(spow(s, r[0]) - lambda),
        2 => Ok(spow(s, r[0]) * (spow(s, r[1]) - lambda)),
        3 => Ok(spow(s, r[0] + r[1]) * (spow(s, r[2]) - lambda)),
        _ => Err(DnError::Input(format!(
            "kappa must be 1, 2 or 3, got {kappa}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveConfig {
    /// Generator Ã + shift·I.
    pub shift: f64,
    /// Record every k-th step (the final step is always recorded).
    pub record_every: usize,
    /// Use [`damped_matrix`] instead of Ã.
    pub damped: bool,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig {
            shift: 0.0,
            record_every: 1,
            damped: false,
        }
    }
}

/// Fourier coefficients of the state at the recorded times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TorusGrid,
    pub params: PlateParams,
    pub times: Vec<f64>,
    /// modes[t][k] = û(ξ_k) at times[t].
    pub modes: Vec<Vec<[Complex64; 3]>>,
}

impl Trajectory {
    /// Physical field (stacked components) at recorded index `t`.
    pub fn field(&self, t: usize) -> Vec<Complex64> {
        let m = self.grid.size();
        let fft = GridFft::new(self.grid);
        let mut out = vec![ZERO; 3 * m];
        for c in 0..3 {
            let mut buf: Vec<Complex64> = self.modes[t].iter().map(|u| u[c]).collect();
            fft.inverse(&mut buf);
            out[c * m..(c + 1) * m].copy_from_slice(&buf);
        }
        out
    }

    /// Discrete L² energy (N⁻ⁿ Σ_k |û_k|², the grid ℓ² norm squared).
    pub fn energy(&self, t: usize) -> f64 {
        let m = self.grid.size() as f64;
        self.modes[t]
            .iter()
            .map(|u| u.iter().map(|v| v.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            / m
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = serde_json::json!({
            "eta": self.params.eta,
            "alpha": self.params.alpha,
            "beta": self.params.beta,
            "n": self.grid.n,
            "N": self.grid.npts,
            "L": self.grid.period,
        });
        writeln!(w, "# {header}")?;
        writeln!(w, "t,mode_index,u1_abs,u2_abs,u3_abs")?;
        for (t, modes) in self.times.iter().zip(&self.modes) {
            for (k, u) in modes.iter().enumerate() {
                writeln!(
                    w,
                    "{t:e},{k},{:e},{:e},{:e}",
                    u[0].norm(),
                    u[1].norm(),
                    u[2].norm()
                )?;
            }
        }
        Ok(())
    }
}

/// Time-dependent forcing returning a stacked physical field.
pub type Forcing<'a> = &'a (dyn Fn(f64) -> Vec<Complex64> + Sync);

/// Solve u_t + Ã(D)u = f on the grid, mode by mode, with the exact
/// exponential and a midpoint exponential-integrator step for f.
pub fn evolve_plate(
    params: &PlateParams,
    grid: &TorusGrid,
    u0: &[Complex64],
    forcing: Option<Forcing<'_>>,
    t_end: f64,
    steps: usize,
    config: EvolveConfig,
) -> Result<Trajectory> {
    params.validate()?;
    if !params.parabolic() {
        return Err(DnError::Input(
            "plate evolution needs parameters in the parabolic region".into(),
        ));
    }
    let m = grid.size();
    if u0.len() != 3 * m {
        return Err(DnError::Input(format!(
            "initial field must have length {}, got {}",
            3 * m,
            u0.len()
        )));
    }
    if steps == 0 || !(t_end >= 0.0) || config.record_every == 0 {
        return Err(DnError::Input(
            "steps and record_every must be positive and T non-negative".into(),
        ));
    }
    let fft = GridFft::new(*grid);
    let to_modes = |field: &[Complex64]| -> Vec<[Complex64; 3]> {
        let mut comps = Vec::with_capacity(3);
        for c in 0..3 {
            let mut buf = field[c * m..(c + 1) * m].to_vec();
            fft.forward(&mut buf);
            comps.push(buf);
        }
        (0..m)
            .map(|k| [comps[0][k], comps[1][k], comps[2][k]])
            .collect()
    };
    let dt = t_end / steps as f64;
    let gens: Vec<CMat> = grid
        .frequencies()
        .iter()
        .map(|xi| {
            let mut a = if config.damped {
                damped_matrix(params, xi)
            } else {
                untruncated_matrix(params, xi)
            };
            for d in 0..3 {
                a[(d, d)] += config.shift;
            }
            a
        })
        .collect();
    let props: Vec<CMat> = gens
        .par_iter()
        .map(|a| expm(&(a * Complex64::new(-dt, 0.0))))
        .collect();
    check_finite(&props)?;
    let mut state = to_modes(u0);
    let mut times = vec![0.0];
    let mut modes = vec![state.clone()];
    for step in 0..steps {
        let t = step as f64 * dt;
        let fmid = forcing.map(|f| {
            let v = f(t + 0.5 * dt);
            if v.len() != 3 * m {
                return Err(DnError::Input(format!(
                    "forcing must return length {}",
                    3 * m
                )));
            }
            Ok(to_modes(&v))
        });
        let fmid = fmid.transpose()?;
        state = state
            .par_iter()
            .enumerate()
            .map(|(k, u)| {
                let v = nalgebra::Vector3::new(u[0], u[1], u[2]);
                match &fmid {
                    None => {
                        let w = props[k].fixed_view::<3, 3>(0, 0) * v;
                        Ok([w[0], w[1], w[2]])
                    }
                    Some(fm) => {
                        let mut aug = CMat::zeros(4, 4);
                        aug.view_mut((0, 0), (3, 3))
                            .copy_from(&(&gens[k] * Complex64::new(-dt, 0.0)));
                        for r in 0..3 {
                            aug[(r, 3)] = fm[k][r] * dt;
                        }
                        let e = expm(&aug);
                        let w = props[k].fixed_view::<3, 3>(0, 0) * v;
                        let out = [w[0] + e[(0, 3)], w[1] + e[(1, 3)], w[2] + e[(2, 3)]];
                        if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                            return Err(DnError::Numerical(
                                "non-finite state in the forcing step".into(),
                            ));
                        }
                        Ok(out)
                    }
                }
            })
            .collect::<Result<_>>()?;
        if (step + 1) % config.record_every == 0 || step + 1 == steps {
            times.push((step + 1) as f64 * dt);
            modes.push(state.clone());
        }
    }
    Ok(Trajectory {
        grid: *grid,
        params: *params,
        times,
        modes,
    })
}

fn check_finite(ms: &[CMat]) -> Result<()> {
    if ms
        .iter()
        .flat_map(|m| m.iter())
        .any(|z| !z.re.is_finite() || !z.im.is_finite())
    {
        return Err(DnError::Numerical(
            "matrix exponential produced non-finite entries".into(),
        ));
    }
    Ok(())
}
