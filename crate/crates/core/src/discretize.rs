//! Periodic discretization of DN systems and operator-level checks.
//!
//! The cell [0, 2πL)ⁿ carries N points per axis x_j = 2πLj/N and the dual
//! frequencies ξ_k = k/L, k ∈ {−N/2, …, N/2 − 1} (Nyquist mode at −N/2).
//! Grid functions are flattened row-major; system fields stack the q
//! component blocks. Quantization follows the Kohn–Nirenberg rule
//! (a(x, D)u)(x_j) = N⁻ⁿ Σ_k e^{i x_j·ξ_k} a(x_j, ξ_k) û_k.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::ellipticity::Sector;
use crate::error::{DnError, Result};
use crate::linalg::{linear_fit, norm2, CMat};
use crate::parametrix::{build_truncated_parametrix, ExcisionConfig};
use crate::symbols::{bracket, DNSystem, ScalarSymbol, SymbolKind};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Default cap on the dense dimension q·Nⁿ.
pub const DENSE_CAP: usize = 8192;

/// Periodic grid on [0, 2πL)ⁿ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TorusGrid {
    pub n: usize,
    #[serde(rename = "N")]
    pub npts: usize,
    #[serde(rename = "L")]
    pub period: f64,
}

impl TorusGrid {
    pub fn new(n: usize, npts: usize, period: f64) -> Result<Self> {
        if !(n == 1 || n == 2) {
            return Err(DnError::Input(format!(
                "grid dimension must be 1 or 2, got {n}"
            )));
        }
        if npts < 2 || !npts.is_power_of_two() {
            return Err(DnError::Input(format!(
                "points per axis must be a power of two, got {npts}"
            )));
        }
        if !(period > 0.0) {
            return Err(DnError::Input("period L must be positive".into()));
        }
        Ok(TorusGrid { n, npts, period })
    }

    /// Number of grid points Nⁿ.
    pub fn size(&self) -> usize {
        self.npts.pow(self.n as u32)
    }

    /// Signed integer frequency of FFT slot k.
    pub fn wavenumber(&self, k: usize) -> i64 {
        let n = self.npts as i64;
        let k = k as i64;
        if k < n / 2 {
            k
        } else {
            k - n
        }
    }

    fn split(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.n];
        let mut r = idx;
        for v in (0..self.n).rev() {
            out[v] = r % self.npts;
            r /= self.npts;
        }
        out
    }

    /// Physical point x_j.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.split(idx)
            .into_iter()
            .map(|j| 2.0 * PI * self.period * j as f64 / self.npts as f64)
            .collect()
    }

    /// Frequency ξ_k for flattened FFT index k.
    pub fn frequency(&self, idx: usize) -> Vec<f64> {
        self.split(idx)
            .into_iter()
            .map(|k| self.wavenumber(k) as f64 / self.period)
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.size()).map(|i| self.point(i)).collect()
    }

    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        (0..self.size()).map(|i| self.frequency(i)).collect()
    }

    /// ⟨ξ_k⟩ for all modes.
    pub fn brackets(&self) -> Vec<f64> {
        (0..self.size())
            .map(|k| bracket(&self.frequency(k)))
            .collect()
    }
}

/// Forward/inverse FFT on a TorusGrid.
#[derive(Clone)]
pub struct GridFft {
    grid: TorusGrid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl GridFft {
    pub fn new(grid: TorusGrid) -> Self {
        let mut planner = FftPlanner::new();
        GridFft {
            grid,
            fwd: planner.plan_fft_forward(grid.npts),
            inv: planner.plan_fft_inverse(grid.npts),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.grid.npts;
        let plan = if inverse { &self.inv } else { &self.fwd };
        match self.grid.n {
            1 => plan.process(data),
            _ => {
                for row in data.chunks_mut(n) {
                    plan.process(row);
                }
                let mut col = vec![ZERO; n];
                for c in 0..n {
                    for r in 0..n {
                        col[r] = data[r * n + c];
                    }
                    plan.process(&mut col);
                    for r in 0..n {
                        data[r * n + c] = col[r];
                    }
                }
            }
        }
        if inverse {
            let s = 1.0 / self.grid.size() as f64;
            for v in data.iter_mut() {
                *v *= s;
            }
        }
    }

    /// û_k = Σ_j e^{−i x_j·ξ_k} u_j.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, false)
    }

    /// Inverse of [`GridFft::forward`].
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, true)
    }
}

/// Precomputed symbol values on the grid.
struct SymbolTable {
    variable: bool,
    /// values[j·M + k] = a(x_j, ξ_k) (variable) or values[k] = a(ξ_k).
    values: Vec<Complex64>,
}

fn tabulate(sym: &ScalarSymbol, grid: &TorusGrid) -> Result<SymbolTable> {
    let m = grid.size();
    let xis = grid.frequencies();
    if sym.kind == SymbolKind::ConstantCoefficient {
        let x0 = vec![0.0; grid.n];
        let values = xis
            .iter()
            .map(|xi| sym.eval(&x0, xi))
            .collect::<std::result::Result<_, _>>()?;
        return Ok(SymbolTable {
            variable: false,
            values,
        });
    }
    let xs = grid.points();
    let values: Vec<Complex64> = (0..m * m)
        .into_par_iter()
        .map(|t| sym.eval(&xs[t / m], &xis[t % m]))
        .collect::<std::result::Result<_, _>>()?;
    Ok(SymbolTable {
        variable: true,
        values,
    })
}

fn check_symbol_dim(sym: &ScalarSymbol, grid: &TorusGrid) -> Result<()> {
    if sym.dim != grid.n {
        return Err(DnError::Input(format!(
            "symbol dimension {} does not match grid dimension {}",
            sym.dim, grid.n
        )));
    }
    Ok(())
}

fn apply_table(table: &SymbolTable, fft: &GridFft, field: &[Complex64], out: &mut [Complex64]) {
    let grid = fft.grid;
    let m = grid.size();
    let mut hat = field.to_vec();
    fft.forward(&mut hat);
    if !table.variable {
        for k in 0..m {
            hat[k] *= table.values[k];
        }
        fft.inverse(&mut hat);
        for j in 0..m {
            out[j] += hat[j];
        }
        return;
    }
    let phase = phase_table(&grid);
    let s = 1.0 / m as f64;
    let vals: Vec<Complex64> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut acc = ZERO;
            for k in 0..m {
                acc += phase[j * m + k] * table.values[j * m + k] * hat[k];
            }
            acc * s
        })
        .collect();
    for j in 0..m {
        out[j] += vals[j];
    }
}

/// e^{i x_j·ξ_k} for all (j, k).
fn phase_table(grid: &TorusGrid) -> Vec<Complex64> {
    let m = grid.size();
    let xs = grid.points();
    let xis = grid.frequencies();
    let mut out = Vec::with_capacity(m * m);
    for j in 0..m {
        for k in 0..m {
            let t: f64 = xs[j].iter().zip(&xis[k]).map(|(a, b)| a * b).sum();
            out.push(Complex64::from_polar(1.0, t));
        }
    }
    out
}

/// a(x, D) applied to one grid function.
pub fn apply_scalar(
    sym: &ScalarSymbol,
    grid: &TorusGrid,
    field: &[Complex64],
) -> Result<Vec<Complex64>> {
    check_symbol_dim(sym, grid)?;
    if field.len() != grid.size() {
        return Err(DnError::Input(format!(
            "field length {} does not match grid size {}",
            field.len(),
            grid.size()
        )));
    }
    let table = tabulate(sym, grid)?;
    let fft = GridFft::new(*grid);
    let mut out = vec![ZERO; grid.size()];
    apply_table(&table, &fft, field, &mut out);
    Ok(out)
}

/// A(x, D) applied to a stacked q-component field.
pub fn apply_pdo(sys: &DNSystem, grid: &TorusGrid, field: &[Complex64]) -> Result<Vec<Complex64>> {
    let m = grid.size();
    if field.len() != sys.q * m {
        return Err(DnError::Input(format!(
            "field length {} does not match q*N^n = {}",
            field.len(),
            sys.q * m
        )));
    }
    let fft = GridFft::new(*grid);
    let mut out = vec![ZERO; sys.q * m];
    for i in 0..sys.q {
        for j in 0..sys.q {
            let e = sys.entry(i, j);
            check_symbol_dim(e, grid)?;
            if e.order == f64::NEG_INFINITY {
                continue;
            }
            let table = tabulate(e, grid)?;
            let (src, dst) = (&field[j * m..(j + 1) * m], &mut out[i * m..(i + 1) * m]);
            apply_table(&table, &fft, src, dst);
        }
    }
    Ok(out)
}

/// Dense matrix of a(x, D) on the grid (one forward FFT per row).
fn dense_block(
    values: &(dyn Fn(usize, usize) -> Complex64 + Sync),
    variable: bool,
    grid: &TorusGrid,
) -> CMat {
    let m = grid.size();
    let fft = GridFft::new(*grid);
    let xs = grid.points();
    let xis = grid.frequencies();
    let s = 1.0 / m as f64;
    let rows: Vec<Vec<Complex64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut b: Vec<Complex64> = (0..m)
                .map(|k| {
                    let t: f64 = xs[j].iter().zip(&xis[k]).map(|(a, c)| a * c).sum();
                    values(if variable { j } else { 0 }, k) * Complex64::from_polar(s, t)
                })
                .collect();
            fft.forward(&mut b);
            b
        })
        .collect();
    let mut out = CMat::zeros(m, m);
    for (j, row) in rows.into_iter().enumerate() {
        for (c, v) in row.into_iter().enumerate() {
            out[(j, c)] = v;
        }
    }
    out
}

/// Smoothing perturbation K with blocks ρ_ij(x)·⟨D⟩^{lᵢ+mⱼ−ε}.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub epsilon: f64,
    pub seed: u64,
    pub amplitude: f64,
    /// Physical-space blocks, row-major over (i, j).
    pub blocks: Vec<CMat>,
    pub q: usize,
}

impl Perturbation {
    /// Seeded random trigonometric multipliers composed with ⟨D⟩^{lᵢ+mⱼ−ε}.
    pub fn random(
        sys: &DNSystem,
        grid: &TorusGrid,
        epsilon: f64,
        amplitude: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(DnError::Input(
                "perturbation epsilon must be positive".into(),
            ));
        }
        let q = sys.q;
        let m = grid.size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = grid.points();
        let mut blocks = Vec::with_capacity(q * q);
        for i in 0..q {
            for j in 0..q {
                let modes: Vec<(Vec<f64>, Complex64)> = (0..3)
                    .map(|_| {
                        let k: Vec<f64> = (0..grid.n)
                            .map(|_| rng.random_range(-2i32..=2) as f64)
                            .collect();
                        let c = Complex64::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        );
                        (k, c * (amplitude / 3.0))
                    })
                    .collect();
                let rho: Vec<Complex64> = xs
                    .iter()
                    .map(|x| {
                        modes
                            .iter()
                            .map(|(k, c)| {
                                c * Complex64::from_polar(
                                    1.0,
                                    k.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(),
                                )
                            })
                            .sum()
                    })
                    .collect();
                let p = sys.l[i] + sys.m[j] - epsilon;
                let brs = grid.brackets();
                let mult = dense_block(&|_, k| Complex64::new(brs[k].powf(p), 0.0), false, grid);
                let mut b = mult;
                for r in 0..m {
                    for c in 0..m {
                        b[(r, c)] *= rho[r];
                    }
                }
                blocks.push(b);
            }
        }
        Ok(Perturbation {
            epsilon,
            seed,
            amplitude,
            blocks,
            q,
        })
    }
}

/// Dense realization of A(x, D) + α + K with Sobolev weights.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub matrix: CMat,
    pub grid: TorusGrid,
    pub q: usize,
    pub s: f64,
    /// ⟨ξ_k⟩^{s+mⱼ} per source block j.
    pub source_weights: Vec<Vec<f64>>,
    /// ⟨ξ_k⟩^{s−lᵢ} per target block i.
    pub target_weights: Vec<Vec<f64>>,
}

/// Assemble 𝒜_α = A(x, D) + α (+ K) densely.
pub fn assemble_dense(
    sys: &DNSystem,
    grid: &TorusGrid,
    alpha: f64,
    perturbation: Option<&Perturbation>,
    s: f64,
) -> Result<DiscreteOperator> {
    assemble_dense_capped(sys, grid, alpha, perturbation, s, DENSE_CAP)
}

pub fn assemble_dense_capped(
    sys: &DNSystem,
    grid: &TorusGrid,
    alpha: f64,
    perturbation: Option<&Perturbation>,
    s: f64,
    cap: usize,
) -> Result<DiscreteOperator> {
    let m = grid.size();
    let dim = sys.q * m;
    if dim > cap {
        return Err(DnError::Resource(format!(
            "dense size {dim} exceeds cap {cap}"
        )));
    }
    let mut mat = CMat::zeros(dim, dim);
    for i in 0..sys.q {
        for j in 0..sys.q {
            let e = sys.entry(i, j);
            check_symbol_dim(e, grid)?;
            if e.order == f64::NEG_INFINITY {
                continue;
            }
            let t = tabulate(e, grid)?;
            let block = dense_block(
                &|r, k| {
                    if t.variable {
                        t.values[r * m + k]
                    } else {
                        t.values[k]
                    }
                },
                t.variable,
                grid,
            );
            mat.view_mut((i * m, j * m), (m, m)).copy_from(&block);
        }
    }
    for d in 0..dim {
        mat[(d, d)] += Complex64::new(alpha, 0.0);
    }
    if let Some(p) = perturbation {
        if p.q != sys.q || p.blocks.first().is_some_and(|b| b.nrows() != m) {
            return Err(DnError::Input(
                "perturbation does not match system and grid".into(),
            ));
        }
        for i in 0..sys.q {
            for j in 0..sys.q {
                let mut v = mat.view_mut((i * m, j * m), (m, m));
                v += &p.blocks[i * sys.q + j];
            }
        }
    }
    let brs = grid.brackets();
    let source_weights = sys
        .m
        .iter()
        .map(|mj| brs.iter().map(|b| b.powf(s + mj)).collect())
        .collect();
    let target_weights = sys
        .l
        .iter()
        .map(|li| brs.iter().map(|b| b.powf(s - li)).collect())
        .collect();
    if mat.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(DnError::Numerical(
            "non-finite entries in the assembled operator".into(),
        ));
    }
    Ok(DiscreteOperator {
        matrix: mat,
        grid: *grid,
        q: sys.q,
        s,
        source_weights,
        target_weights,
    })
}

impl DiscreteOperator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Matrix-vector product.
    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        let x = nalgebra::DVector::from_column_slice(v);
        (&self.matrix * x).iter().copied().collect()
    }

    /// F M F⁻¹ blockwise: the operator in the Fourier basis.
    pub fn fourier_matrix(&self) -> CMat {
        to_fourier(&self.matrix, &self.grid, self.q)
    }

    /// Diagonal of the ℋ weight in the Fourier basis (stacked blocks).
    pub fn h_weights(&self) -> Vec<f64> {
        self.target_weights.iter().flatten().copied().collect()
    }

    /// ‖B‖ in ℒ(ℋ) for a matrix B given in the physical basis.
    pub fn h_norm(&self, b: &CMat) -> f64 {
        weighted_fourier_norm(&to_fourier(b, &self.grid, self.q), &self.h_weights())
    }

    /// The same norm through the Gram matrix G = W*W and a Hermitian
    /// eigenproblem.
    pub fn h_norm_gram(&self, b: &CMat) -> Result<f64> {
        let w = self.weight_matrix();
        let g = w.adjoint() * &w;
        let chol = g.clone().cholesky().ok_or_else(|| {
            DnError::Numerical("weight Gram matrix is not positive definite".into())
        })?;
        let l = chol.l();
        let linv = l
            .clone()
            .try_inverse()
            .ok_or_else(|| DnError::Numerical("Cholesky factor is singular".into()))?;
        let h = &linv * b.adjoint() * &g * b * linv.adjoint();
        let h = (&h + h.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = h.symmetric_eigen();
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        Ok(top.max(0.0).sqrt())
    }

    /// W = blockdiag(F⁻¹ diag(⟨ξ⟩^{s−lᵢ}) F) in the physical basis.
    pub fn weight_matrix(&self) -> CMat {
        let m = self.grid.size();
        let mut w = CMat::zeros(self.dim(), self.dim());
        for (i, tw) in self.target_weights.iter().enumerate() {
            let block = dense_block(&|_, k| Complex64::new(tw[k], 0.0), false, &self.grid);
            w.view_mut((i * m, i * m), (m, m)).copy_from(&block);
        }
        w
    }

    /// Row-major little-endian (re, im) f64 dump with a JSON sidecar.
    pub fn write_binary(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in 0..self.dim() {
            for c in 0..self.dim() {
                let v = self.matrix[(r, c)];
                f.write_all(&v.re.to_le_bytes())?;
                f.write_all(&v.im.to_le_bytes())?;
            }
        }
        f.flush()?;
        let side = serde_json::json!({
            "q": self.q,
            "n": self.grid.n,
            "N": self.grid.npts,
            "L": self.grid.period,
            "s": self.s,
            "layout": "row-major complex128 little-endian (re, im)",
            "weights": {
                "source": self.source_weights,
                "target": self.target_weights,
            },
        });
        let side_path = path.with_extension("json");
        std::fs::write(side_path, serde_json::to_string_pretty(&side)?)
    }
}

/// Blockwise F M F⁻¹.
pub fn to_fourier(mat: &CMat, grid: &TorusGrid, q: usize) -> CMat {
    let m = grid.size();
    let fft = GridFft::new(*grid);
    let dim = mat.nrows();
    let mut out = mat.clone();
    let mut buf = vec![ZERO; m];
    for c in 0..dim {
        for b in 0..q {
            for r in 0..m {
                buf[r] = out[(b * m + r, c)];
            }
            fft.forward(&mut buf);
            for r in 0..m {
                out[(b * m + r, c)] = buf[r];
            }
        }
    }
    for r in 0..dim {
        for b in 0..q {
            for c in 0..m {
                buf[c] = out[(r, b * m + c)];
            }
            fft.inverse(&mut buf);
            for c in 0..m {
                out[(r, b * m + c)] = buf[c];
            }
        }
    }
    out
}

/// ‖D B̂ D⁻¹‖₂ for a Fourier-basis matrix B̂ and weight diagonal D.
pub fn weighted_fourier_norm(bhat: &CMat, w: &[f64]) -> f64 {
    let mut s = bhat.clone();
    for r in 0..s.nrows() {
        for c in 0..s.ncols() {
            s[(r, c)] *= w[r] / w[c];
        }
    }
    norm2(&s)
}

/// ⟨λ⟩ = (1 + |λ|²)^{1/2}.
pub fn lambda_bracket(l: Complex64) -> f64 {
    (1.0 + l.norm_sqr()).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_re: f64,
    pub lambda_im: f64,
    /// ‖(𝒜 − λ)⁻¹‖_ℋ, `None` where 𝒜 − λ is singular.
    pub norm: Option<f64>,
    pub weighted_norm_times_bracket: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub max_weighted: f64,
    /// λ values where 𝒜 − λ was found singular (ellipticity violations).
    pub singular_points: Vec<(f64, f64)>,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "lambda_re,lambda_im,norm,weighted_norm_times_bracket")?;
        for r in &self.rows {
            let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_else(|| "inf".into());
            writeln!(
                w,
                "{:e},{:e},{},{}",
                r.lambda_re,
                r.lambda_im,
                f(r.norm),
                f(r.weighted_norm_times_bracket)
            )?;
        }
        Ok(())
    }

    /// Log–log slope of the norm against |λ| over the nonsingular rows.
    pub fn slope(&self) -> Result<f64> {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .rows
            .iter()
            .filter_map(|r| {
                let l = Complex64::new(r.lambda_re, r.lambda_im).norm();
                r.norm.filter(|_| l > 0.0).map(|n| (l.ln(), n.ln()))
            })
            .unzip();
        Ok(linear_fit(&xs, &ys)?.0)
    }
}

/// Condition cap above which 𝒜 − λ is reported singular.
pub const SWEEP_COND_CAP: f64 = 1e13;

/// ‖(𝒜 − λ)⁻¹‖_ℋ and ⟨λ⟩‖(𝒜 − λ)⁻¹‖_ℋ over λ samples.
pub fn resolvent_sweep(
    op: &DiscreteOperator,
    sector: &Sector,
    lambdas: &[Complex64],
) -> Result<SweepTable> {
    for l in lambdas {
        if !sector.contains_tol(*l, 1e-9) {
            return Err(DnError::Input(format!(
                "lambda {l} lies outside the sector"
            )));
        }
    }
    let fhat = op.fourier_matrix();
    let w = op.h_weights();
    let rows: Vec<SweepRow> = lambdas
        .par_iter()
        .map(|&lam| {
            let mut m = fhat.clone();
            for d in 0..m.nrows() {
                m[(d, d)] -= lam;
            }
            let inv = match crate::linalg::inverse_capped(&m, SWEEP_COND_CAP) {
                Ok((inv, _)) => Some(inv),
                Err(_) => None,
            };
            let norm = inv.map(|r| weighted_fourier_norm(&r, &w));
            SweepRow {
                lambda_re: lam.re,
                lambda_im: lam.im,
                norm,
                weighted_norm_times_bracket: norm.map(|n| n * lambda_bracket(lam)),
            }
        })
        .collect();
    let max_weighted = rows
        .iter()
        .filter_map(|r| r.weighted_norm_times_bracket)
        .fold(0.0, f64::max);
    let singular_points = rows
        .iter()
        .filter(|r| r.norm.is_none())
        .map(|r| (r.lambda_re, r.lambda_im))
        .collect();
    Ok(SweepTable {
        rows,
        max_weighted,
        singular_points,
    })
}

/// Standard λ sweep: both boundary rays and the bisector at dyadic radii
/// 2^k, k_min ≤ k ≤ k_max.
pub fn sector_sweep(sector: &Sector, k_min: i32, k_max: i32) -> Vec<Complex64> {
    let mut out = Vec::new();
    for k in k_min..=k_max {
        let r = 2f64.powi(k);
        out.push(sector.boundary_point(r, true));
        out.push(sector.boundary_point(r, false));
    }
    out
}

/// Dense quantization of a matrix symbol P(x, ξ) given pointwise.
pub fn quantize_matrix_symbol<F>(
    q: usize,
    grid: &TorusGrid,
    variable: bool,
    symbol: F,
) -> Result<CMat>
where
    F: Fn(&[f64], &[f64]) -> Result<CMat> + Sync,
{
    let m = grid.size();
    let xs = grid.points();
    let xis = grid.frequencies();
    let nx = if variable { m } else { 1 };
    let vals: Vec<CMat> = (0..nx * m)
        .into_par_iter()
        .map(|t| symbol(&xs[t / m], &xis[t % m]))
        .collect::<Result<_>>()?;
    let mut out = CMat::zeros(q * m, q * m);
    for i in 0..q {
        for j in 0..q {
            let block = dense_block(&|r, k| vals[r * m + k][(i, j)], variable, grid);
            out.view_mut((i * m, j * m), (m, m)).copy_from(&block);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametrixRow {
    pub lambda_re: f64,
    pub lambda_im: f64,
    pub resolvent_norm: f64,
    pub difference_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametrixComparison {
    #[serde(rename = "N")]
    pub n: usize,
    pub rows: Vec<ParametrixRow>,
    /// Log–log slope of ‖(𝒜_α − λ)⁻¹ − G(λ)‖ against |λ|.
    pub fitted_slope: f64,
    /// −1 − slope.
    pub epsilon_observed: f64,
}

/// Compare the quantized truncated parametrix of A + α with the discrete
/// resolvent of A + α (+ K).
#[allow(clippy::too_many_arguments)]
pub fn parametrix_vs_resolvent(
    sys: &DNSystem,
    grid: &TorusGrid,
    sector: &Sector,
    n: usize,
    lambdas: &[Complex64],
    perturbation: Option<&Perturbation>,
    alpha: f64,
    s: f64,
) -> Result<ParametrixComparison> {
    let shifted = sys.shifted(alpha);
    let op = assemble_dense(sys, grid, alpha, perturbation, s)?;
    let par = build_truncated_parametrix(
        &shifted,
        n,
        ExcisionConfig::Calibrate {
            sector_theta: sector.theta,
        },
    )?;
    let variable = !shifted.is_constant();
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        if !sector.contains_tol(lam, 1e-9) {
            return Err(DnError::Input(format!(
                "lambda {lam} lies outside the sector"
            )));
        }
        let mut m = op.matrix.clone();
        for d in 0..m.nrows() {
            m[(d, d)] -= lam;
        }
        let res = m.lu().try_inverse().ok_or_else(|| {
            DnError::Numerical(format!("discrete operator singular at lambda = {lam}"))
        })?;
        let g = quantize_matrix_symbol(sys.q, grid, variable, |x, xi| par.eval(x, xi, lam))?;
        let diff = &res - &g;
        rows.push(ParametrixRow {
            lambda_re: lam.re,
            lambda_im: lam.im,
            resolvent_norm: op.h_norm(&res),
            difference_norm: op.h_norm(&diff),
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.difference_norm > 0.0)
        .map(|r| {
            (
                Complex64::new(r.lambda_re, r.lambda_im).norm().ln(),
                r.difference_norm.ln(),
            )
        })
        .unzip();
    let fitted_slope = if xs.is_empty() {
        f64::NEG_INFINITY
    } else {
        linear_fit(&xs, &ys)?.0
    };
    Ok(ParametrixComparison {
        n,
        rows,
        fitted_slope,
        epsilon_observed: -1.0 - fitted_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::SymbolExpr;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn bracket_sq() -> DNSystem {
        DNSystem::diagonal(vec![ScalarSymbol::bracket_pow(1, 2.0)]).unwrap()
    }

    #[test]
    fn grid_layout() {
        let g = TorusGrid::new(1, 8, 1.0).unwrap();
        let ks: Vec<i64> = (0..8).map(|k| g.wavenumber(k)).collect();
        assert_eq!(ks, vec![0, 1, 2, 3, -4, -3, -2, -1]);
        assert!(TorusGrid::new(1, 12, 1.0).is_err());
        assert!(TorusGrid::new(3, 8, 1.0).is_err());
        let g2 = TorusGrid::new(2, 4, 2.0).unwrap();
        assert_eq!(g2.frequency(1 * 4 + 3), vec![0.5, -0.5]);
    }

    #[test]
    fn identity_and_unit_frequency() {
        let g = TorusGrid::new(1, 16, 1.0).unwrap();
        let one = ScalarSymbol::constant(1, c(1.0));
        let f: Vec<Complex64> = (0..16)
            .map(|j| Complex64::new(j as f64 * 0.3, -(j as f64).sin()))
            .collect();
        let out = apply_scalar(&one, &g, &f).unwrap();
        for (a, b) in out.iter().zip(&f) {
            assert!((a - b).norm() < 1e-13);
        }
        let a = ScalarSymbol::bracket_pow(1, 2.0);
        let e: Vec<Complex64> = g
            .points()
            .iter()
            .map(|x| Complex64::from_polar(1.0, x[0]))
            .collect();
        let out = apply_scalar(&a, &g, &e).unwrap();
        for (o, v) in out.iter().zip(&e) {
            assert!((o - v * 2.0).norm() < 1e-12);
        }
    }

    #[test]
    fn x_only_symbol_is_multiplication() {
        let g = TorusGrid::new(1, 16, 1.0).unwrap();
        let a = ScalarSymbol::from_expr(SymbolExpr::sin(vec![1.0], 0.0), 1, 0.0, 0.0).unwrap();
        let f: Vec<Complex64> = (0..16)
            .map(|j| Complex64::new(1.0 + j as f64, 0.5))
            .collect();
        let out = apply_scalar(&a, &g, &f).unwrap();
        for (j, x) in g.points().iter().enumerate() {
            assert!((out[j] - f[j] * x[0].sin()).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_matrix_on_two_points() {
        let sys = DNSystem::diagonal(vec![ScalarSymbol::constant(1, c(1.0))]).unwrap();
        let g = TorusGrid::new(1, 2, 1.0).unwrap();
        let op = assemble_dense(&sys, &g, 0.0, None, 0.0).unwrap();
        assert!((op.matrix.clone() - CMat::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn cap_is_enforced() {
        let g = TorusGrid::new(1, 16, 1.0).unwrap();
        let err = assemble_dense_capped(&bracket_sq(), &g, 0.0, None, 0.0, 8).unwrap_err();
        assert!(matches!(err, DnError::Resource(_)));
    }

    #[test]
    fn scalar_resolvent_matches_diagonal_oracle() {
        let g = TorusGrid::new(1, 16, 1.0).unwrap();
        let op = assemble_dense(&bracket_sq(), &g, 0.0, None, 0.0).unwrap();
        let s = Sector::new(PI / 2.0).unwrap();
        let lams = vec![c(-0.5), Complex64::new(0.0, 3.0), c(-40.0)];
        let tab = resolvent_sweep(&op, &s, &lams).unwrap();
        for (row, lam) in tab.rows.iter().zip(&lams) {
            let oracle = (0..16)
                .map(|k| 1.0 / (c(bracket(&g.frequency(k)).powi(2)) - lam).norm())
                .fold(0.0, f64::max);
            let v = row.norm.unwrap();
            assert!((v - oracle).abs() <= 1e-8 * oracle, "{v} vs {oracle}");
        }
    }
}
