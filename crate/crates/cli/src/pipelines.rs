//! One pipeline per command.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use dnpsi::diagonalize::{
    build_diagonalization, diag_lambda_ellipticity_check, offdiag_decay_probe, reduce_orders,
};
use dnpsi::discretize::{
    assemble_dense_capped, parametrix_vs_resolvent, resolvent_sweep, sector_sweep,
    DiscreteOperator, Perturbation, TorusGrid, DENSE_CAP,
};
use dnpsi::ellipticity::{
    check_det_ellipticity, check_minor_ellipticity, find_shift, minor_det, search_r, CheckMode,
    EllipticityGrid, EllipticityReport, Sector, ShiftSearch,
};
use dnpsi::funcalc::{
    hinfty_bound_probe, rational_family, CalcTarget, ModeOperator, SectorContour,
};
use dnpsi::parametrix::{decay_probe, ProbeGrid, ProbeQuantity};
use dnpsi::symbols::SamplingGrid;
use dnpsi::thermoplate::{
    build_plate_system, evolve_plate, plate_minor_dets, untruncated_matrix, EvolveConfig,
    PlateParams,
};
use dnpsi::{DNSystem, DnError};

use crate::config::{CheckSelection, Command, ExperimentConfig};
use crate::CliError;

/// Result of a pipeline: the verdict and the JSON body of the report.
pub struct Outcome {
    pub passed: bool,
    pub result: Value,
    pub diagnostic: Option<String>,
}

/// Artifact writer for one run.
pub struct Output {
    pub dir: PathBuf,
    pub stamp: Option<String>,
    pub files: Vec<String>,
}

impl Output {
    pub fn new(dir: &Path, stamp: Option<String>) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            stamp,
            files: Vec::new(),
        })
    }

    pub fn csv<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
    {
        let path = self.dir.join(name);
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        if let Some(s) = &self.stamp {
            writeln!(w, "# generated_at {s}").map_err(io)?;
        }
        body(&mut w).map_err(io)?;
        w.flush().map_err(io)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

pub fn run(cfg: &ExperimentConfig, seed: u64, out: &mut Output) -> Result<Outcome, CliError> {
    match cfg.command {
        Command::CheckEllipticity => check_ellipticity(cfg, out),
        Command::FindShift => shift(cfg),
        Command::ParametrixProbe => parametrix_probe(cfg, seed, out),
        Command::Diagonalize => diagonalize(cfg, out),
        Command::ResolventSweep => sweep(cfg, seed, out),
        Command::Hinfty => hinfty(cfg, seed, out),
        Command::PlateDemo => plate_demo(cfg, seed, out),
    }
}

fn system(cfg: &ExperimentConfig) -> Result<DNSystem, CliError> {
    cfg.system
        .as_ref()
        .ok_or_else(|| CliError::Input("missing system".into()))?
        .build()
}

fn ellipticity_grid(cfg: &ExperimentConfig, dim: usize) -> EllipticityGrid {
    let n = &cfg.numeric;
    EllipticityGrid::dyadic(dim, n.xi_k_min, n.xi_k_max, n.x_per_axis)
}

fn run_checks(
    cfg: &ExperimentConfig,
    sys: &DNSystem,
    sector: &Sector,
    grid: &EllipticityGrid,
) -> Result<Vec<EllipticityReport>, CliError> {
    let n = &cfg.numeric;
    let modes = match n.check {
        CheckSelection::Determinant => vec![CheckMode::Determinant],
        CheckSelection::Minors => vec![CheckMode::Minors],
        CheckSelection::Both => vec![CheckMode::Determinant, CheckMode::Minors],
    };
    let mut out = Vec::new();
    for mode in modes {
        let rep = match (n.r, mode) {
            (Some(r), CheckMode::Determinant) => {
                check_det_ellipticity(sys, sector, grid, r, n.threshold)?
            }
            (Some(r), _) => check_minor_ellipticity(sys, sector, grid, r, n.threshold)?,
            (None, m) => search_r(sys, sector, grid, n.threshold, m)?,
        };
        out.push(rep);
    }
    Ok(out)
}

fn write_reports(out: &mut Output, reports: &[EllipticityReport]) -> Result<(), CliError> {
    out.csv("ellipticity.csv", |w| {
        writeln!(
            w,
            "mode,passed,c_lower,r_used,samples,witness_x,witness_xi,lambda_re,lambda_im,kappa"
        )?;
        for r in reports {
            let mode = serde_json::to_value(r.mode).unwrap_or(Value::Null);
            let (x, xi, lr, li, k) = match &r.witness {
                Some(w) => (
                    join(&w.x),
                    join(&w.xi),
                    format!("{:e}", w.lambda_re),
                    format!("{:e}", w.lambda_im),
                    w.kappa.to_string(),
                ),
                None => Default::default(),
            };
            writeln!(
                w,
                "{},{},{:e},{:e},{},{x},{xi},{lr},{li},{k}",
                mode.as_str().unwrap_or(""),
                r.passed,
                r.c_lower,
                r.r_used,
                r.samples
            )?;
        }
        Ok(())
    })
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_ellipticity(cfg: &ExperimentConfig, out: &mut Output) -> Result<Outcome, CliError> {
    let sys = system(cfg)?;
    let sector = cfg.sector(PI / 2.0)?;
    let grid = ellipticity_grid(cfg, sys.dim);
    let reports = run_checks(cfg, &sys, &sector, &grid)?;
    write_reports(out, &reports)?;
    let passed = reports.iter().all(|r| r.passed);
    let diagnostic = reports
        .iter()
        .find(|r| !r.passed)
        .map(|r| format!("{:?} check failed with lower bound {:e}", r.mode, r.c_lower));
    Ok(Outcome {
        passed,
        result: json!({ "theta": sector.theta, "reports": reports }),
        diagnostic,
    })
}

fn shift(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let sys = system(cfg)?;
    let sector = cfg.sector(PI / 2.0)?;
    let grid = ellipticity_grid(cfg, sys.dim);
    let search = ShiftSearch {
        alpha_max: cfg.numeric.alpha_max,
        tolerance: cfg.numeric.alpha_tolerance,
    };
    match find_shift(&sys, &sector, &grid, cfg.numeric.threshold, search) {
        Ok(res) => Ok(Outcome {
            passed: true,
            result: json!({ "theta": sector.theta, "shift": res }),
            diagnostic: None,
        }),
        Err(DnError::NotFound(msg)) => Ok(Outcome {
            passed: false,
            result: json!({ "theta": sector.theta, "alpha_max": search.alpha_max }),
            diagnostic: Some(msg),
        }),
        Err(e) => Err(e.into()),
    }
}

fn perturbation(
    cfg: &ExperimentConfig,
    sys: &DNSystem,
    grid: &TorusGrid,
    seed: u64,
) -> Result<Option<Perturbation>, CliError> {
    match cfg.numeric.perturbation {
        Some(p) => Ok(Some(Perturbation::random(
            sys,
            grid,
            p.epsilon,
            p.amplitude,
            seed,
        )?)),
        None => Ok(None),
    }
}

fn parametrix_probe(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &mut Output,
) -> Result<Outcome, CliError> {
    let sys = system(cfg)?;
    let sector = cfg.sector(PI / 2.0)?;
    let n = &cfg.numeric;
    let grid = ProbeGrid::dyadic(
        sys.dim,
        &sector,
        n.probe_k_min,
        n.probe_k_max,
        n.per_octave,
        n.x_per_axis,
    );
    let probe = decay_probe(&sys, n.quantity, n.n, &sector, &grid)?;
    out.csv("probe.csv", |w| probe.write_csv(w))?;
    let expected = match n.quantity {
        ProbeQuantity::JMinus1 => Some(-(1.0 - sys.delta) * n.n as f64),
        _ => None,
    };
    let mut passed = probe.lambda_decay_ok;
    if let Some(e) = expected {
        passed &= probe.fitted_slope <= e + n.slope_tolerance;
    }
    let mut result = json!({
        "theta": sector.theta,
        "quantity": n.quantity,
        "N": n.n,
        "fitted_slope": finite_or_str(probe.fitted_slope),
        "expected_slope": expected,
        "lambda_decay_ok": probe.lambda_decay_ok,
        "sup_value": probe.sup_value,
    });
    if let Some(torus) = cfg.torus()? {
        let pert = perturbation(cfg, &sys, &torus, seed)?;
        let lambdas: Vec<Complex64> = (n.probe_k_min..=n.probe_k_max + 2)
            .map(|k| sector.boundary_point(2f64.powi(k), true))
            .collect();
        let cmp = parametrix_vs_resolvent(
            &sys,
            &torus,
            &sector,
            n.n,
            &lambdas,
            pert.as_ref(),
            n.alpha,
            n.s,
        )?;
        out.csv("comparison.csv", |w| {
            writeln!(w, "lambda_re,lambda_im,resolvent_norm,difference_norm")?;
            for r in &cmp.rows {
                writeln!(
                    w,
                    "{:e},{:e},{:e},{:e}",
                    r.lambda_re, r.lambda_im, r.resolvent_norm, r.difference_norm
                )?;
            }
            Ok(())
        })?;
        result["comparison"] = json!({
            "grid": torus,
            "alpha": n.alpha,
            "fitted_slope": finite_or_str(cmp.fitted_slope),
            "epsilon_observed": finite_or_str(cmp.epsilon_observed),
        });
    }
    let diagnostic = (!passed).then(|| {
        format!(
            "fitted slope {} outside the expected budget",
            probe.fitted_slope
        )
    });
    Ok(Outcome {
        passed,
        result,
        diagnostic,
    })
}

fn finite_or_str(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v < 0.0 {
        json!("-inf")
    } else {
        json!("inf")
    }
}

fn diagonalize(cfg: &ExperimentConfig, out: &mut Output) -> Result<Outcome, CliError> {
    let sys = system(cfg)?;
    let sector = cfg.sector(PI / 2.0)?;
    let n = &cfg.numeric;
    let red = reduce_orders(&sys)?;
    let dg = build_diagonalization(&red, n.n, n.leading)?;
    let grid = SamplingGrid::dyadic(sys.dim, n.x_per_axis, n.probe_k_min.max(0), n.probe_k_max);
    let probe = offdiag_decay_probe(&dg, &grid)?;
    out.csv("diagonalization.csv", |w| probe.write_csv(w))?;
    let check = diag_lambda_ellipticity_check(&red, &sector, &grid, n.threshold)?;
    let diagnostic = (!check.passed).then(|| {
        format!(
            "diagonal symbols fail the sector bound: {:e}",
            check.c_lower
        )
    });
    Ok(Outcome {
        passed: check.passed,
        result: json!({
            "theta": sector.theta,
            "N": n.n,
            "leading": n.leading,
            "fitted_slope": finite_or_str(probe.fitted_slope),
            "column_slopes": probe.column_slopes.iter().map(|s| finite_or_str(*s)).collect::<Vec<_>>(),
            "diagonal_check": check,
        }),
        diagnostic,
    })
}

fn dense_operator(
    cfg: &ExperimentConfig,
    sys: &DNSystem,
    seed: u64,
) -> Result<(DiscreteOperator, bool), CliError> {
    let torus = cfg
        .torus()?
        .ok_or_else(|| CliError::Input("missing grid".into()))?;
    let pert = perturbation(cfg, sys, &torus, seed)?;
    let op = assemble_dense_capped(
        sys,
        &torus,
        cfg.numeric.alpha,
        pert.as_ref(),
        cfg.numeric.s,
        DENSE_CAP,
    )?;
    Ok((op, pert.is_some()))
}

fn sweep(cfg: &ExperimentConfig, seed: u64, out: &mut Output) -> Result<Outcome, CliError> {
    let sys = system(cfg)?;
    let sector = cfg.sector(3.0 * PI / 4.0)?;
    let n = &cfg.numeric;
    let (op, perturbed) = dense_operator(cfg, &sys, seed)?;
    let lambdas = sector_sweep(&sector, n.sweep_k_min, n.sweep_k_max);
    let table = resolvent_sweep(&op, &sector, &lambdas)?;
    out.csv("sweep.csv", |w| table.write_csv(w))?;
    let ray: Vec<Complex64> = (n.ray_k_min..=n.ray_k_max)
        .map(|k| Complex64::from_polar(2f64.powi(k), PI))
        .collect();
    let slope = resolvent_sweep(&op, &sector, &ray)?.slope()?;
    let passed = table.singular_points.is_empty() && table.max_weighted.is_finite();
    let diagnostic = (!passed).then(|| {
        format!(
            "operator singular at {} sampled lambda values",
            table.singular_points.len()
        )
    });
    Ok(Outcome {
        passed,
        result: json!({
            "theta": sector.theta,
            "alpha": n.alpha,
            "perturbed": perturbed,
            "points": lambdas.len(),
            "max_weighted": table.max_weighted,
            "ray_slope": slope,
            "singular_points": table.singular_points,
        }),
        diagnostic,
    })
}

fn hinfty(cfg: &ExperimentConfig, seed: u64, out: &mut Output) -> Result<Outcome, CliError> {
    let sys = system(cfg)?;
    let sector = cfg.sector(PI / 2.0)?;
    let n = &cfg.numeric;
    let torus = cfg
        .torus()?
        .ok_or_else(|| CliError::Input("missing grid".into()))?;
    let target: Box<dyn CalcTarget> = if sys.is_constant() && n.perturbation.is_none() {
        Box::new(ModeOperator::from_system(&sys, &torus, n.alpha, n.s)?)
    } else {
        Box::new(dense_operator(cfg, &sys, seed)?.0)
    };
    let contour = SectorContour::default_for(sector.theta)?.with_nodes(n.nodes_per_panel)?;
    let family = rational_family(n.phi);
    let res = hinfty_bound_probe(target.as_ref(), &family, &contour)?;
    out.csv("hinfty.csv", |w| {
        writeln!(w, "label,k,phi,sup_norm,op_norm,ratio")?;
        for r in &res.per_function {
            let k = r.k.map(|k| k.to_string()).unwrap_or_default();
            writeln!(
                w,
                "\"{}\",{k},{:e},{:e},{:e},{:e}",
                r.label, r.phi, r.sup_norm, r.op_norm, r.ratio
            )?;
        }
        Ok(())
    })?;
    let passed = res.m_estimate.is_finite();
    Ok(Outcome {
        passed,
        result: json!({ "theta": sector.theta, "alpha": n.alpha, "calculus": res }),
        diagnostic: (!passed).then(|| "M_estimate is not finite".to_string()),
    })
}

fn plate_demo(cfg: &ExperimentConfig, seed: u64, out: &mut Output) -> Result<Outcome, CliError> {
    let params = cfg
        .system
        .as_ref()
        .and_then(|s| s.plate_params())
        .unwrap_or(PlateParams::new(2.0, 0.9, 0.75)?);
    params.validate()?;
    let sector = cfg.sector(3.0 * PI / 4.0)?;
    let n = &cfg.numeric;
    let ps = build_plate_system(params)?;
    if let Some(w) = &ps.warning {
        return Err(CliError::Input(w.clone()));
    }

    let mut minors = Vec::new();
    let mut worst_minor: f64 = 0.0;
    for k in -3..=8 {
        let s = 2f64.powi(k);
        let a = untruncated_matrix(&params, &[s]);
        for lam in [
            Complex64::new(-s, 0.0),
            sector.boundary_point(s, true),
            sector.boundary_point(s * s, false),
        ] {
            for kappa in 1..=3 {
                let generic = minor_det(&a, lam, kappa);
                let closed = plate_minor_dets(&params, &[s], lam, kappa)?;
                let err = (generic - closed).norm() / closed.norm();
                worst_minor = worst_minor.max(err);
                minors.push((s, lam, kappa, generic, closed, err));
            }
        }
    }
    out.csv("minors.csv", |w| {
        writeln!(
            w,
            "xi,lambda_re,lambda_im,kappa,generic_re,generic_im,closed_re,closed_im,rel_error"
        )?;
        for (s, l, k, g, c, e) in &minors {
            writeln!(
                w,
                "{s:e},{:e},{:e},{k},{:e},{:e},{:e},{:e},{e:e}",
                l.re, l.im, g.re, g.im, c.re, c.im
            )?;
        }
        Ok(())
    })?;

    let egrid = EllipticityGrid::dyadic(1, 0, n.xi_k_max, 1);
    let det = check_det_ellipticity(&ps.system, &sector, &egrid, 1.0, n.threshold)?;
    let minor = check_minor_ellipticity(&ps.system, &sector, &egrid, 1.0, n.threshold)?;

    let torus = cfg.torus()?.unwrap_or(TorusGrid::new(1, 32, 1.0)?);
    let op = assemble_dense_capped(&ps.system, &torus, n.alpha, None, n.s, DENSE_CAP)?;
    let lambdas = sector_sweep(&sector, n.sweep_k_min, n.sweep_k_max);
    let table = resolvent_sweep(&op, &sector, &lambdas)?;
    out.csv("sweep.csv", |w| table.write_csv(w))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u0: Vec<Complex64> = (0..3 * torus.size())
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let evolve = EvolveConfig {
        shift: 0.0,
        record_every: n.record_every,
        damped: false,
    };
    let tr = evolve_plate(&params, &torus, &u0, None, n.t_end, n.steps, evolve)?;
    out.csv("trajectory.csv", |w| tr.write_csv(w))?;
    let energies: Vec<f64> = (0..tr.times.len()).map(|t| tr.energy(t)).collect();
    let monotone = energies.windows(2).all(|e| e[1] <= e[0] * (1.0 + 1e-10));

    let sweep_ok = table.singular_points.is_empty() && table.max_weighted.is_finite();
    let passed = det.passed && minor.passed && worst_minor <= 1e-12 && sweep_ok && monotone;
    let diagnostic = (!passed).then(|| {
        format!(
            "det {}, minors {}, minor error {worst_minor:e}, sweep {sweep_ok}, energy monotone {monotone}",
            det.passed, minor.passed
        )
    });
    Ok(Outcome {
        passed,
        result: json!({
            "params": params,
            "orders": { "l": params.l(), "m": params.m(), "r": params.r() },
            "theta": sector.theta,
            "ellipticity": [det, minor],
            "max_minor_error": worst_minor,
            "sweep": { "alpha": n.alpha, "grid": torus, "max_weighted": table.max_weighted, "singular_points": table.singular_points },
            "evolution": { "t_end": n.t_end, "steps": n.steps, "initial_energy": energies[0], "final_energy": energies[energies.len() - 1], "monotone": monotone },
        }),
        diagnostic,
    })
}
