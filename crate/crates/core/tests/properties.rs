//! Property tests for the structural invariants of each module.

use std::f64::consts::PI;

use approx::assert_relative_eq;
use num_complex::Complex64;
use proptest::prelude::*;

use dnpsi::diagonalize::{build_diagonalization, exactness_check, reduce_orders, LeadingMode};
use dnpsi::discretize::{
    apply_pdo, assemble_dense, resolvent_sweep, sector_sweep, to_fourier, TorusGrid,
};
use dnpsi::ellipticity::{
    check_det_ellipticity, check_minor_ellipticity, det_ratio_raw, det_ratio_scaled, find_shift,
    search_r, CheckMode, EllipticityGrid, Sector, ShiftSearch,
};
use dnpsi::funcalc::{
    dunford_eval_many, dunford_eval_tol, hinfty_bound_probe, rational_family, relative_difference,
    HFunction, ModeOperator, SectorContour,
};
use dnpsi::linalg::{cond2, eig, CMat};
use dnpsi::parametrix::{
    build_truncated_parametrix, g0_eval, gnu_eval, left_inverse_residual, ExcisionConfig,
};
use dnpsi::symbols::{
    bracket, estimate_seminorm, leibniz_compose_truncated, DNSystem, SamplingGrid, ScalarSymbol,
    SymbolExpr,
};
use dnpsi::thermoplate::{
    build_plate_system, evolve_plate, untruncated_matrix_at, EvolveConfig, PlateParams,
};

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn cx() -> impl Strategy<Value = Complex64> {
    (-2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b)| Complex64::new(a, b))
}

/// Constant-coefficient DN system c_ij⟨ξ⟩^{lᵢ+mⱼ} with strictly decreasing r.
fn constant_system(q: usize) -> impl Strategy<Value = DNSystem> {
    (
        prop::collection::vec(cx(), q * q),
        0.0..0.5f64,
        prop::collection::vec(0.5..1.0f64, q - 1),
        prop::collection::vec(-0.25..0.25f64, q),
    )
        .prop_map(move |(cs, r_last, gaps, m)| {
            let mut r = vec![r_last; q];
            for i in (0..q - 1).rev() {
                r[i] = r[i + 1] + gaps[i];
            }
            let l = r.iter().zip(&m).map(|(ri, mi)| ri - mi).collect();
            DNSystem::constant_bracket(&CMat::from_row_slice(q, q, &cs), l, m, 1).unwrap()
        })
}

fn variable_scalar(amp: f64) -> DNSystem {
    let e = SymbolExpr::real(2.0)
        .plus(SymbolExpr::sin(vec![1.0], 0.0).scaled(c(amp)))
        .times(SymbolExpr::bracket(2.0));
    DNSystem::diagonal(vec![ScalarSymbol::from_expr(e, 1, 2.0, 0.0).unwrap()]).unwrap()
}

fn parabolic_params() -> impl Strategy<Value = PlateParams> {
    (1.0..3.0f64, 0.55..1.0f64, 0.05..0.95f64).prop_map(|(eta, beta, t)| {
        let hi = (2.0 * beta - 0.5).min(1.0);
        let alpha = beta + t * (hi - beta);
        PlateParams::new(eta, alpha, beta).unwrap()
    })
}

fn lambda_in(sector: &Sector) -> impl Strategy<Value = Complex64> {
    let theta = sector.theta;
    (-4.0..12.0f64, theta..(2.0 * PI - theta))
        .prop_map(|(lr, phi)| Complex64::from_polar(2f64.powf(lr), phi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_leibniz_is_independent_of_truncation(p in -2.0..3.0f64, k in cx(), xi in -100.0..100.0f64) {
        let a1 = ScalarSymbol::from_expr(SymbolExpr::bracket(p).scaled(k), 1, p, 0.0).unwrap();
        let a2 = ScalarSymbol::bracket_pow(1, 1.5);
        let v1 = leibniz_compose_truncated(&a1, &a2, 1).unwrap().eval(&[0.3], &[xi]).unwrap();
        for n in [2, 3] {
            let vn = leibniz_compose_truncated(&a1, &a2, n).unwrap().eval(&[0.3], &[xi]).unwrap();
            prop_assert_eq!(vn, v1);
        }
    }

    #[test]
    fn seminorm_grows_with_the_grid(amp in 0.0..1.0f64, k in 0usize..3, extra in 1i32..6) {
        let sys = variable_scalar(amp);
        let sym = sys.entry(0, 0);
        let coarse = SamplingGrid::dyadic(1, 4, 0, 4);
        let mut fine = coarse.clone();
        fine.xs.extend(SamplingGrid::dyadic(1, 7, 0, 0).xs);
        fine.xis.extend(SamplingGrid::dyadic(1, 1, 5, 4 + extra).xis);
        let a = estimate_seminorm(sym, k, &coarse).unwrap().value;
        let b = estimate_seminorm(sym, k, &fine).unwrap().value;
        prop_assert!(a <= b, "{} > {}", a, b);
    }

    #[test]
    fn entries_are_bounded_by_their_orders(sys in constant_system(3)) {
        for k in 0..20 {
            let xi = [2f64.powi(k)];
            let a = sys.eval_matrix(&[0.0], &xi).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let ratio = a[(i, j)].norm() / bracket(&xi).powf(sys.l[i] + sys.m[j]);
                    prop_assert!(ratio <= 2.0 * 2f64.sqrt() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn scaled_determinant_matches_raw(d in prop::collection::vec(cx(), 3), lam_r in -3.0..8.0f64, phi in 0.0..2.0 * PI, k in 0i32..30) {
        let (l, m) = ([2.0, 1.0, 0.5], [0.0, 0.0, 0.0]);
        let br = 2f64.powi(k);
        let lam = Complex64::from_polar(2f64.powf(lam_r), phi);
        let scaled_a = CMat::from_fn(3, 3, |i, j| if i == j { d[i] * br.powf(l[i]) } else { c(0.0) });
        let raw = det_ratio_raw(&scaled_a, &l, br, lam);
        let sc = det_ratio_scaled(&scaled_a, &l, &m, br, lam);
        assert_relative_eq!(raw, sc, max_relative = 1e-12);
    }

    #[test]
    fn lower_bound_shrinks_as_samples_grow(sys in constant_system(2), extra in 1i32..8) {
        let sector = Sector::new(PI / 2.0).unwrap();
        let small = EllipticityGrid::dyadic(1, 0, 6, 1);
        let large = EllipticityGrid::dyadic(1, 0, 6 + extra, 1);
        for mode in [CheckMode::Determinant, CheckMode::Minors] {
            let run = |g: &EllipticityGrid| match mode {
                CheckMode::Determinant => check_det_ellipticity(&sys, &sector, g, 0.0, 0.0).unwrap(),
                _ => check_minor_ellipticity(&sys, &sector, g, 0.0, 0.0).unwrap(),
            };
            prop_assert!(run(&large).c_lower <= run(&small).c_lower);
        }
    }

    #[test]
    fn minor_pass_implies_relaxed_det_pass(sys in constant_system(3)) {
        let sector = Sector::new(PI / 2.0).unwrap();
        let grid = EllipticityGrid::dyadic(1, 0, 16, 1);
        let minor = search_r(&sys, &sector, &grid, 1e-3, CheckMode::Minors).unwrap();
        if minor.passed {
            let det = search_r(&sys, &sector, &grid, 1e-4, CheckMode::Determinant).unwrap();
            prop_assert!(det.passed, "minor {:?}\ndet {:?}", minor, det);
        }
    }

    #[test]
    fn lower_order_perturbation_keeps_ellipticity(cs in prop::collection::vec(cx(), 4)) {
        let e = |p: f64, k: f64| ScalarSymbol::from_expr(SymbolExpr::bracket(p).scaled(c(k)), 1, p, 0.0).unwrap();
        let rows = vec![vec![e(2.0, 1.5), e(1.5, 4.0)], vec![ScalarSymbol::zero(1), e(1.0, 0.5)]];
        let sys = DNSystem::new(rows, vec![2.0, 1.0], vec![0.0, 0.0]).unwrap();
        let orders = [[1.5, 1.0], [1.0, 0.5]];
        let pert: Vec<Vec<ScalarSymbol>> = (0..2)
            .map(|i| (0..2).map(|j| {
                let p = orders[i][j];
                ScalarSymbol::from_expr(SymbolExpr::bracket(p).scaled(cs[2 * i + j]), 1, p, 0.0).unwrap()
            }).collect())
            .collect();
        let perturbed = sys.perturbed(&pert).unwrap();
        let sector = Sector::new(PI / 2.0).unwrap();
        let grid = EllipticityGrid::dyadic(1, 0, 24, 1);
        prop_assert!(search_r(&perturbed, &sector, &grid, 1e-3, CheckMode::Determinant).unwrap().passed);
        prop_assert!(search_r(&perturbed, &sector, &grid, 1e-3, CheckMode::Minors).unwrap().passed);
    }

    #[test]
    fn g0_is_a_left_inverse(amp in 0.0..1.0f64, x in 0.0..2.0 * PI, xi in -1e4..1e4f64, lam in lambda_in(&Sector::new(PI / 2.0).unwrap())) {
        let sys = variable_scalar(amp);
        let (res, cnd) = left_inverse_residual(&sys, &[x], &[xi], lam).unwrap();
        prop_assert!(res <= 1e-10 * cnd);
    }

    #[test]
    fn first_truncation_is_g0(amp in 0.0..1.0f64, x in 0.0..2.0 * PI, xi in -1e3..1e3f64, lam in lambda_in(&Sector::new(PI / 2.0).unwrap())) {
        let sys = variable_scalar(amp);
        let q1 = build_truncated_parametrix(&sys, 1, ExcisionConfig::Fixed { eps1: 1.0 }).unwrap();
        prop_assert_eq!(q1.eval(&[x], &[xi], lam).unwrap(), g0_eval(&sys, &[x], &[xi], lam).unwrap());
        prop_assert!(gnu_eval(&sys, 0, &[x], &[xi], lam).is_err());
    }

    #[test]
    fn leading_diagonal_is_similar(sys in constant_system(3), k in 0i32..20) {
        let red = reduce_orders(&sys).unwrap();
        let dg = build_diagonalization(&red, 1, LeadingMode::Exact).unwrap();
        let xi = [2f64.powi(k)];
        let b = red.eval(&[0.0], &xi).unwrap();
        let (s, d) = dg.eval(&[0.0], &xi).unwrap();
        let chk = exactness_check(&b, &s.total(), &d.total()).unwrap();
        prop_assert!(chk.offdiag_rel <= 1e-8 && chk.eigen_gap_rel <= 1e-8, "{:?}", chk);
    }

    #[test]
    fn conjugator_respects_order_bookkeeping(sys in constant_system(3)) {
        let red = reduce_orders(&sys).unwrap();
        let dg = build_diagonalization(&red, 1, LeadingMode::Literal).unwrap();
        let r = red.r().to_vec();
        let mut ratios = Vec::new();
        for k in 6..24 {
            let xi = [2f64.powi(k)];
            let s = dg.eval(&[0.0], &xi).unwrap().0.total();
            let mut worst: f64 = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    worst = worst.max(s[(i, j)].norm() / bracket(&xi).powf((r[j] - r[i]).min(0.0)));
                }
            }
            ratios.push(worst);
        }
        let first = ratios[0].max(1.0);
        for w in &ratios {
            prop_assert!(*w <= 10.0 * first, "{:?}", ratios);
        }
    }

    #[test]
    fn multiplier_operator_is_fourier_block_diagonal(p in parabolic_params(), alpha in 0.0..2.0f64) {
        let ps = build_plate_system(p).unwrap();
        let grid = TorusGrid::new(1, 8, 1.0).unwrap();
        let op = assemble_dense(&ps.system, &grid, alpha, None, 0.0).unwrap();
        let modes = ModeOperator::from_system(&ps.system, &grid, alpha, 0.0).unwrap();
        let fhat = op.fourier_matrix();
        let m = grid.size();
        let scale = fhat.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for k in 0..m {
            for kk in 0..m {
                for i in 0..3 {
                    for j in 0..3 {
                        let v = fhat[(i * m + k, j * m + kk)];
                        let want = if k == kk { modes.modes[k][(i, j)] } else { c(0.0) };
                        prop_assert!((v - want).norm() <= 1e-8 * scale);
                    }
                }
            }
        }
    }

    #[test]
    fn weighted_norm_routes_agree(amp in 0.0..1.0f64, s in -1.0..2.0f64, lam in lambda_in(&Sector::new(PI / 2.0).unwrap())) {
        let sys = variable_scalar(amp);
        let grid = TorusGrid::new(1, 16, 1.0).unwrap();
        let op = assemble_dense(&sys, &grid, 1.0, None, s).unwrap();
        let mut m = op.matrix.clone();
        for d in 0..m.nrows() {
            m[(d, d)] -= lam;
        }
        let r = m.lu().try_inverse().unwrap();
        let a = op.h_norm(&r);
        let b = op.h_norm_gram(&r).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-10);
    }

    #[test]
    fn dense_matrix_matches_pseudodifferential_action(amp in 0.0..1.0f64, re in prop::collection::vec(-1.0..1.0f64, 16), im in prop::collection::vec(-1.0..1.0f64, 16)) {
        let sys = variable_scalar(amp);
        let grid = TorusGrid::new(1, 16, 1.0).unwrap();
        let op = assemble_dense(&sys, &grid, 0.0, None, 0.0).unwrap();
        let u: Vec<Complex64> = re.iter().zip(&im).map(|(a, b)| Complex64::new(*a, *b)).collect();
        let dense = op.apply(&u);
        let direct = apply_pdo(&sys, &grid, &u).unwrap();
        let scale = direct.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (a, b) in dense.iter().zip(&direct) {
            prop_assert!((a - b).norm() <= 1e-10 * scale);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn plate_eigenvalues_avoid_the_closed_sector(p in parabolic_params()) {
        let sector = Sector::new(PI / 2.0).unwrap();
        let ps = build_plate_system(p).unwrap();
        let grid = EllipticityGrid::dyadic(1, -10, 10, 1);
        let alpha0 = find_shift(&ps.system, &sector, &grid, 1e-6, ShiftSearch::default()).unwrap().alpha0;
        prop_assert!(alpha0 > 0.0);
        for k in -10..=10 {
            let a = untruncated_matrix_at(&p, 2f64.powi(k)) + CMat::identity(3, 3) * c(alpha0);
            let (vals, _) = eig(&a).unwrap();
            for v in vals {
                prop_assert!(!sector.contains(v), "eigenvalue {} at s = 2^{}", v, k);
            }
        }
    }

    #[test]
    fn plate_energy_is_non_increasing(p in parabolic_params(), seed in 0u64..1000) {
        let g = TorusGrid::new(1, 16, 1.0).unwrap();
        let m = g.size();
        let u0: Vec<Complex64> = (0..3 * m)
            .map(|i| {
                let h = (i as u64 + 1).wrapping_mul(seed.wrapping_add(0x9e37_79b9)) % 1000;
                Complex64::new(h as f64 / 500.0 - 1.0, ((h * 7) % 1000) as f64 / 500.0 - 1.0)
            })
            .collect();
        let cfg = EvolveConfig { shift: 0.1, ..Default::default() };
        let tr = evolve_plate(&p, &g, &u0, None, 1.0, 40, cfg).unwrap();
        for t in 1..tr.times.len() {
            prop_assert!(tr.energy(t) <= tr.energy(t - 1) * (1.0 + 1e-10));
        }
    }

    #[test]
    fn dunford_is_stable_under_refinement(p in parabolic_params(), alpha in 0.5..2.0f64) {
        let ps = build_plate_system(p).unwrap();
        let grid = TorusGrid::new(1, 16, 1.0).unwrap();
        let op = ModeOperator::from_system(&ps.system, &grid, alpha, 0.0).unwrap();
        let family = rational_family(0.0);
        let contour = SectorContour::default_for(PI / 2.0).unwrap();
        let base = dunford_eval_many(&op, &family, &contour).unwrap();
        let refined = SectorContour::new(PI / 2.0, contour.r_min, 2.0 * base.info.r_max, base.info.nodes_per_panel).unwrap();
        let finer = dunford_eval_tol(&op, &family, &refined, f64::INFINITY).unwrap();
        for (a, b) in base.values.iter().zip(&finer.values) {
            prop_assert!(relative_difference(a, b) <= 1e-6);
        }
    }

    #[test]
    fn extra_family_members_respect_the_bound(phi in 0.0..0.5f64, k in 1usize..9) {
        let ps = build_plate_system(PlateParams::new(2.0, 0.9, 0.75).unwrap()).unwrap();
        let grid = TorusGrid::new(1, 16, 1.0).unwrap();
        let op = ModeOperator::from_system(&ps.system, &grid, 1.0, 0.0).unwrap();
        let contour = SectorContour::default_for(PI / 2.0).unwrap();
        let m = hinfty_bound_probe(&op, &rational_family(0.1), &contour).unwrap().m_estimate;
        let extra = [HFunction::rational(k, phi), HFunction::rational(k, -phi)];
        let r = hinfty_bound_probe(&op, &extra, &contour).unwrap().m_estimate;
        prop_assert!(r <= 2.0 * m, "{} vs {}", r, m);
    }

    #[test]
    fn sweep_maxima_are_grid_stable(p in parabolic_params()) {
        let ps = build_plate_system(p).unwrap();
        let sector = Sector::new(3.0 * PI / 4.0).unwrap();
        let lambdas = sector_sweep(&sector, -4, 15);
        let max_at = |n: usize| {
            let grid = TorusGrid::new(1, n, 1.0).unwrap();
            let op = assemble_dense(&ps.system, &grid, 1.0, None, 0.0).unwrap();
            resolvent_sweep(&op, &sector, &lambdas).unwrap().max_weighted
        };
        let (a, b) = (max_at(16), max_at(32));
        prop_assert!((a - b).abs() <= 0.25 * a, "{} vs {}", a, b);
    }
}

#[test]
fn fourier_transform_of_identity_is_identity() {
    let grid = TorusGrid::new(2, 4, 1.0).unwrap();
    let id = CMat::identity(grid.size(), grid.size());
    let f = to_fourier(&id, &grid, 1);
    assert!((f - &id).norm() < 1e-12);
    assert!(cond2(&id) == 1.0);
}
