//! Property tests over random states, parameters and grids.

use num_complex::Complex64;
use proptest::prelude::*;

use revode::field::{Condition, Conditioned, FieldKind, FieldModel};
use revode::lab::fit_slope;
use revode::schedule::{Direction, NoiseSchedule, TimeGrid, Variable};
use revode::stability::{self, Window};
use revode::stepper::{integrate, SolverKind, SolverSession};
use revode::tableau::{self, stability_polynomial, Branch};

const EXACT: [&str; 8] = ["edict", "bdia", "obelm", "rev-heun", "mcf-euler", "mcf-midpoint", "rex-euler", "rex-midpoint"];

fn model(dim: usize, mean: f64, spread: f64) -> FieldModel {
    let m: Vec<f64> = (0..dim).map(|j| if j % 2 == 0 { mean } else { -mean }).collect();
    FieldModel::new(FieldKind::RoughSynthetic { amplitude: 0.03, frequency: 4.0, roughness: 1.0 }, dim, vec![Condition::gaussian("c", m, spread)])
        .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reversible_solvers_invert_exactly(
        which in 0..EXACT.len(),
        x0 in prop::collection::vec(-2.0..2.0f64, 4),
        steps in 2usize..24,
        mean in -1.0..1.0f64,
        spread in 0.2..1.5f64,
        strength in 0.3..1.0f64,
    ) {
        let m = model(4, mean, spread);
        let field = Conditioned { model: &m, condition: "c" };
        let kind = SolverKind::from_name(EXACT[which]).unwrap();
        let s = NoiseSchedule::standard();
        let grid = TimeGrid::build(&s, kind.default_grid_variable(), steps, strength, Direction::Inversion).unwrap();
        let mut session = SolverSession::new(kind, None, &s, &grid, &x0).unwrap();
        let up = session.integrate(&field, Direction::Inversion, false);
        prop_assert!(up.is_ok());
        let down = session.integrate(&field, Direction::Sampling, false);
        prop_assert!(down.is_ok());
        let scale = x0.iter().map(|v| v.abs()).fold(1.0, f64::max);
        prop_assert!(max_abs_diff(&down.terminal, &x0) <= 1e-9 * scale, "{} off by {}", EXACT[which], max_abs_diff(&down.terminal, &x0));
    }

    #[test]
    fn budget_accounting_is_steps_times_cost(which in 0..SolverKind::STUDY_SET.len(), mult in 1usize..5) {
        let kind = SolverKind::from_name(SolverKind::STUDY_SET[which]).unwrap();
        let budget = kind.budget_cost() * mult;
        let n = kind.steps_for_budget(budget).unwrap();
        prop_assert_eq!(n * kind.budget_cost(), budget);
        let m = model(2, 0.5, 0.5);
        let field = Conditioned { model: &m, condition: "c" };
        let s = NoiseSchedule::standard();
        let g = TimeGrid::build(&s, kind.default_grid_variable(), n, 1.0, Direction::Sampling).unwrap();
        let (_, t) = integrate(kind, None, &s, &g, &[0.1, 0.2], &field, false).unwrap();
        prop_assert_eq!(t.budget_nfe, budget);
    }

    #[test]
    fn ees_families_keep_their_polynomials(x in -3.0..3.0f64) {
        // Entries blow up next to excluded parameters and the closed forms lose
        // precision there; only well-conditioned members are checked.
        let tame = |t: &tableau::ButcherTableau| t.a.iter().flatten().chain(&t.b).all(|v| v.abs() <= 1e3);
        if let Ok(t) = tableau::ees25_tableau(x).map_err(|_| ()).and_then(|t| if tame(&t) { Ok(t) } else { Err(()) }) {
            prop_assert!(t.verify().is_ok());
            let p = stability_polynomial(&t);
            for (a, b) in p.coefficients.iter().zip([1.0, 1.0, 0.5, 0.125]) {
                prop_assert!((a - b).abs() < 1e-10, "x={} coefficients {:?}", x, p.coefficients);
            }
        }
        // The minus branch is the conjugate family: √2 ↦ −√2 throughout.
        for (branch, r2) in [(Branch::Plus, std::f64::consts::SQRT_2), (Branch::Minus, -std::f64::consts::SQRT_2)] {
            if let Some(t) = tableau::ees27_tableau(x, branch).ok().filter(tame) {
                prop_assert!(t.verify().is_ok());
                let want = [1.0, 1.0, 0.5, (2.0 - r2) / 4.0, (3.0 - 2.0 * r2) / 8.0];
                let p = stability_polynomial(&t);
                for (a, b) in p.coefficients.iter().zip(want) {
                    prop_assert!((a - b).abs() < 1e-9, "x={} {:?}", x, p.coefficients);
                }
            }
        }
    }

    #[test]
    fn polynomial_rasters_are_conjugate_symmetric(nx in 3usize..30, half in 2usize..15, re_min in -5.0..-1.0f64) {
        let w = Window::new(re_min, 1.0, -2.5, 2.5);
        for t in [tableau::rk4(), tableau::ees25_default(), tableau::ees27_default()] {
            let r = stability::polynomial_domain(&stability_polynomial(&t), w, nx, 2 * half).unwrap();
            prop_assert!(r.is_conjugate_symmetric());
        }
    }

    #[test]
    fn slope_fit_recovers_power_laws(p in 0.5..7.0f64, c in 1e-6..1e3f64, start in 2usize..6) {
        let pts: Vec<(f64, f64)> = (start..start + 6).map(|k| {
            let h = 2f64.powi(-(k as i32));
            (h, c * h.powf(p))
        }).collect();
        let s = fit_slope(&pts).unwrap();
        prop_assert!((s.slope - p).abs() < 1e-9);
        prop_assert!(s.half_width < 1e-8);
    }

    #[test]
    fn grid_reparametrisation_round_trips(t in 0.002..0.999f64) {
        let s = NoiseSchedule::standard();
        for v in [Variable::Lambda, Variable::Ratio] {
            let u = s.reparametrize(t, Variable::T, v).unwrap();
            let back = s.reparametrize(u, v, Variable::T).unwrap();
            prop_assert!((back - t).abs() < 1e-10, "{:?}: {} -> {} -> {}", v, t, u, back);
        }
        let l = s.level_at_t(t);
        prop_assert!((l.alpha * l.alpha + l.sigma * l.sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mcf_gamma_bounded_where_roots_inside(re in -2.0..0.0f64, im in -1.5..1.5f64) {
        // Roots of μ² − Γμ + ζ inside the unit circle ⇒ the probe stays bounded.
        let zeta = 0.9;
        let inc = stability::increment_polynomial(&tableau::midpoint());
        let z = Complex64::new(re, im);
        let g = stability::mcf_gamma(&inc, zeta, z);
        let rho = stability::mcf_spectral_radius(g, zeta);
        if rho < 1.0 - 1e-3 {
            let probe = stability::LinearProbe::McCallumFoster { base: tableau::midpoint(), zeta };
            prop_assert!(stability::empirical_boundedness(&probe, z, 2_000, 1e6));
        }
    }
}
