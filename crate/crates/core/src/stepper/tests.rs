use super::*;
use crate::field::{Condition, Conditioned, FieldKind, FieldModel, FnPredictor};
use crate::schedule::NoiseSchedule;

fn gaussian(d: usize) -> FieldModel {
    let mean = (0..d).map(|j| 0.5 + 0.25 * j as f64).collect();
    FieldModel::new(FieldKind::Gaussian, d, vec![Condition::gaussian("c", mean, 0.5)]).unwrap()
}

fn rough(d: usize) -> FieldModel {
    let mean = (0..d).map(|j| (j as f64 * 0.7).sin()).collect();
    FieldModel::new(
        FieldKind::RoughSynthetic { amplitude: 0.5, frequency: 6.0, roughness: 1.0 },
        d,
        vec![Condition::gaussian("c", mean, 0.5).with_phase(0.3)],
    )
    .unwrap()
}

fn x0(d: usize) -> Vec<f64> {
    (0..d).map(|j| 1.0 - 0.3 * j as f64).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn grid_for(kind: &SolverKind, s: &NoiseSchedule, n: usize, dir: Direction) -> TimeGrid {
    TimeGrid::build(s, kind.default_grid_variable(), n, 1.0, dir).unwrap()
}

#[test]
fn budget_table() {
    let expect = [
        ("ddim", 48),
        ("bdia", 48),
        ("obelm", 48),
        ("edict", 24),
        ("rev-heun", 24),
        ("ees25", 16),
        ("ees27", 12),
        ("mcf-euler", 24),
        ("rex-euler", 24),
        ("mcf-midpoint", 12),
        ("rex-midpoint", 12),
    ];
    for (name, n) in expect {
        assert_eq!(SolverKind::from_name(name).unwrap().steps_for_budget(48).unwrap(), n, "{name}");
    }
    assert!(matches!(SolverKind::ees25().steps_for_budget(50), Err(StepError::Budget { .. })));
}

#[test]
fn evaluation_counters() {
    let s = NoiseSchedule::standard();
    let m = gaussian(3);
    let p = Conditioned { model: &m, condition: "c" };
    for name in SolverKind::STUDY_SET {
        let kind = SolverKind::from_name(name).unwrap();
        let n = kind.steps_for_budget(48).unwrap();
        let g = grid_for(&kind, &s, n, Direction::Sampling);
        let (_, t) = integrate(kind, None, &s, &g, &x0(3), &p, true).unwrap();
        assert!(t.is_ok(), "{name}: {:?}", t.error);
        assert_eq!(t.budget_nfe, 48, "{name}");
        let actual = if kind == SolverKind::ReversibleHeun { n + 1 } else { 48 };
        assert_eq!(t.nfe, actual, "{name}");
        assert_eq!(t.points.len(), n + 1);
    }
}

#[test]
fn ddim_with_zero_noise_rescales() {
    let s = NoiseSchedule::standard();
    let zero = FnPredictor {
        dim: 2,
        f: |_x: &[f64], _l: &NoiseLevel, o: &mut [f64]| {
            o.iter_mut().for_each(|v| *v = 0.0);
            Ok(())
        },
    };
    let g = TimeGrid::build(&s, Variable::T, 5, 1.0, Direction::Sampling).unwrap();
    let (sess, _) = integrate(SolverKind::Ddim, None, &s, &g, &[1.0, -2.0], &zero, false).unwrap();
    let ratio = s.alpha(g.node(0)) / s.alpha(g.node(5));
    let x = sess.state();
    assert!((x[0] - ratio).abs() < 1e-12 * ratio && (x[1] + 2.0 * ratio).abs() < 1e-12 * ratio);
}

#[test]
fn reversible_round_trip_on_rough_field() {
    let s = NoiseSchedule::standard();
    let m = rough(8);
    let p = Conditioned { model: &m, condition: "c" };
    for name in ["edict", "bdia", "obelm", "rev-heun", "mcf-euler", "mcf-midpoint", "rex-euler", "rex-midpoint"] {
        let kind = SolverKind::from_name(name).unwrap();
        let n = kind.steps_for_budget(48).unwrap();
        let g = grid_for(&kind, &s, n, Direction::Sampling);
        let start = x0(8);
        let mut sess = SolverSession::new(kind, None, &s, &g, &start).unwrap();
        sess.integrate(&p, Direction::Sampling, false).into_result().unwrap();
        sess.integrate(&p, Direction::Inversion, false).into_result().unwrap();
        assert_eq!(sess.position(), n);
        let err = rel(&sess.state(), &start);
        assert!(err <= 1e-9, "{name}: {err:e}");
    }
}

#[test]
fn inversion_then_sampling_recovers_data() {
    let s = NoiseSchedule::standard();
    let m = rough(4);
    let p = Conditioned { model: &m, condition: "c" };
    for name in ["edict", "bdia", "obelm", "rev-heun", "mcf-midpoint", "rex-euler"] {
        let kind = SolverKind::from_name(name).unwrap();
        let g = grid_for(&kind, &s, 12, Direction::Inversion);
        let start = x0(4);
        let mut sess = SolverSession::new(kind, None, &s, &g, &start).unwrap();
        assert_eq!(sess.position(), 0);
        sess.integrate(&p, Direction::Inversion, false).into_result().unwrap();
        sess.integrate(&p, Direction::Sampling, false).into_result().unwrap();
        assert!(rel(&sess.state(), &start) <= 1e-9, "{name}");
    }
}

#[test]
fn two_step_reversal_is_free() {
    let s = NoiseSchedule::standard();
    let m = gaussian(2);
    let p = Conditioned { model: &m, condition: "c" };
    let g = grid_for(&SolverKind::Obelm, &s, 6, Direction::Sampling);
    let mut sess = SolverSession::new(SolverKind::Obelm, None, &s, &g, &x0(2)).unwrap();
    let fwd = sess.integrate(&p, Direction::Sampling, true);
    assert_eq!(fwd.points[1].marker, Marker::Bootstrap);
    let back = sess.integrate(&p, Direction::Inversion, true);
    assert_eq!(back.points[1].marker, Marker::Shift);
    assert_eq!(back.nfe, 5);
    // Every intermediate state is revisited.
    for (a, b) in fwd.points.iter().rev().zip(&back.points) {
        assert_eq!(a.position, b.position);
        assert!(rel(&a.state, &b.state) < 1e-12);
    }
}

#[test]
fn constant_noise_makes_bdia_follow_ddim() {
    let s = NoiseSchedule::standard();
    let c = FnPredictor {
        dim: 1,
        f: |_x: &[f64], _l: &NoiseLevel, o: &mut [f64]| {
            o[0] = 0.37;
            Ok(())
        },
    };
    let g = TimeGrid::build(&s, Variable::T, 10, 1.0, Direction::Sampling).unwrap();
    let (a, _) = integrate(SolverKind::Ddim, None, &s, &g, &[0.3], &c, false).unwrap();
    for kind in [SolverKind::Bdia { gamma: 1.0 }, SolverKind::Bdia { gamma: 0.5 }] {
        let (b, _) = integrate(kind, None, &s, &g, &[0.3], &c, false).unwrap();
        assert!((a.state()[0] - b.state()[0]).abs() < 1e-13, "{kind}");
    }
}

#[test]
fn ees_round_trip_exact_for_constant_right_hand_side() {
    // In x/α over σ/α a constant ε is a constant vector field: every stage agrees.
    let s = NoiseSchedule::standard();
    let c = FnPredictor {
        dim: 2,
        f: |_x: &[f64], _l: &NoiseLevel, o: &mut [f64]| {
            o.copy_from_slice(&[0.4, -1.1]);
            Ok(())
        },
    };
    for kind in [SolverKind::ees25(), SolverKind::ees27()] {
        let g = TimeGrid::build(&s, Variable::Lambda, 16, 1.0, Direction::Sampling).unwrap();
        let mut sess = SolverSession::new(kind, Some(OdeFormulation::RATIO_DDIM), &s, &g, &[0.8, 0.2]).unwrap();
        sess.integrate(&c, Direction::Sampling, false);
        sess.integrate(&c, Direction::Inversion, false);
        assert!(rel(&sess.state(), &[0.8, 0.2]) < 1e-13, "{kind}");
    }
}

#[test]
fn formulations_agree_in_the_limit() {
    let s = NoiseSchedule::standard();
    let m = gaussian(2);
    let p = Conditioned { model: &m, condition: "c" };
    let bb = OdeFormulation::new(Parametrisation::LambdaEps, Treatment::BlackBox);
    let sl = OdeFormulation::new(Parametrisation::LambdaEps, Treatment::Semilinear);
    let mut diffs = Vec::new();
    for n in [16, 32, 64] {
        let g = TimeGrid::build(&s, Variable::Lambda, n, 1.0, Direction::Sampling).unwrap();
        let (a, _) = integrate(SolverKind::ees25(), Some(bb), &s, &g, &x0(2), &p, false).unwrap();
        let (b, _) = integrate(SolverKind::ees25(), Some(sl), &s, &g, &x0(2), &p, false).unwrap();
        diffs.push(rel(&a.state(), &b.state()));
    }
    assert!(diffs[1] < diffs[0] / 3.0 && diffs[2] < diffs[1] / 3.0, "{diffs:?}");
}

#[test]
fn ddim_family_rejects_other_formulations() {
    let s = NoiseSchedule::standard();
    let g = TimeGrid::build(&s, Variable::T, 4, 1.0, Direction::Sampling).unwrap();
    let r = SolverSession::new(SolverKind::Ddim, Some(OdeFormulation::T_ORIGINAL), &s, &g, &[1.0]);
    assert!(matches!(r, Err(StepError::InvalidParams(_))));
    assert!(SolverSession::new(SolverKind::Bdia { gamma: 0.0 }, None, &s, &g, &[1.0]).is_err());
    assert!(SolverSession::new(SolverKind::Edict { p: 0.0 }, None, &s, &g, &[1.0]).is_err());
}

#[test]
fn callback_error_carries_step_index() {
    use std::cell::Cell;
    let s = NoiseSchedule::standard();
    let calls = Cell::new(0);
    let f = FnPredictor {
        dim: 1,
        f: |_x: &[f64], _l: &NoiseLevel, o: &mut [f64]| {
            calls.set(calls.get() + 1);
            if calls.get() == 4 {
                return Err(crate::field::FieldError::Callback("host failure".into()));
            }
            o[0] = 0.1;
            Ok(())
        },
    };
    let g = TimeGrid::build(&s, Variable::T, 8, 1.0, Direction::Sampling).unwrap();
    let (_, t) = integrate(SolverKind::Ddim, None, &s, &g, &[1.0], &f, true).unwrap();
    match t.error {
        Some(StepError::Field { step: Some(3), .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(t.points.len(), 4);
}

#[test]
fn divergence_returns_partial_trajectory() {
    let s = NoiseSchedule::standard();
    let f = FnPredictor {
        dim: 1,
        f: |x: &[f64], _l: &NoiseLevel, o: &mut [f64]| {
            o[0] = 1e4 * x[0];
            Ok(())
        },
    };
    let g = TimeGrid::build(&s, Variable::T, 20, 1.0, Direction::Sampling).unwrap();
    let (_, t) = integrate(SolverKind::Ddim, None, &s, &g, &[1.0], &f, true).unwrap();
    let e = t.error.clone().unwrap();
    assert!(e.is_divergence(), "{e}");
    assert!(t.points.len() < 21);
    assert_eq!(t.points.last().unwrap().marker, Marker::Diverged);
}

#[test]
fn single_step_integration_is_one_step() {
    let s = NoiseSchedule::standard();
    let m = gaussian(2);
    let p = Conditioned { model: &m, condition: "c" };
    let g = TimeGrid::build(&s, Variable::T, 1, 1.0, Direction::Sampling).unwrap();
    let (a, _) = integrate(SolverKind::Ddim, None, &s, &g, &x0(2), &p, false).unwrap();
    let l1 = s.level_at_t(g.node(1));
    let l0 = s.level_at_t(g.node(0));
    let e = m.eval_eps(&x0(2), &l1, "c").unwrap();
    let r = l0.alpha / l1.alpha;
    for j in 0..2 {
        let want = r * x0(2)[j] + (l0.sigma - r * l1.sigma) * e[j];
        assert!((a.state()[j] - want).abs() < 1e-14);
    }
}

#[test]
fn csv_and_sidecar() {
    let s = NoiseSchedule::standard();
    let m = gaussian(2);
    let p = Conditioned { model: &m, condition: "c" };
    let g = TimeGrid::build(&s, Variable::T, 3, 1.0, Direction::Sampling).unwrap();
    let (_, t) = integrate(SolverKind::Edict { p: 0.93 }, None, &s, &g, &x0(2), &p, true).unwrap();
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,position,grid_value,t,marker,x_0,x_1\n"));
    assert_eq!(text.lines().count(), 5);
    let json: serde_json::Value = serde_json::from_str(&t.sidecar_json()).unwrap();
    assert_eq!(json["solver"], "edict");
    assert_eq!(json["nfe"], 6);
}
