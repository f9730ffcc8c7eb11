//! Acceptance checks: one PASS/FAIL line per criterion, printed with its
//! runtime. Runs without the test harness so the table is always shown;
//! exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use revode::field::Conditioned;
use revode::lab::config::SOURCE;
use revode::lab::studies::{gaussian_flow, oracle, relative_error, sample_marginal};
use revode::lab::{self, ExperimentReport, FieldSpec, StudyConfig};
use revode::schedule::{Direction, NoiseSchedule, TimeGrid, Variable};
use revode::stability::{self, GammaTest, LinearProbe, Window};
use revode::stepper::formulation::OdeFormulation;
use revode::stepper::{integrate, SolverKind};
use revode::tableau::{self, stability_polynomial, Branch};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(cond: bool, what: String, failures: &mut Vec<String>) {
    if !cond {
        failures.push(what);
    }
}

fn finish(failures: Vec<String>, summary: String) -> Outcome {
    if failures.is_empty() {
        Outcome { pass: true, detail: summary }
    } else {
        Outcome { pass: false, detail: format!("{summary}; failed: {}", failures.join("; ")) }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Admissible family parameters drawn uniformly from [-2, 2].
fn admissible_xs(seed: u64, n: usize, ok: impl Fn(f64) -> bool) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let x: f64 = rng.random_range(-2.0..2.0);
        if ok(x) {
            out.push(x);
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let mut f = Vec::new();
    let t = tableau::ees25_tableau(0.1).unwrap();
    let expect_a = [(1, 0, 1.0 / 3.0), (2, 0, -5.0 / 48.0), (2, 1, 15.0 / 16.0)];
    for (i, j, v) in expect_a {
        check(close(t.a[i][j], v, 1e-14), format!("ees25 a{}{}", i + 1, j + 1), &mut f);
    }
    for (k, v) in [0.1, 0.5, 0.4].iter().enumerate() {
        check(close(t.b[k], *v, 1e-14), format!("ees25 b{}", k + 1), &mut f);
    }
    let r2 = std::f64::consts::SQRT_2;
    let t = tableau::ees27_tableau((5.0 - 3.0 * r2) / 14.0, Branch::Plus).unwrap();
    let expect_a = [
        (1, 0, (2.0 - r2) / 3.0),
        (2, 0, (-4.0 + r2) / 24.0),
        (2, 1, (4.0 + r2) / 8.0),
        (3, 0, (-176.0 + 145.0 * r2) / 168.0),
        (3, 1, 3.0 * (8.0 - 5.0 * r2) / 56.0),
        (3, 2, 3.0 * (3.0 - r2) / 7.0),
    ];
    for (i, j, v) in expect_a {
        check(close(t.a[i][j], v, 1e-14), format!("ees27 a{}{}", i + 1, j + 1), &mut f);
    }
    let expect_b = [(5.0 - 3.0 * r2) / 14.0, (3.0 + r2) / 14.0, 3.0 * (-1.0 + 2.0 * r2) / 14.0, (9.0 - 4.0 * r2) / 14.0];
    for (k, v) in expect_b.iter().enumerate() {
        check(close(t.b[k], *v, 1e-14), format!("ees27 b{}", k + 1), &mut f);
    }
    let expect_c = [0.0, (2.0 - r2) / 3.0, (2.0 + r2) / 6.0, (4.0 + r2) / 6.0];
    for (k, v) in expect_c.iter().enumerate() {
        check(close(t.c[k], *v, 1e-14), format!("ees27 c{}", k + 1), &mut f);
    }
    let mut consistent = 0;
    for x in admissible_xs(1, 50, |x| tableau::ees25_tableau(x).is_ok()) {
        let t = tableau::ees25_tableau(x).unwrap();
        let sum_b: f64 = t.b.iter().sum();
        if close(sum_b, 1.0, 1e-12) && t.verify().is_ok() {
            consistent += 1;
        }
    }
    for x in admissible_xs(2, 50, |x| tableau::ees27_tableau(x, Branch::Plus).is_ok()) {
        let t = tableau::ees27_tableau(x, Branch::Plus).unwrap();
        let sum_b: f64 = t.b.iter().sum();
        if close(sum_b, 1.0, 1e-12) && t.verify().is_ok() {
            consistent += 1;
        }
    }
    check(consistent == 100, format!("{consistent}/100 random tableaux consistent"), &mut f);
    finish(f, format!("published entries match to 1e-14; {consistent}/100 random x consistent"))
}

fn criterion_2() -> Outcome {
    let mut f = Vec::new();
    let r2 = std::f64::consts::SQRT_2;
    let want25 = [1.0, 1.0, 0.5, 0.125];
    let want27 = [1.0, 1.0, 0.5, (2.0 - r2) / 4.0, (3.0 - 2.0 * r2) / 8.0];
    let mut worst: f64 = 0.0;
    for x in admissible_xs(3, 50, |x| tableau::ees25_tableau(x).is_ok()) {
        let p = stability_polynomial(&tableau::ees25_tableau(x).unwrap());
        check(p.coefficients.len() == 4, format!("ees25 degree at x={x}"), &mut f);
        for (a, b) in p.coefficients.iter().zip(want25) {
            worst = worst.max((a - b).abs());
        }
    }
    for x in admissible_xs(4, 50, |x| tableau::ees27_tableau(x, Branch::Plus).is_ok()) {
        let p = stability_polynomial(&tableau::ees27_tableau(x, Branch::Plus).unwrap());
        check(p.coefficients.len() == 5, format!("ees27 degree at x={x}"), &mut f);
        for (a, b) in p.coefficients.iter().zip(want27) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-12, format!("polynomial coefficient error {worst:e}"), &mut f);
    let rh = LinearProbe::ReversibleHeun;
    let at = |re: f64, im: f64| stability::empirical_boundedness(&rh, Complex64::new(re, im), 10_000, 1e6);
    check(at(0.0, 0.9), "rev-heun unbounded at 0.9i".into(), &mut f);
    check(!at(0.0, 1.1), "rev-heun bounded at 1.1i".into(), &mut f);
    check(!at(-0.05, 0.0), "rev-heun bounded at -0.05".into(), &mut f);
    let w = Window::new(-3.0, 1.0, -2.0, 2.0);
    let euler = tableau::euler();
    let gamma = stability::mcf_gamma_region(&euler, 0.999, GammaTest::CharacteristicRoots, w, 41, 41).unwrap();
    let modulus = stability::mcf_gamma_region(&euler, 0.999, GammaTest::Modulus, w, 41, 41).unwrap();
    let probe = LinearProbe::McCallumFoster { base: euler, zeta: 0.999 };
    let emp = stability::empirical_raster(&probe, w, 41, 41, 10_000, 1e6).unwrap();
    let (agree, cells) = gamma.agreement(&emp);
    let (agree_mod, _) = modulus.agreement(&emp);
    check(agree >= 0.98, format!("gamma/probe agreement {agree:.4}"), &mut f);
    finish(
        f,
        format!(
            "max coeff err {worst:.1e}; rev-heun bounded at 0.9i only; gamma roots vs probe {:.1}% of {cells} cells (|Γ|<1+ζ form {:.1}%)",
            100.0 * agree,
            100.0 * agree_mod
        ),
    )
}

fn rough_config(names: &[&str]) -> StudyConfig {
    let mut c = StudyConfig::with_solvers(names).unwrap();
    c.budgets = vec![48];
    c.field = FieldSpec { dim: 8, ..FieldSpec::rough() };
    c.jobs = 4;
    c
}

const REVERSIBLE: [&str; 9] =
    ["edict", "bdia", "obelm", "rev-heun", "mcf-euler", "mcf-midpoint", "rex-euler", "rex-midpoint", "ees25"];

fn criterion_3() -> Outcome {
    let mut f = Vec::new();
    let mut cfg = rough_config(&REVERSIBLE[..8]);
    cfg.replicates = 3;
    let r = lab::roundtrip_study(&cfg).unwrap();
    let mut worst: (f64, String) = (0.0, String::new());
    for row in &r.rows {
        check(row.nfe == 48, format!("{} used {} NFE", row.solver, row.nfe), &mut f);
        check(row.value <= 1e-9, format!("{} round trip {:.2e}", row.solver, row.value), &mut f);
        if row.value > worst.0 || !row.value.is_finite() {
            worst = (row.value, row.solver.clone());
        }
    }
    check(r.rows.len() == 24, format!("{} rows", r.rows.len()), &mut f);
    finish(f, format!("8 solvers x 3 seeds at 48 NFE; worst {:.2e} ({})", worst.0, worst.1))
}

fn slope_ok(r: &ExperimentReport, solver: &str, metric: &str, target: f64, tol: f64, f: &mut Vec<String>, notes: &mut Vec<String>) {
    match r.slope(solver, metric) {
        Some(s) => {
            notes.push(format!("{solver} {:.2}", s.slope));
            check(s.contains(target, tol), format!("{solver} {metric} slope {:.3} not {target}±{tol}", s.slope), f);
        }
        None => f.push(format!("{solver} {metric}: no slope")),
    }
}

fn criterion_4() -> Outcome {
    let mut f = Vec::new();
    // Independent check of the RK4 oracle against the closed-form Gaussian flow.
    let spec = FieldSpec::default();
    let model = spec.build().unwrap();
    let field = Conditioned { model: &model, condition: SOURCE };
    let s = NoiseSchedule::standard();
    let top = s.level_at_t(s.horizon());
    let x = sample_marginal(&spec, &top, 0);
    let exact = gaussian_flow(&spec.source_mean(), spec.spread, &x, &top, &s.level_at_t(s.t_min()));
    let (o, change) = oracle(&s, OdeFormulation::LAMBDA_X0_SEMILINEAR, Variable::Lambda, 1.0, 128, &x, &field, Direction::Sampling).unwrap();
    check(change < 1e-12, format!("oracle halving change {change:e}"), &mut f);
    let oracle_err = relative_error(&o, &exact);
    check(oracle_err < 1e-11, format!("oracle vs closed form {oracle_err:e}"), &mut f);

    let mut acc = StudyConfig::with_solvers(&["ddim", "ees25", "ees27", "obelm", "rev-heun", "mcf-midpoint"]).unwrap();
    acc.jobs = 4;
    let r = lab::convergence_study(&acc).unwrap();
    let mut notes = Vec::new();
    slope_ok(&r, "ddim", "error", 1.0, 0.4, &mut f, &mut notes);
    for n in ["ees25", "ees27", "obelm", "rev-heun", "mcf-midpoint"] {
        slope_ok(&r, n, "error", 2.0, 0.4, &mut f, &mut notes);
    }
    let mut rt = StudyConfig::with_solvers(&["ddim", "ees25", "ees27"]).unwrap();
    rt.jobs = 4;
    let r = lab::roundtrip_study(&rt).unwrap();
    notes.push("| round trip:".into());
    slope_ok(&r, "ees25", "roundtrip", 5.0, 0.5, &mut f, &mut notes);
    slope_ok(&r, "ees27", "roundtrip", 7.0, 0.5, &mut f, &mut notes);
    slope_ok(&r, "ddim", "roundtrip", 1.0, 0.4, &mut f, &mut notes);
    finish(f, format!("accuracy: {} ; oracle vs closed form {oracle_err:.1e}", notes.join(", ")))
}

fn criterion_5() -> Outcome {
    let mut f = Vec::new();
    let mut names = REVERSIBLE.to_vec();
    names.push("ees27");
    let mut cfg = rough_config(&names);
    cfg.replicates = 20;
    cfg.guidance = vec![1.0, 3.0, 7.0];
    cfg.roughness = vec![1.0, 0.0];
    let r = lab::reconstruction_experiment(&cfg).unwrap();
    let mut worst_rev: f64 = 0.0;
    for row in r.rows.iter().filter(|row| row.metric == "mse") {
        let kind = SolverKind::from_name(&row.solver).unwrap();
        if kind.is_algebraically_reversible() {
            worst_rev = worst_rev.max(if row.value.is_finite() { row.value } else { f64::INFINITY });
        }
    }
    check(worst_rev <= 1e-18, format!("reversible MSE up to {worst_rev:e}"), &mut f);
    let mut notes = Vec::new();
    for ees in ["ees25", "ees27"] {
        let stat = |metric: &str, rho: &str, g: Option<f64>| {
            r.rows
                .iter()
                .find(|row| row.solver == ees && row.metric == metric && row.params.ends_with(rho) && row.g == g)
                .map(|row| row.value)
                .unwrap_or(f64::NAN)
        };
        let rho = stat("spearman_g_mse", "rho=1", None);
        let rough = stat("median_mse", "rho=1", Some(7.0));
        let smooth = stat("median_mse", "rho=0", Some(7.0));
        check(rho >= 0.9, format!("{ees} spearman {rho:.3}"), &mut f);
        check(smooth < rough, format!("{ees} smoothing {smooth:e} vs {rough:e}"), &mut f);
        notes.push(format!("{ees} spearman {rho:.2}, g=7 median rough {rough:.1e} vs smooth {smooth:.1e}"));
    }
    finish(f, format!("{}; worst reversible MSE {worst_rev:.1e}", notes.join("; ")))
}

fn criterion_6() -> Outcome {
    let mut f = Vec::new();
    let r25 = stability_polynomial(&tableau::ees25_default());
    let r27 = stability_polynomial(&tableau::ees27_default());
    let amp = r25.eval_real(-1.5).abs();
    check(close(amp, 0.203125, 1e-15), format!("|R(-1.5)| = {amp}"), &mut f);
    let kinds = [SolverKind::ees25(), SolverKind::ReversibleHeun];
    let demo = lab::stiffness_demo(&NoiseSchedule::standard(), &kinds, -1.5, 0.2, 500, 1e6).unwrap();
    let get = |solver: &str, metric: &str| demo.rows.iter().find(|r| r.solver == solver && r.metric == metric).unwrap();
    let ees_final = get("ees25", "final_growth");
    check(ees_final.flag.is_empty() && ees_final.value < 1e-100, format!("ees25 final growth {:e}", ees_final.value), &mut f);
    let rh = get("rev-heun", "peak_growth");
    let rh_steps = get("rev-heun", "steps_taken").value;
    check(rh.flag == "diverged" && rh.value > 1e6 && rh_steps <= 500.0, format!("rev-heun peak {:e}", rh.value), &mut f);
    let b25 = stability::real_axis_boundary(&r25, -10.0).unwrap();
    let b27 = stability::real_axis_boundary(&r27, -10.0).unwrap();
    check(close(b25, -3.087, 0.01), format!("ees25 boundary {b25}"), &mut f);
    check(close(b27, -3.92, 0.01), format!("ees27 boundary {b27}"), &mut f);
    let w = Window::STANDARD;
    let c25 = stability::polynomial_domain(&r25, w, 201, 241).unwrap().stable_count();
    let c3 = stability::polynomial_domain(&stability_polynomial(&tableau::kutta_rk3()), w, 201, 241).unwrap().stable_count();
    check(c25 >= c3, format!("ees25 cells {c25} < rk3 {c3}"), &mut f);
    finish(
        f,
        format!(
            "|R(-1.5)|={amp}; ees25 decays to {:.1e}; rev-heun passes 1e6x after {rh_steps} steps; boundaries {b25:.4}/{b27:.4}; cells ees25 {c25} vs rk3 {c3}",
            ees_final.value
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut f = Vec::new();
    let ddim = stability::zero_stability(&[1.0, -1.0]).unwrap();
    let belm = stability::zero_stability(&[1.0, 0.0, -1.0]).unwrap();
    check(ddim.root_condition && ddim.modulus_condition, "ddim".into(), &mut f);
    check(belm.root_condition && belm.modulus_condition, "o-belm".into(), &mut f);
    check(close(ddim.roots[0].0, 1.0, 1e-12), "ddim root".into(), &mut f);
    check(
        belm.roots.len() == 2 && close(belm.roots[0].0, -1.0, 1e-12) && close(belm.roots[1].0, 1.0, 1e-12),
        format!("o-belm roots {:?}", belm.roots),
        &mut f,
    );
    finish(f, format!("ddim roots {:?}, o-belm roots {:?}", ddim.roots, belm.roots))
}

fn run_cli(args: &[&str]) -> i32 {
    let (mut o, mut e) = (Vec::new(), Vec::new());
    revode::cli::run(std::iter::once("revode").chain(args.iter().copied()), &mut o, &mut e)
}

fn criterion_8() -> Outcome {
    let mut f = Vec::new();
    // Byte-identical reports across repeated runs and worker counts.
    let mut cfg = rough_config(&["all"]);
    cfg.replicates = 4;
    let mut outputs = Vec::new();
    for jobs in [1, 8, 8] {
        cfg.jobs = jobs;
        outputs.push(lab::reconstruction_experiment(&cfg).unwrap().csv_string());
    }
    check(outputs.iter().all(|o| *o == outputs[0]), "reconstruction CSV differs across runs/jobs".into(), &mut f);
    let tmp = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for jobs in ["1", "8"] {
        let dir = tmp.path().join(format!("jobs{jobs}"));
        let d = dir.to_str().unwrap();
        for study in [vec!["roundtrip", "--budget", "48", "--solvers", "all", "--field", "rough"], vec!["latent", "--solvers", "ddim,edict", "--samples", "16"]] {
            let mut args = vec!["--seed", "7", "--jobs", jobs, "--out", d];
            args.extend(study);
            check(run_cli(&args) == 0, format!("cli exit with jobs {jobs}"), &mut f);
        }
        let mut names: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        files.push(names.iter().map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap())).collect::<Vec<_>>());
    }
    check(files[0] == files[1], "cli outputs differ between --jobs 1 and 8".into(), &mut f);
    // NFE table: steps x per-step cost = 48 for every solver in the comparison set.
    let s = NoiseSchedule::standard();
    let spec = FieldSpec { dim: 4, ..Default::default() };
    let model = spec.build().unwrap();
    let field = Conditioned { model: &model, condition: SOURCE };
    let x0 = spec.source_mean();
    let mut table = Vec::new();
    for name in SolverKind::STUDY_SET {
        let kind = SolverKind::from_name(name).unwrap();
        let n = kind.steps_for_budget(48).unwrap();
        let g = TimeGrid::build(&s, kind.default_grid_variable(), n, 1.0, Direction::Inversion).unwrap();
        let (_, t) = integrate(kind, None, &s, &g, &x0, &field, false).unwrap();
        check(t.budget_nfe == 48, format!("{name} budget NFE {}", t.budget_nfe), &mut f);
        // Reversible Heun evaluates once per step plus one initial evaluation.
        let actual = if kind == SolverKind::ReversibleHeun { n + 1 } else { 48 };
        check(t.nfe == actual, format!("{name} evaluated {} times", t.nfe), &mut f);
        table.push(format!("{name}:{n}"));
    }
    finish(f, format!("byte-identical for jobs 1/8; steps at 48 NFE {}", table.join(" ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("tableau fidelity", criterion_1, Duration::from_secs(1)),
        ("stability claims", criterion_2, Duration::from_secs(30)),
        ("algebraic reversibility", criterion_3, Duration::from_secs(10)),
        ("order measurements", criterion_4, Duration::from_secs(60)),
        ("reconstruction vs guidance", criterion_5, Duration::from_secs(60)),
        ("stability gap", criterion_6, Duration::from_secs(10)),
        ("zero-stability", criterion_7, Duration::from_secs(1)),
        ("determinism and NFE accounting", criterion_8, Duration::MAX),
    ];
    let mut failed = Vec::new();
    for (k, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let in_time = took <= *budget;
        let pass = o.pass && in_time;
        let limit = if *budget == Duration::MAX { String::new() } else { format!(" / {}s", budget.as_secs()) };
        println!(
            "criterion {} {:<32} {} ({:.2}s{limit}) {}",
            k + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            o.detail
        );
        if !pass {
            failed.push(k + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
