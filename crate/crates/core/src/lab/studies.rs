//! The experiments: convergence and round-trip ladders, reconstruction under
//! guidance, large edits, terminal-latent statistics and the stiffness demo.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::config::{FieldFamily, FieldSpec, StudyConfig, SOURCE, TARGET};
use super::fit::fit_slope;
use super::report::{ExperimentReport, Row, SlopeRow};
use super::LabError;
use crate::field::{Conditioned, FieldError, FieldModel, FnPredictor, GuidanceConfig, GuidanceMode, Guided, NoisePredictor};
use crate::schedule::{Direction, NoiseLevel, NoiseSchedule, TimeGrid, Variable};
use crate::stepper::formulation::OdeFormulation;
use crate::stepper::{RkMethod, SolverKind, SolverSession, StepError};

/// Reversible solvers must round-trip to this relative error.
pub const ROUNDTRIP_TOL: f64 = 1e-9;
/// Oracle halving must change the result by less than this.
pub const ORACLE_TOL: f64 = 1e-12;
pub const ORACLE_REFINEMENT: usize = 100;
pub const ORACLE_MAX_DOUBLINGS: usize = 6;

/// Runs `f` over `cells` on `jobs` workers; output order follows `cells`.
pub fn run_cells<T: Sync, R: Send>(jobs: usize, cells: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if jobs <= 1 {
        return cells.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().expect("thread pool");
    pool.install(|| cells.par_iter().map(f).collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn relative_error(x: &[f64], reference: &[f64]) -> f64 {
    let d: Vec<f64> = x.iter().zip(reference).map(|(a, b)| a - b).collect();
    norm(&d) / norm(reference).max(f64::MIN_POSITIVE)
}

pub fn mse(x: &[f64], reference: &[f64]) -> f64 {
    x.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64
}

/// A clean sample from the source condition (first component for mixtures).
pub fn sample_data(spec: &FieldSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.source_mean()
        .iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(&mut rng);
            m + spec.spread * z
        })
        .collect()
}

/// A sample from the source marginal at `level` (Gaussian-family fields).
pub fn sample_marginal(spec: &FieldSpec, level: &NoiseLevel, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (level.alpha * level.alpha * spec.spread * spec.spread + level.sigma * level.sigma).sqrt();
    spec.source_mean()
        .iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(&mut rng);
            level.alpha * m + sd * z
        })
        .collect()
}

/// Closed-form flow of a single-Gaussian condition from `from` to `to`.
pub fn gaussian_flow(mean: &[f64], spread: f64, x: &[f64], from: &NoiseLevel, to: &NoiseLevel) -> Vec<f64> {
    let sd = |l: &NoiseLevel| (l.alpha * l.alpha * spread * spread + l.sigma * l.sigma).sqrt();
    let r = sd(to) / sd(from);
    x.iter().zip(mean).map(|(xi, m)| to.alpha * m + r * (xi - from.alpha * m)).collect()
}

fn grid(cfg: &StudyConfig, kind: &SolverKind, n: usize, dir: Direction) -> Result<TimeGrid, LabError> {
    Ok(TimeGrid::build(&cfg.schedule, cfg.variable_for(kind), n, cfg.strength, dir)?)
}

/// RK4 reference in the given formulation from `100 × n` steps upwards, checked by halving.
pub fn oracle(
    schedule: &NoiseSchedule,
    formulation: OdeFormulation,
    variable: Variable,
    strength: f64,
    n: usize,
    x: &[f64],
    field: &dyn NoisePredictor,
    direction: Direction,
) -> Result<(Vec<f64>, f64), LabError> {
    let run = |steps: usize| -> Result<Vec<f64>, LabError> {
        let g = TimeGrid::build(schedule, variable, steps, strength, direction)?;
        let mut s = SolverSession::new(SolverKind::Rk(RkMethod::Rk4), Some(formulation), schedule, &g, x)?;
        let t = s.integrate(field, direction, false);
        Ok(t.into_result()?.terminal)
    };
    // Start at h/100 and keep halving until two successive runs agree.
    let mut steps = ORACLE_REFINEMENT * n;
    let mut coarse = run(steps)?;
    let mut change = f64::INFINITY;
    for _ in 0..=ORACLE_MAX_DOUBLINGS {
        let fine = run(2 * steps)?;
        change = relative_error(&coarse, &fine);
        if change < ORACLE_TOL {
            return Ok((fine, change));
        }
        (coarse, steps) = (fine, 2 * steps);
    }
    Err(LabError::Oracle(change))
}

fn base_row(study: &str, kind: &SolverKind, variable: Variable, n: usize, nfe: usize, h: f64) -> Row {
    Row {
        study: study.to_string(),
        solver: kind.name().to_string(),
        params: kind.params(),
        variable: variable.name().to_string(),
        n,
        nfe,
        h,
        g: None,
        seed: None,
        metric: String::new(),
        value: f64::NAN,
        flag: String::new(),
    }
}

fn with(mut r: Row, metric: &str, value: f64, flag: &str) -> Row {
    r.metric = metric.to_string();
    r.value = value;
    r.flag = flag.to_string();
    r
}

fn error_flag(e: &StepError) -> &'static str {
    if e.is_divergence() {
        "diverged"
    } else {
        "error"
    }
}

/// Slope of the seed-averaged metric over the ladder, for each listed solver.
fn fit_ladders(report: &mut ExperimentReport, solvers: &[SolverKind], metric: &str) {
    for kind in solvers {
        let mut by_h: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
        for r in report.rows.iter().filter(|r| r.solver == kind.name() && r.params == kind.params() && r.metric == metric) {
            if r.flag == "diverged" || r.flag == "error" || !r.value.is_finite() {
                continue;
            }
            let e = by_h.entry(r.h.to_bits()).or_insert((r.h, 0.0, 0));
            e.1 += r.value;
            e.2 += 1;
        }
        let pts: Vec<(f64, f64)> = by_h.values().map(|(h, s, n)| (*h, s / *n as f64)).collect();
        if pts.len() < 2 {
            continue;
        }
        match fit_slope(&pts) {
            Ok(fit) => report.slopes.push(SlopeRow {
                solver: kind.name().to_string(),
                params: kind.params(),
                metric: metric.to_string(),
                fit,
            }),
            Err(e) => report.notes.push(format!("{} {metric}: no slope ({e})", kind.name())),
        }
    }
}

fn check_not_all_diverged(report: &ExperimentReport) -> Result<(), LabError> {
    if !report.rows.is_empty() && report.rows.iter().all(|r| r.flag == "diverged" || r.flag == "error") {
        return Err(LabError::AllDiverged(report.study.clone()));
    }
    Ok(())
}

/// Terminal sampling error against an RK4 oracle over a step ladder.
pub fn convergence_study(cfg: &StudyConfig) -> Result<ExperimentReport, LabError> {
    cfg.validate()?;
    if cfg.field.family == FieldFamily::Rough {
        return Err(LabError::Config("convergence needs a gaussian or mixture field".into()));
    }
    let model = cfg.field.build()?;
    let field = Conditioned { model: &model, condition: SOURCE };
    let start = cfg.schedule.level_at_t(cfg.strength * cfg.schedule.horizon());
    let mut cells = Vec::new();
    for kind in &cfg.solvers {
        for seed in cfg.seeds() {
            cells.push((*kind, seed, cfg.ladder(kind)?));
        }
    }
    let results = run_cells(cfg.jobs, &cells, |(kind, seed, ladder)| -> Result<(Vec<Row>, f64), LabError> {
        let x_t = sample_marginal(&cfg.field, &start, *seed);
        let n_max = *ladder.iter().max().expect("non-empty ladder");
        let form = cfg.formulation_for(kind);
        let var = cfg.variable_for(kind);
        let (reference, change) =
            oracle(&cfg.schedule, form, var, cfg.strength, n_max, &x_t, &field, Direction::Sampling)?;
        let mut rows = Vec::new();
        for &n in ladder {
            let g = grid(cfg, kind, n, Direction::Sampling)?;
            let mut s = SolverSession::new(*kind, Some(form), &cfg.schedule, &g, &x_t)?;
            let t = s.integrate(&field, Direction::Sampling, false);
            let mut r = base_row("convergence", kind, var, n, t.budget_nfe, g.max_step());
            r.seed = Some(*seed);
            rows.push(match &t.error {
                None => with(r, "error", relative_error(&t.terminal, &reference), ""),
                Some(e) => with(r, "error", f64::NAN, error_flag(e)),
            });
        }
        Ok((rows, change))
    });
    let mut report = ExperimentReport::new("convergence");
    let mut worst = 0.0f64;
    for r in results {
        let (rows, change) = r?;
        worst = worst.max(change);
        report.rows.extend(rows);
    }
    report.notes.push(format!("oracle: RK4 at h/{ORACLE_REFINEMENT}, worst halving change {worst:.3e}"));
    check_not_all_diverged(&report)?;
    fit_ladders(&mut report, &cfg.solvers, "error");
    Ok(report)
}

/// Invert for `N` steps then sample back; relative distance to the start.
pub fn roundtrip_study(cfg: &StudyConfig) -> Result<ExperimentReport, LabError> {
    cfg.validate()?;
    let model = cfg.field.build()?;
    let field = Conditioned { model: &model, condition: SOURCE };
    let mut cells = Vec::new();
    for kind in &cfg.solvers {
        for n in cfg.ladder(kind)? {
            for seed in cfg.seeds() {
                cells.push((*kind, n, seed));
            }
        }
    }
    let rows = run_cells(cfg.jobs, &cells, |(kind, n, seed)| -> Result<Row, LabError> {
        let x0 = sample_data(&cfg.field, *seed);
        let g = grid(cfg, kind, *n, Direction::Inversion)?;
        let form = cfg.formulation_for(kind);
        let mut s = SolverSession::new(*kind, Some(form), &cfg.schedule, &g, &x0)?;
        let fwd = s.integrate(&field, Direction::Inversion, false);
        let mut r = base_row("roundtrip", kind, g.variable(), *n, fwd.budget_nfe, g.max_step());
        r.seed = Some(*seed);
        if let Some(e) = &fwd.error {
            return Ok(with(r, "roundtrip", f64::NAN, error_flag(e)));
        }
        let back = s.integrate(&field, Direction::Sampling, false);
        Ok(match &back.error {
            Some(e) => with(r, "roundtrip", f64::NAN, error_flag(e)),
            None => {
                let err = relative_error(&back.terminal, &x0);
                let flag = match (kind.is_algebraically_reversible(), err <= ROUNDTRIP_TOL) {
                    (false, _) => "",
                    (true, true) => "pass",
                    (true, false) => "fail",
                };
                with(r, "roundtrip", err, flag)
            }
        })
    });
    let mut report = ExperimentReport::new("roundtrip");
    for r in rows {
        report.rows.push(r?);
    }
    check_not_all_diverged(&report)?;
    let inexact: Vec<SolverKind> = cfg.solvers.iter().filter(|k| !k.is_algebraically_reversible()).copied().collect();
    fit_ladders(&mut report, &inexact, "roundtrip");
    Ok(report)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut e = k;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
                e += 1;
            }
            for &i in &idx[k..=e] {
                r[i] = (k + e) as f64 / 2.0 + 1.0;
            }
            k = e + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

struct Pass {
    state: Vec<f64>,
    max_norm: f64,
    budget_nfe: usize,
    error: Option<StepError>,
}

/// Invert under `inv` then sample under `samp` within one session.
fn invert_then_sample(
    cfg: &StudyConfig,
    kind: &SolverKind,
    n: usize,
    x0: &[f64],
    inv: &dyn NoisePredictor,
    samp: &dyn NoisePredictor,
) -> Result<(Pass, TimeGrid), LabError> {
    let g = grid(cfg, kind, n, Direction::Inversion)?;
    let mut s = SolverSession::new(*kind, Some(cfg.formulation_for(kind)), &cfg.schedule, &g, x0)?;
    let peak = |t: &crate::stepper::Trajectory| t.points.iter().map(|p| norm(&p.state)).fold(0.0, f64::max);
    let fwd = s.integrate(inv, Direction::Inversion, true);
    let mut max_norm = peak(&fwd);
    let budget_nfe = fwd.budget_nfe;
    if fwd.error.is_some() {
        return Ok((Pass { state: fwd.terminal, max_norm, budget_nfe, error: fwd.error }, g));
    }
    let back = s.integrate(samp, Direction::Sampling, true);
    max_norm = max_norm.max(peak(&back));
    Ok((Pass { state: back.terminal, max_norm, budget_nfe, error: back.error }, g))
}

/// Invert and resample under the same guided condition; MSE to the start.
pub fn reconstruction_experiment(cfg: &StudyConfig) -> Result<ExperimentReport, LabError> {
    cfg.validate()?;
    if cfg.guidance.is_empty() || cfg.roughness.is_empty() {
        return Err(LabError::Config("reconstruction needs guidance and roughness lists".into()));
    }
    let models: Vec<FieldModel> = cfg
        .roughness
        .iter()
        .map(|&rho| FieldSpec { roughness: rho, ..cfg.field.clone() }.build())
        .collect::<Result<_, _>>()?;
    let mut cells = Vec::new();
    for kind in &cfg.solvers {
        for n in cfg.ladder(kind)? {
            for (m, _) in cfg.roughness.iter().enumerate() {
                for &g in &cfg.guidance {
                    for seed in cfg.seeds() {
                        cells.push((*kind, n, m, g, seed));
                    }
                }
            }
        }
    }
    let rows = run_cells(cfg.jobs, &cells, |(kind, n, m, g, seed)| -> Result<Row, LabError> {
        let model = &models[*m];
        let guidance = GuidanceConfig::plain(*g, SOURCE);
        guidance.validate(model)?;
        let inv = Guided { model, guidance: &guidance, phase: Direction::Inversion };
        let samp = Guided { model, guidance: &guidance, phase: Direction::Sampling };
        let x0 = sample_data(&cfg.field, *seed);
        let (pass, grid) = invert_then_sample(cfg, kind, *n, &x0, &inv, &samp)?;
        let mut r = base_row("reconstruct", kind, grid.variable(), *n, pass.budget_nfe, grid.max_step());
        r.params = join_params(&r.params, &format!("rho={}", cfg.roughness[*m]));
        r.g = Some(*g);
        r.seed = Some(*seed);
        Ok(match &pass.error {
            Some(e) => with(r, "mse", f64::NAN, error_flag(e)),
            None => with(r, "mse", mse(&pass.state, &x0), ""),
        })
    });
    let mut report = ExperimentReport::new("reconstruct");
    for r in rows {
        report.rows.push(r?);
    }
    check_not_all_diverged(&report)?;
    summarise_reconstruction(&mut report, cfg);
    report.notes.push("MSE is on raw state vectors".into());
    Ok(report)
}

fn join_params(a: &str, b: &str) -> String {
    if a.is_empty() {
        b.to_string()
    } else {
        format!("{a};{b}")
    }
}

/// Adds per-(solver, ρ) mean Spearman ρ(g, MSE) over seeds and per-g medians.
fn summarise_reconstruction(report: &mut ExperimentReport, cfg: &StudyConfig) {
    let mut groups: BTreeMap<(String, String, usize), Vec<&Row>> = BTreeMap::new();
    for r in report.rows.iter().filter(|r| r.metric == "mse") {
        groups.entry((r.solver.clone(), r.params.clone(), r.n)).or_default().push(r);
    }
    let mut extra = Vec::new();
    for ((_, _, _), rows) in groups {
        let template = rows[0].clone();
        let mut rhos = Vec::new();
        for seed in cfg.seeds() {
            let mut pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.seed == Some(seed)).map(|r| (r.g.unwrap_or(0.0), r.value)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pts.len() >= 2 && pts.iter().all(|p| p.1.is_finite()) {
                let (gs, ms): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
                rhos.push(spearman(&gs, &ms));
            }
        }
        if !rhos.is_empty() {
            let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
            let mut r = with(template.clone(), "spearman_g_mse", mean, "");
            (r.g, r.seed) = (None, None);
            extra.push(r);
        }
        for &g in &cfg.guidance {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.g == Some(g) && r.value.is_finite()).map(|r| r.value).collect();
            if !v.is_empty() {
                let mut r = with(template.clone(), "median_mse", median(&mut v), "");
                (r.g, r.seed) = (Some(g), None);
                extra.push(r);
            }
        }
    }
    report.rows.extend(extra);
}

/// Invert under the source, resample under a shifted target; deviation from the
/// RK4 reference of the same guided flows.
pub fn edit_experiment(cfg: &StudyConfig) -> Result<ExperimentReport, LabError> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for kind in &cfg.solvers {
        for n in cfg.ladder(kind)? {
            for (k, _) in cfg.separations.iter().enumerate() {
                for seed in cfg.seeds() {
                    cells.push((*kind, n, k, seed));
                }
            }
        }
    }
    let models: Vec<FieldModel> = cfg
        .separations
        .iter()
        .map(|&sep| FieldSpec { separation: sep, ..cfg.field.clone() }.build())
        .collect::<Result<_, _>>()?;
    let rows = run_cells(cfg.jobs, &cells, |(kind, n, k, seed)| -> Result<Vec<Row>, LabError> {
        let sep = cfg.separations[*k];
        let model = &models[*k];
        // Zero separation is plain reconstruction under the source.
        let target = if sep == 0.0 { SOURCE } else { TARGET };
        let guidance = GuidanceConfig::edit(cfg.edit_guidance, GuidanceMode::Plain, SOURCE, target);
        guidance.validate(model)?;
        let inv = Guided { model, guidance: &guidance, phase: Direction::Inversion };
        let samp = Guided { model, guidance: &guidance, phase: Direction::Sampling };
        let x0 = sample_data(&cfg.field, *seed);
        let (pass, grid) = invert_then_sample(cfg, kind, *n, &x0, &inv, &samp)?;
        let mut r = base_row("edit", kind, grid.variable(), *n, pass.budget_nfe, grid.max_step());
        r.params = join_params(&r.params, &format!("separation={sep}"));
        r.g = Some(cfg.edit_guidance);
        r.seed = Some(*seed);
        if let Some(e) = &pass.error {
            let f = error_flag(e);
            return Ok(vec![
                with(r.clone(), "deviation", f64::NAN, f),
                with(r.clone(), "mse", f64::NAN, f),
                with(r, "max_norm", pass.max_norm, f),
            ]);
        }
        let form = cfg.formulation_for(kind);
        let var = cfg.variable_for(kind);
        let (x_t, _) = oracle(&cfg.schedule, form, var, cfg.strength, *n, &x0, &inv, Direction::Inversion)?;
        let (reference, _) = oracle(&cfg.schedule, form, var, cfg.strength, *n, &x_t, &samp, Direction::Sampling)?;
        Ok(vec![
            with(r.clone(), "deviation", relative_error(&pass.state, &reference), ""),
            with(r.clone(), "mse", mse(&pass.state, &x0), ""),
            with(r, "max_norm", pass.max_norm, ""),
        ])
    });
    let mut report = ExperimentReport::new("edit");
    for r in rows {
        report.rows.extend(r?);
    }
    check_not_all_diverged(&report)?;
    for kind in &cfg.solvers {
        let onset = cfg
            .separations
            .iter()
            .copied()
            .filter(|&sep| {
                report.rows.iter().any(|r| {
                    r.solver == kind.name()
                        && r.params == join_params(&kind.params(), &format!("separation={sep}"))
                        && r.flag == "diverged"
                })
            })
            .fold(f64::INFINITY, f64::min);
        report.notes.push(if onset.is_finite() {
            format!("{}: diverges from separation {onset}", kind.name())
        } else {
            format!("{}: finite at all separations", kind.name())
        });
    }
    Ok(report)
}

/// Statistics of inverted terminal states `x_T / σ_T` over `replicates` samples.
pub fn latent_stats(cfg: &StudyConfig) -> Result<ExperimentReport, LabError> {
    cfg.validate()?;
    let model = cfg.field.build()?;
    let field = Conditioned { model: &model, condition: SOURCE };
    let mut cells = Vec::new();
    for kind in &cfg.solvers {
        for n in cfg.ladder(kind)? {
            for seed in cfg.seeds() {
                cells.push((*kind, n, seed));
            }
        }
    }
    let outs = run_cells(cfg.jobs, &cells, |(kind, n, seed)| -> Result<(Option<Vec<f64>>, usize, f64), LabError> {
        let x0 = sample_data(&cfg.field, *seed);
        let g = grid(cfg, kind, *n, Direction::Inversion)?;
        let mut s = SolverSession::new(*kind, Some(cfg.formulation_for(kind)), &cfg.schedule, &g, &x0)?;
        let t = s.integrate(&field, Direction::Inversion, false);
        let sigma = s.level().sigma;
        Ok((t.error.is_none().then(|| t.terminal.iter().map(|v| v / sigma).collect()), t.budget_nfe, g.max_step()))
    });
    let mut report = ExperimentReport::new("latent");
    let mut k = 0;
    let m = cfg.replicates;
    for kind in &cfg.solvers {
        for n in cfg.ladder(kind)? {
            let mut zs = Vec::new();
            let (mut nfe, mut h) = (0, f64::NAN);
            for o in &outs[k..k + m] {
                let (z, f, hh) = o.as_ref().map_err(|e| LabError::Config(e.to_string()))?;
                (nfe, h) = (*f, *hh);
                if let Some(z) = z {
                    zs.push(z.clone());
                }
            }
            k += m;
            let r = base_row("latent", kind, cfg.variable_for(kind), n, nfe, h);
            let failed = m - zs.len();
            if failed > 0 {
                report.rows.push(with(r.clone(), "diverged_samples", failed as f64, "diverged"));
            }
            if zs.is_empty() {
                continue;
            }
            if zs.len() == 1 {
                report.notes.push(format!("{} N={n}: a single sample gives only its norm", kind.name()));
                report.rows.push(with(r, "norm", norm(&zs[0]), "single-sample"));
                continue;
            }
            let stats = moments(&zs);
            let ratio = stats.variances.iter().sum::<f64>() / stats.variances.len() as f64;
            let flag = if (0.5..=2.0).contains(&ratio) { "" } else { "anomalous" };
            report.rows.push(with(r.clone(), "mean", stats.mean, ""));
            report.rows.push(with(r.clone(), "variance_ratio", ratio, flag));
            report.rows.push(with(r.clone(), "excess_kurtosis", stats.kurtosis, ""));
            for (j, v) in stats.variances.iter().enumerate() {
                report.rows.push(with(r.clone(), &format!("variance[{j}]"), *v, ""));
            }
        }
    }
    if report.rows.iter().all(|r| r.flag == "diverged") {
        return Err(LabError::AllDiverged("latent".into()));
    }
    Ok(report)
}

struct Moments {
    mean: f64,
    variances: Vec<f64>,
    kurtosis: f64,
}

/// Grand mean, per-coordinate unbiased variances, mean per-coordinate excess kurtosis.
fn moments(zs: &[Vec<f64>]) -> Moments {
    let m = zs.len() as f64;
    let d = zs[0].len();
    let means: Vec<f64> = (0..d).map(|j| zs.iter().map(|z| z[j]).sum::<f64>() / m).collect();
    let variances: Vec<f64> = (0..d).map(|j| zs.iter().map(|z| (z[j] - means[j]).powi(2)).sum::<f64>() / (m - 1.0)).collect();
    let kurtosis = (0..d)
        .map(|j| {
            let m2 = zs.iter().map(|z| (z[j] - means[j]).powi(2)).sum::<f64>() / m;
            let m4 = zs.iter().map(|z| (z[j] - means[j]).powi(4)).sum::<f64>() / m;
            m4 / (m2 * m2) - 3.0
        })
        .sum::<f64>()
        / d as f64;
    Moments { mean: means.iter().sum::<f64>() / d as f64, variances, kurtosis }
}

/// Noise predictor making `dy/du = κ y` in the scaled-noise formulation.
pub fn linear_field(dim: usize, kappa: f64) -> FnPredictor<impl Fn(&[f64], &NoiseLevel, &mut [f64]) -> Result<(), FieldError>> {
    FnPredictor {
        dim,
        f: move |x: &[f64], level: &NoiseLevel, out: &mut [f64]| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = kappa * xi / level.alpha;
            }
            Ok(())
        },
    }
}

/// Samples a linear field on a uniform scaled-noise grid with `z = λh` per step;
/// reports each solver's growth relative to the initial state.
pub fn stiffness_demo(
    schedule: &NoiseSchedule,
    solvers: &[SolverKind],
    z: f64,
    h: f64,
    steps: usize,
    cap: f64,
) -> Result<ExperimentReport, LabError> {
    let (u_lo, u_hi) = schedule.domain(Variable::Ratio);
    let u0 = u_lo.max(0.0) + h;
    if !(h > 0.0) || u0 + h * steps as f64 >= u_hi {
        return Err(LabError::Config(format!("{steps} steps of {h} do not fit the scaled-noise domain")));
    }
    let nodes: Vec<f64> = (0..=steps).map(|k| u0 + h * k as f64).collect();
    let g = TimeGrid::from_nodes(Variable::Ratio, nodes, Direction::Sampling)?;
    // Sampling runs u downwards, so the signed step is −h.
    let field = linear_field(2, -z / h);
    let mut report = ExperimentReport::new("stiffness");
    for kind in solvers {
        let start = [1.0, 1.0];
        let mut s = SolverSession::new(*kind, Some(OdeFormulation::RATIO_DDIM), schedule, &g, &start)?;
        let y0 = norm(&start) / s.level().alpha;
        let mut peak = 1.0f64;
        let mut steps_taken = 0;
        let mut blew_up = false;
        while s.can_step(Direction::Sampling) {
            let res = s.step(&field, Direction::Sampling);
            steps_taken += 1;
            let growth = norm(&s.state()) / s.level().alpha / y0;
            if res.is_err() || !growth.is_finite() {
                blew_up = true;
                break;
            }
            peak = peak.max(growth);
            if peak > cap {
                blew_up = true;
                break;
            }
        }
        let final_growth = norm(&s.state()) / s.level().alpha / y0;
        let r = base_row("stiffness", kind, Variable::Ratio, steps, s.budget_nfe(), h);
        let flag = if blew_up { "diverged" } else { "" };
        report.rows.push(with(r.clone(), "peak_growth", peak, flag));
        report.rows.push(with(r.clone(), "final_growth", final_growth, flag));
        report.rows.push(with(r, "steps_taken", steps_taken as f64, flag));
    }
    report.notes.push(format!("linear field with z = lambda*h = {z}, growth cap {cap:e}"));
    Ok(report)
}
