//! Command-line front end. Exit codes: 0 success, 1 study failure, 2 configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig, StudySection};
use crate::lab::{self, ExperimentReport, FieldFamily, FieldSpec, LabError, StudyConfig};
use crate::stability::{self, GammaTest, LinearProbe, StabilityRaster, Window};
use crate::stepper::{SolverKind, StepError};
use crate::tableau::{self, stability_polynomial, Branch, TableauError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_STUDY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "revode", version, about = "Reversible and near-reversible ODE solvers for diffusion probability-flow experiments")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $REVODE_OUT, else ./revode-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed; outputs are fully determined by it (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a Butcher tableau and its stability polynomial.
    Tableau(TableauArgs),
    /// Stability-domain raster (CSV + SVG).
    Stability(StabilityArgs),
    /// Terminal error against an RK4 oracle over a step ladder.
    Convergence(StudyArgs),
    /// Invert then sample back; round-trip error per solver and N.
    Roundtrip(StudyArgs),
    /// Reconstruction MSE under guidance, rough vs smoothed field.
    Reconstruct(StudyArgs),
    /// Invert under one condition, sample under a shifted one.
    Edit(StudyArgs),
    /// Statistics of inverted terminal latents.
    Latent(StudyArgs),
}

#[derive(Debug, Args)]
pub struct TableauArgs {
    /// euler, midpoint, heun2, rk3, rk4, ees25 or ees27.
    pub name: String,
    /// Family parameter for ees25/ees27.
    #[arg(long, allow_hyphen_values = true)]
    pub x: Option<f64>,
    /// Root branch for ees27: plus or minus.
    #[arg(long, default_value = "plus")]
    pub branch: String,
    /// Re-derive the consistency identities; exit 1 if any fails.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    /// Tableau name or solver name (e.g. ees25, rev-heun, mcf-euler).
    #[arg(long)]
    pub method: Option<String>,
    /// re_min,re_max,im_min,im_max
    #[arg(long, allow_hyphen_values = true)]
    pub window: Option<String>,
    /// Cells per axis, `N` or `NX,NY`.
    #[arg(long)]
    pub res: Option<String>,
    /// polynomial, empirical, gamma or gamma-modulus.
    #[arg(long)]
    pub probe: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub cap: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub x: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct StudyArgs {
    /// Comma-separated solver specs, e.g. `ddim,edict:p=0.9`, or `all`.
    #[arg(long, value_delimiter = ',')]
    pub solvers: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    /// NFE budgets; step counts are derived per solver.
    #[arg(long, value_delimiter = ',')]
    pub budget: Option<Vec<usize>>,
    /// gaussian, mixture or rough.
    #[arg(long)]
    pub field: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub frequency: Option<f64>,
    /// e.g. `lambda-x0:semilinear`; applies to solvers that accept a choice.
    #[arg(long)]
    pub formulation: Option<String>,
    /// Grid variable: t, lambda or ratio.
    #[arg(long)]
    pub variable: Option<String>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub guidance: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub roughness: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub separations: Option<Vec<f64>>,
    #[arg(long)]
    pub edit_guidance: Option<f64>,
    /// Seeds per cell (samples for `latent`).
    #[arg(long, alias = "samples")]
    pub replicates: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Study(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Study(_) => EXIT_STUDY,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Lab(l) => l.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match &e {
            LabError::Config(_) | LabError::Field(_) | LabError::Schedule(_) => CliError::Config(e.to_string()),
            LabError::Step(s) if is_config_step_error(s) => CliError::Config(e.to_string()),
            _ => CliError::Study(e.to_string()),
        }
    }
}

fn is_config_step_error(e: &StepError) -> bool {
    matches!(e, StepError::InvalidParams(_) | StepError::Tableau(_) | StepError::Budget { .. } | StepError::Schedule(_))
}

impl From<TableauError> for CliError {
    fn from(e: TableauError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Study(format!("i/o error: {e}"))
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_CONFIG
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let CliError::Config(_) = e {
                let _ = writeln!(err, "run `revode --help` for usage");
            }
            e.code()
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let jobs = cli.jobs.or(file.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let dir = file.out_dir(cli.out.clone());
    match &cli.command {
        Command::Tableau(a) => cmd_tableau(a, out),
        Command::Stability(a) => cmd_stability(a, &file, &dir, jobs, out),
        Command::Convergence(a) => cmd_study("convergence", a, &file, &dir, seed, jobs, out),
        Command::Roundtrip(a) => cmd_study("roundtrip", a, &file, &dir, seed, jobs, out),
        Command::Reconstruct(a) => cmd_study("reconstruct", a, &file, &dir, seed, jobs, out),
        Command::Edit(a) => cmd_study("edit", a, &file, &dir, seed, jobs, out),
        Command::Latent(a) => cmd_study("latent", a, &file, &dir, seed, jobs, out),
    }
}

fn parse_branch(s: &str) -> Result<Branch, CliError> {
    match s {
        "plus" | "+" => Ok(Branch::Plus),
        "minus" | "-" => Ok(Branch::Minus),
        o => Err(CliError::Config(format!("unknown branch `{o}` (plus or minus)"))),
    }
}

fn cmd_tableau(a: &TableauArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let t = tableau::by_name(&a.name, a.x, parse_branch(&a.branch)?)?;
    let r = stability_polynomial(&t);
    write!(out, "{}", t.render())?;
    let coeffs: Vec<String> = r.coefficients.iter().map(|c| tableau::format_number(*c)).collect();
    writeln!(out, "R(z) coefficients = {}", coeffs.join(", "))?;
    if a.verify {
        match t.verify() {
            Ok(()) => writeln!(out, "verify: ok")?,
            Err(fails) => {
                for f in &fails {
                    writeln!(out, "verify: FAILED {f}")?;
                }
                return Err(CliError::Study(format!("{} consistency check(s) failed", fails.len())));
            }
        }
    }
    Ok(())
}

fn parse_res(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("--res expects N or NX,NY, got `{s}`"));
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    match v[..] {
        [n] if n > 0 => Ok((n, n)),
        [nx, ny] if nx > 0 && ny > 0 => Ok((nx, ny)),
        _ => Err(bad()),
    }
}

fn cmd_stability(a: &StabilityArgs, file: &RunConfig, dir: &Path, jobs: usize, out: &mut dyn Write) -> Result<(), CliError> {
    let s = &file.stability;
    let method = a.method.clone().or_else(|| s.method.clone()).ok_or_else(|| CliError::Config("--method is required".into()))?;
    let window = match (&a.window, s.window) {
        (Some(w), _) => Window::parse(w).ok_or_else(|| CliError::Config(format!("bad --window `{w}` (re_min,re_max,im_min,im_max)")))?,
        (None, Some([a, b, c, d])) => Window::new(a, b, c, d),
        (None, None) => Window::STANDARD,
    };
    let (nx, ny) = match (&a.res, s.res) {
        (Some(r), _) => parse_res(r)?,
        (None, Some([x, y])) => (x, y),
        (None, None) => (201, 241),
    };
    let iters = a.iters.or(s.iters).unwrap_or(stability::DEFAULT_ITERS);
    let cap = a.cap.or(s.cap).unwrap_or(stability::DEFAULT_GROWTH_CAP);
    let x = a.x.or(s.x);
    let rk = tableau::by_name(&method, x, Branch::Plus);
    let kind = match &rk {
        Ok(_) => None,
        Err(TableauError::UnknownName(_)) => Some(
            lab::parse_solver(&method).map_err(|_| CliError::Config(format!("unknown method `{method}`")))?,
        ),
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    let probe = a.probe.clone().or_else(|| s.probe.clone()).unwrap_or_else(|| {
        match kind {
            None => "polynomial",
            Some(SolverKind::McCallumFoster { .. }) => "gamma",
            Some(_) => "empirical",
        }
        .to_string()
    });
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| CliError::Study(e.to_string()))?;
    let raster: StabilityRaster = pool.install(|| -> Result<StabilityRaster, CliError> {
        let r = match (probe.as_str(), &rk, kind) {
            ("polynomial", Ok(t), _) => stability::polynomial_domain(&stability_polynomial(t), window, nx, ny),
            ("empirical", Ok(t), _) => stability::empirical_raster(&LinearProbe::Rk(t.clone()), window, nx, ny, iters, cap),
            ("empirical", _, Some(k)) => {
                let p = LinearProbe::from_kind(&k).map_err(|e| CliError::Config(e.to_string()))?;
                stability::empirical_raster(&p, window, nx, ny, iters, cap)
            }
            ("gamma" | "gamma-modulus", _, Some(SolverKind::McCallumFoster { base, zeta } | SolverKind::Rex { base, zeta })) => {
                let test = if probe == "gamma" { GammaTest::CharacteristicRoots } else { GammaTest::Modulus };
                stability::mcf_gamma_region(&base.tableau(), zeta, test, window, nx, ny)
            }
            _ => return Err(CliError::Config(format!("probe `{probe}` does not apply to `{method}`"))),
        };
        r.map_err(|e| CliError::Config(e.to_string()))
    })?;
    std::fs::create_dir_all(dir)?;
    let stem = format!("stability_{}_{}", method.replace([':', '=', ','], "_"), probe);
    let csv = dir.join(format!("{stem}.csv"));
    raster.write_csv(std::io::BufWriter::new(std::fs::File::create(&csv)?))?;
    let svg = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg, raster.to_svg(&format!("{method} ({probe})")))?;
    writeln!(out, "{method} [{probe}] {nx}x{ny}: {} stable cells", raster.stable_count())?;
    if let Ok(t) = &rk {
        match stability::real_axis_boundary(&stability_polynomial(t), -50.0) {
            Ok(b) => writeln!(out, "negative real-axis boundary: {b:.6}")?,
            Err(e) => writeln!(out, "negative real-axis boundary: {e}")?,
        }
    }
    writeln!(out, "wrote {}\nwrote {}", csv.display(), svg.display())?;
    Ok(())
}

/// Per-study defaults; anything here can be overridden by file or flags.
fn study_defaults(study: &str) -> StudyConfig {
    let mut c = StudyConfig::default();
    match study {
        "reconstruct" => {
            c.budgets = vec![48];
            c.field = FieldSpec::rough();
            c.replicates = 20;
        }
        "edit" => c.budgets = vec![48],
        "latent" => {
            c.steps = vec![6, 48];
            c.replicates = 64;
        }
        _ => {}
    }
    c
}

fn cmd_study(
    study: &str,
    a: &StudyArgs,
    file: &RunConfig,
    dir: &Path,
    seed: u64,
    jobs: usize,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let defaults = study_defaults(study);
    let mut field = file.field.clone().unwrap_or_else(|| defaults.field.clone());
    if let Some(f) = &a.field {
        field.family = FieldFamily::parse(f).ok_or_else(|| CliError::Config(format!("unknown field `{f}` (gaussian, mixture, rough)")))?;
    }
    if let Some(d) = a.dim {
        field.dim = d;
    }
    if let Some(v) = a.amplitude {
        field.amplitude = v;
    }
    if let Some(v) = a.frequency {
        field.frequency = v;
    }
    let solvers = a.solvers.as_ref().map(|v| v.iter().filter(|s| !s.trim().is_empty()).cloned().collect::<Vec<_>>());
    if solvers.as_ref().is_some_and(|v| v.is_empty()) {
        return Err(CliError::Config("solver list is empty; pass --solvers NAME[,NAME...] or --solvers all".into()));
    }
    let flags = StudySection {
        solvers,
        steps: a.steps.clone(),
        budget: a.budget.clone(),
        formulation: a.formulation.clone(),
        variable: a.variable.clone(),
        strength: a.strength,
        guidance: a.guidance.clone(),
        roughness: a.roughness.clone(),
        separations: a.separations.clone(),
        edit_guidance: a.edit_guidance,
        replicates: a.replicates,
    };
    let mut cfg = file.study(&flags, Some(field), defaults)?;
    cfg.seed = seed;
    cfg.jobs = jobs;
    std::fs::create_dir_all(dir)?;
    let (report, plots): (ExperimentReport, Vec<(&str, &str)>) = match study {
        "convergence" => (lab::convergence_study(&cfg)?, vec![("error", "h")]),
        "roundtrip" => (lab::roundtrip_study(&cfg)?, vec![("roundtrip", "h")]),
        "reconstruct" => (lab::reconstruction_experiment(&cfg)?, vec![("median_mse", "g")]),
        "edit" => (lab::edit_experiment(&cfg)?, vec![("deviation", "h")]),
        "latent" => (lab::latent_stats(&cfg)?, vec![]),
        _ => unreachable!("subcommands are fixed"),
    };
    let files = report.write_all(dir, study, &plots)?;
    print_summary(&report, out)?;
    for f in files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(())
}

fn print_summary(r: &ExperimentReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "{}: {} rows, {} diverged", r.study, r.rows.len(), r.diverged_rows())?;
    for s in &r.slopes {
        writeln!(out, "  slope {:<14} {:<10} {:>7.3} ± {:.3} ({} points)", s.solver, s.metric, s.fit.slope, s.fit.half_width, s.fit.points)?;
    }
    if r.study == "roundtrip" {
        for row in r.rows.iter().filter(|row| !row.flag.is_empty()) {
            writeln!(out, "  {:<14} N={:<4} nfe={:<4} {:.3e} {}", row.solver, row.n, row.nfe, row.value, row.flag)?;
        }
    }
    if r.study == "reconstruct" {
        for row in r.rows.iter().filter(|row| row.metric == "spearman_g_mse") {
            writeln!(out, "  {:<14} {:<40} spearman(g, mse) = {:.3}", row.solver, row.params, row.value)?;
        }
    }
    if r.study == "latent" {
        for row in r.rows.iter().filter(|row| row.metric == "variance_ratio") {
            writeln!(out, "  {:<14} N={:<4} variance ratio {:.3} {}", row.solver, row.n, row.value, row.flag)?;
        }
    }
    for n in &r.notes {
        writeln!(out, "  note: {n}")?;
    }
    Ok(())
}
