//! C ABI over the revode solver kernels, for driving them from a host
//! language with an external noise predictor.
//!
//! Conventions:
//! - every fallible function returns a [`RevodeStatus`]; on failure the
//!   message (and the solver step, if any) is kept per thread and can be read
//!   with [`revode_last_error_message`] / [`revode_last_error_step`];
//! - handles are opaque and owned by the caller, who must release them with
//!   the matching `*_free` function;
//! - arrays are flat `double` buffers of the stated length.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use revode::field::{Condition, Conditioned, FieldError, FieldKind, FieldModel, GuidanceConfig, Guided, NoisePredictor};
use revode::lab::parse_solver;
use revode::schedule::{Direction, NoiseLevel, NoiseSchedule, ScheduleKind, TimeGrid, Variable};
use revode::stepper::formulation::OdeFormulation;
use revode::stepper::{SolverKind, SolverSession, StepError};

#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevodeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The noise predictor failed (callback error, unknown condition, ...).
    Field = 3,
    /// Non-finite or exploding state.
    Diverged = 4,
    EndOfGrid = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevodeScheduleKind {
    LinearBeta = 0,
    Cosine = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevodeSchedule {
    pub kind: RevodeScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub cosine_offset: f64,
    pub horizon: f64,
    /// Values <= 0 select the default `1e-3 · horizon`.
    pub t_min: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevodeVariable {
    /// The solver's own default grid variable.
    SolverDefault = 0,
    T = 1,
    Lambda = 2,
    Ratio = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevodeGrid {
    pub variable: RevodeVariable,
    pub steps: usize,
    /// Fraction of the horizon traversed, in (0, 1].
    pub strength: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevodeDirection {
    /// Data towards noise.
    Inversion = 0,
    /// Noise towards data.
    Sampling = 1,
}

/// Host noise predictor. Receives the state and the noise level (as `t`, `λ`
/// and the `α`, `σ` the native kernels use); writes `dim` values to `eps_out`
/// and returns 0, or returns non-zero to abort the solve.
pub type RevodeEpsCallback = Option<
    unsafe extern "C" fn(
        user_data: *mut c_void,
        x: *const f64,
        dim: usize,
        t: f64,
        lambda: f64,
        alpha: f64,
        sigma: f64,
        condition: *const c_char,
        eps_out: *mut f64,
    ) -> i32,
>;

/// Noise-predictor handle.
pub struct RevodeField {
    model: FieldModel,
    calls: Arc<AtomicUsize>,
}

/// Solver state handle.
pub struct RevodeSession {
    inner: SolverSession,
}

struct UserData(*mut c_void);

// The host promises the callback may be invoked from whichever thread calls
// into the library; the library itself never calls it concurrently.
unsafe impl Send for UserData {}
unsafe impl Sync for UserData {}

#[derive(Default)]
struct LastError {
    message: String,
    step: Option<usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<LastError> = RefCell::new(LastError::default());
}

fn fail(status: RevodeStatus, message: impl Into<String>, step: Option<usize>) -> RevodeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = LastError { message: message.into(), step });
    status
}

fn step_error(e: &StepError) -> RevodeStatus {
    let (status, step) = match e {
        StepError::Field { step, .. } => (RevodeStatus::Field, *step),
        StepError::NonFinite { step, .. } => (RevodeStatus::Diverged, *step),
        StepError::Diverged { step, .. } => (RevodeStatus::Diverged, Some(*step)),
        StepError::EndOfGrid { .. } => (RevodeStatus::EndOfGrid, None),
        _ => (RevodeStatus::InvalidArgument, None),
    };
    fail(status, e.to_string(), step)
}

/// Runs `f`, turning a panic into [`RevodeStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), RevodeStatus>) -> RevodeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = LastError::default());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RevodeStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(RevodeStatus::Panic, msg, None)
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, RevodeStatus> {
    if p.is_null() {
        return Err(fail(RevodeStatus::NullPointer, format!("{what} is null"), None));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RevodeStatus::InvalidArgument, format!("{what} is not UTF-8"), None))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], RevodeStatus> {
    if p.is_null() {
        return Err(fail(RevodeStatus::NullPointer, format!("{what} is null"), None));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn invalid(e: impl ToString) -> RevodeStatus {
    fail(RevodeStatus::InvalidArgument, e.to_string(), None)
}

fn direction(d: RevodeDirection) -> Direction {
    match d {
        RevodeDirection::Inversion => Direction::Inversion,
        RevodeDirection::Sampling => Direction::Sampling,
    }
}

fn build_schedule(s: &RevodeSchedule) -> Result<NoiseSchedule, RevodeStatus> {
    let kind = match s.kind {
        RevodeScheduleKind::LinearBeta => ScheduleKind::LinearBeta { beta_min: s.beta_min, beta_max: s.beta_max },
        RevodeScheduleKind::Cosine => ScheduleKind::Cosine { offset: s.cosine_offset },
    };
    let t_min = (s.t_min > 0.0).then_some(s.t_min);
    NoiseSchedule::new(kind, s.horizon, t_min).map_err(invalid)
}

fn build_grid(schedule: &NoiseSchedule, kind: &SolverKind, g: &RevodeGrid, dir: Direction) -> Result<TimeGrid, RevodeStatus> {
    let variable = match g.variable {
        RevodeVariable::SolverDefault => kind.default_grid_variable(),
        RevodeVariable::T => Variable::T,
        RevodeVariable::Lambda => Variable::Lambda,
        RevodeVariable::Ratio => Variable::Ratio,
    };
    TimeGrid::build(schedule, variable, g.steps, g.strength, dir).map_err(invalid)
}

unsafe fn parse_formulation(p: *const c_char) -> Result<Option<OdeFormulation>, RevodeStatus> {
    if p.is_null() {
        return Ok(None);
    }
    let name = str_arg(p, "formulation")?;
    OdeFormulation::parse(name)
        .map(Some)
        .ok_or_else(|| invalid(format!("unknown formulation `{name}`")))
}

/// Predictor for one pass: plain conditional when `guidance_scale == 1`,
/// classifier-free guidance against the `null` condition otherwise.
struct PassField<'a> {
    model: &'a FieldModel,
    condition: &'a str,
    guidance: Option<GuidanceConfig>,
    phase: Direction,
}

impl<'a> PassField<'a> {
    fn new(field: &'a RevodeField, condition: &'a str, scale: f64, phase: Direction) -> Result<Self, RevodeStatus> {
        let guidance = if scale == 1.0 {
            field.model.condition(condition).map_err(|e| fail(RevodeStatus::Field, e.to_string(), None))?;
            None
        } else {
            let g = GuidanceConfig::plain(scale, condition);
            g.validate(&field.model).map_err(invalid)?;
            Some(g)
        };
        Ok(PassField { model: &field.model, condition, guidance, phase })
    }
}

impl NoisePredictor for PassField<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn predict(&self, x: &[f64], level: &NoiseLevel, out: &mut [f64]) -> Result<(), FieldError> {
        match &self.guidance {
            None => Conditioned { model: self.model, condition: self.condition }.predict(x, level, out),
            Some(g) => Guided { model: self.model, guidance: g, phase: self.phase }.predict(x, level, out),
        }
    }
}

/// Fills `out` with the standard linear-β schedule (β from 0.1 to 20, T = 1).
///
/// # Safety
/// `out` must be null or point to writable memory for one `RevodeSchedule`.
#[no_mangle]
pub unsafe extern "C" fn revode_schedule_default(out: *mut RevodeSchedule) -> RevodeStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(RevodeStatus::NullPointer, "out is null", None));
        }
        *out = RevodeSchedule {
            kind: RevodeScheduleKind::LinearBeta,
            beta_min: 0.1,
            beta_max: 20.0,
            cosine_offset: 0.008,
            horizon: 1.0,
            t_min: 0.0,
        };
        Ok(())
    })
}

/// Wraps a host callback as a noise predictor of dimension `dim` that
/// accepts the `n_conditions` condition ids in `conditions`.
///
/// # Safety
/// `conditions` must point to `n_conditions` NUL-terminated strings and `out`
/// to writable memory for one pointer. `callback` must be safe to call with
/// `user_data` for as long as the returned handle lives.
#[no_mangle]
pub unsafe extern "C" fn revode_field_callback_new(
    dim: usize,
    callback: RevodeEpsCallback,
    user_data: *mut c_void,
    conditions: *const *const c_char,
    n_conditions: usize,
    out: *mut *mut RevodeField,
) -> RevodeStatus {
    guard(|| {
        if out.is_null() || conditions.is_null() {
            return Err(fail(RevodeStatus::NullPointer, "out or conditions is null", None));
        }
        let Some(cb) = callback else {
            return Err(fail(RevodeStatus::NullPointer, "callback is null", None));
        };
        let mut ids = Vec::with_capacity(n_conditions);
        for k in 0..n_conditions {
            ids.push(str_arg(*conditions.add(k), "condition id")?.to_string());
        }
        if ids.is_empty() {
            return Err(invalid("at least one condition id is required"));
        }
        let calls = Arc::new(AtomicUsize::new(0));
        let counter = calls.clone();
        let user = UserData(user_data);
        let f = move |x: &[f64], level: &NoiseLevel, condition: &str, eps: &mut [f64]| -> Result<(), String> {
            counter.fetch_add(1, Ordering::Relaxed);
            let cond = std::ffi::CString::new(condition).map_err(|e| e.to_string())?;
            let user = &user;
            let code = unsafe { cb(user.0, x.as_ptr(), x.len(), level.t, level.lambda, level.alpha, level.sigma, cond.as_ptr(), eps.as_mut_ptr()) };
            if code == 0 {
                Ok(())
            } else {
                Err(format!("host callback returned {code}"))
            }
        };
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let model = FieldModel::callback(dim, &refs, Arc::new(f)).map_err(invalid)?;
        *out = Box::into_raw(Box::new(RevodeField { model, calls }));
        Ok(())
    })
}

/// Analytic Gaussian predictor: data `N(means[k], spread² I)` under condition
/// `ids[k]`, each mean of length `dim`.
///
/// # Safety
/// `ids` must point to `n_conditions` strings, `means` to `n_conditions · dim`
/// doubles and `out` to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn revode_field_gaussian_new(
    dim: usize,
    ids: *const *const c_char,
    means: *const f64,
    n_conditions: usize,
    spread: f64,
    out: *mut *mut RevodeField,
) -> RevodeStatus {
    guard(|| {
        if out.is_null() || ids.is_null() {
            return Err(fail(RevodeStatus::NullPointer, "out or ids is null", None));
        }
        let means = slice_arg(means, n_conditions * dim, "means")?;
        let mut conditions = Vec::with_capacity(n_conditions);
        for k in 0..n_conditions {
            let id = str_arg(*ids.add(k), "condition id")?;
            conditions.push(Condition::gaussian(id, means[k * dim..(k + 1) * dim].to_vec(), spread));
        }
        let model = FieldModel::new(FieldKind::Gaussian, dim, conditions).map_err(invalid)?;
        *out = Box::into_raw(Box::new(RevodeField { model, calls: Arc::new(AtomicUsize::new(0)) }));
        Ok(())
    })
}

/// Host callbacks made through this handle so far (0 for analytic fields).
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn revode_field_callback_count(field: *const RevodeField) -> usize {
    field.as_ref().map_or(0, |f| f.calls.load(Ordering::Relaxed))
}

/// # Safety
/// `field` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn revode_field_free(field: *mut RevodeField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Integrates `x0` across a fresh grid in `direction` with solver `solver`
/// (`name` or `name:key=value,...`). Any output pointer may be null.
/// `grid_values_out` receives `steps + 1` node values and `states_out`
/// `(steps + 1) · dim` states, in the order visited; on failure the entries
/// reached before the error are written.
///
/// # Safety
/// Strings must be NUL-terminated, `x0` must hold `dim` doubles and every
/// non-null output must be large enough for what is written to it.
#[no_mangle]
pub unsafe extern "C" fn revode_run(
    solver: *const c_char,
    formulation: *const c_char,
    schedule: *const RevodeSchedule,
    grid: *const RevodeGrid,
    dir: RevodeDirection,
    field: *const RevodeField,
    condition: *const c_char,
    guidance_scale: f64,
    x0: *const f64,
    dim: usize,
    grid_values_out: *mut f64,
    states_out: *mut f64,
    terminal_out: *mut f64,
    nfe_out: *mut usize,
) -> RevodeStatus {
    guard(|| {
        let (Some(schedule), Some(grid), Some(field)) = (schedule.as_ref(), grid.as_ref(), field.as_ref()) else {
            return Err(fail(RevodeStatus::NullPointer, "schedule, grid or field is null", None));
        };
        let kind = parse_solver(str_arg(solver, "solver")?).map_err(invalid)?;
        let formulation = parse_formulation(formulation)?;
        let condition = str_arg(condition, "condition")?;
        let x0 = slice_arg(x0, dim, "x0")?;
        let dir = direction(dir);
        let sched = build_schedule(schedule)?;
        let time_grid = build_grid(&sched, &kind, grid, dir)?;
        let predictor = PassField::new(field, condition, guidance_scale, dir)?;
        let mut session = SolverSession::new(kind, formulation, &sched, &time_grid, x0).map_err(|e| step_error(&e))?;
        let traj = session.integrate(&predictor, dir, true);
        for (k, p) in traj.points.iter().take(grid.steps + 1).enumerate() {
            if !grid_values_out.is_null() {
                *grid_values_out.add(k) = p.grid_value;
            }
            if !states_out.is_null() {
                std::ptr::copy_nonoverlapping(p.state.as_ptr(), states_out.add(k * dim), dim);
            }
        }
        if !terminal_out.is_null() {
            std::ptr::copy_nonoverlapping(traj.terminal.as_ptr(), terminal_out, dim);
        }
        if !nfe_out.is_null() {
            *nfe_out = traj.nfe;
        }
        match &traj.error {
            Some(e) => Err(step_error(e)),
            None => Ok(()),
        }
    })
}

/// Creates a session positioned at the start of its grid for `dir`.
///
/// # Safety
/// As for [`revode_run`]; `out` must point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn revode_session_new(
    solver: *const c_char,
    formulation: *const c_char,
    schedule: *const RevodeSchedule,
    grid: *const RevodeGrid,
    dir: RevodeDirection,
    x0: *const f64,
    dim: usize,
    out: *mut *mut RevodeSession,
) -> RevodeStatus {
    guard(|| {
        let (Some(schedule), Some(grid)) = (schedule.as_ref(), grid.as_ref()) else {
            return Err(fail(RevodeStatus::NullPointer, "schedule or grid is null", None));
        };
        if out.is_null() {
            return Err(fail(RevodeStatus::NullPointer, "out is null", None));
        }
        let kind = parse_solver(str_arg(solver, "solver")?).map_err(invalid)?;
        let formulation = parse_formulation(formulation)?;
        let x0 = slice_arg(x0, dim, "x0")?;
        let dir = direction(dir);
        let sched = build_schedule(schedule)?;
        let time_grid = build_grid(&sched, &kind, grid, dir)?;
        let inner = SolverSession::new(kind, formulation, &sched, &time_grid, x0).map_err(|e| step_error(&e))?;
        *out = Box::into_raw(Box::new(RevodeSession { inner }));
        Ok(())
    })
}

/// Takes one step in `dir`; either direction may follow the other.
///
/// # Safety
/// `session` and `field` must be live handles and `condition` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn revode_session_step(
    session: *mut RevodeSession,
    field: *const RevodeField,
    condition: *const c_char,
    guidance_scale: f64,
    dir: RevodeDirection,
) -> RevodeStatus {
    guard(|| {
        let (Some(session), Some(field)) = (session.as_mut(), field.as_ref()) else {
            return Err(fail(RevodeStatus::NullPointer, "session or field is null", None));
        };
        let dir = direction(dir);
        let predictor = PassField::new(field, str_arg(condition, "condition")?, guidance_scale, dir)?;
        session.inner.step(&predictor, dir).map(|_| ()).map_err(|e| step_error(&e))
    })
}

/// Copies the current primary state (`dim` doubles) into `out`.
///
/// # Safety
/// `session` must be a live handle and `out` writable for `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn revode_session_state(session: *const RevodeSession, out: *mut f64, dim: usize) -> RevodeStatus {
    guard(|| {
        let Some(session) = session.as_ref() else {
            return Err(fail(RevodeStatus::NullPointer, "session is null", None));
        };
        if out.is_null() {
            return Err(fail(RevodeStatus::NullPointer, "out is null", None));
        }
        let x = session.inner.state();
        if x.len() != dim {
            return Err(invalid(format!("state has dimension {}, not {dim}", x.len())));
        }
        std::ptr::copy_nonoverlapping(x.as_ptr(), out, dim);
        Ok(())
    })
}

/// Current grid index (0 = low-noise end), or `SIZE_MAX` for a null handle.
///
/// # Safety
/// `session` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn revode_session_position(session: *const RevodeSession) -> usize {
    session.as_ref().map_or(usize::MAX, |s| s.inner.position())
}

/// Predictor evaluations made by the session so far.
///
/// # Safety
/// `session` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn revode_session_nfe(session: *const RevodeSession) -> usize {
    session.as_ref().map_or(0, |s| s.inner.nfe())
}

/// # Safety
/// `session` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn revode_session_free(session: *mut RevodeSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn revode_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow().message.clone();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Solver step (0-based count of completed steps) at which the last error
/// occurred, or -1 if it was not raised inside a step.
#[no_mangle]
pub extern "C" fn revode_last_error_step() -> i64 {
    LAST_ERROR.with(|e| e.borrow().step.map_or(-1, |s| s as i64))
}
