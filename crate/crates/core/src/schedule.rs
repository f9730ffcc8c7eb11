//! Variance-preserving noise schedules and discretisation grids.
//!
//! Every schedule is described by `log α_t`; `σ_t` is always derived as
//! `sqrt(1 − α_t²)` so that `α² + σ² = 1` holds by construction. Three time
//! variables are supported: diffusion time `t`, the half-logSNR
//! `λ = log(α/σ)` and the noise-to-signal ratio `σ/α = e^{−λ}` (the `τ` of Rex
//! and the `u` of BELM).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule parameters: {0}")]
    InvalidParams(String),
    #[error("{variable} value {value} is outside the schedule domain [{lo}, {hi}]")]
    OutOfRange {
        variable: Variable,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("root-find did not converge after {iterations} iterations (bracket width {width:e})")]
    NoConvergence { iterations: usize, width: f64 },
    #[error("degenerate grid interval: upper end {hi} must exceed t_min {lo}")]
    DegenerateInterval { lo: f64, hi: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

/// Integration / discretisation variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variable {
    T,
    Lambda,
    Ratio,
}

impl Variable {
    pub const ALL: [Variable; 3] = [Variable::T, Variable::Lambda, Variable::Ratio];

    pub fn name(self) -> &'static str {
        match self {
            Variable::T => "t",
            Variable::Lambda => "lambda",
            Variable::Ratio => "ratio",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "t" => Some(Variable::T),
            "lambda" | "λ" => Some(Variable::Lambda),
            "ratio" | "sigma" | "tau" | "u" => Some(Variable::Ratio),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    /// `log α_t = −¼ t² (β_max − β_min) − ½ t β_min` (with `t` in units of the horizon).
    LinearBeta { beta_min: f64, beta_max: f64 },
    /// Improved-DDPM cosine schedule with offset `s` on unit time, truncated at
    /// a horizon `T < 1`.
    Cosine { offset: f64 },
    /// Piecewise-linear `log α` through `(t, log α)` knots.
    DiscreteInterpolated { knots: Vec<(f64, f64)> },
}

/// Everything the solvers need to know about one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: f64,
    pub lambda: f64,
    pub ratio: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl NoiseLevel {
    pub fn value(&self, variable: Variable) -> f64 {
        match variable {
            Variable::T => self.t,
            Variable::Lambda => self.lambda,
            Variable::Ratio => self.ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    horizon: f64,
    t_min: f64,
}

pub const DEFAULT_T_MIN_FRACTION: f64 = 1e-3;
const BISECTION_TOL: f64 = 1e-12;
const BISECTION_MAX_ITERS: usize = 200;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl NoiseSchedule {
    pub fn linear_beta(beta_min: f64, beta_max: f64, horizon: f64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleKind::LinearBeta { beta_min, beta_max }, horizon, None)
    }

    /// The common continuous-time default `(β_min, β_max) = (0.1, 20)`, `T = 1`.
    pub fn standard() -> Self {
        Self::linear_beta(0.1, 20.0, 1.0).expect("standard schedule parameters are valid")
    }

    pub fn cosine(offset: f64, horizon: f64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleKind::Cosine { offset }, horizon, None)
    }

    /// The horizon is the last knot's time.
    pub fn discrete(knots: Vec<(f64, f64)>) -> Result<Self, ScheduleError> {
        let horizon = knots.last().map(|k| k.0).unwrap_or(0.0);
        Self::new(ScheduleKind::DiscreteInterpolated { knots }, horizon, None)
    }

    /// `t_min` defaults to `1e-3 · T`.
    pub fn new(kind: ScheduleKind, horizon: f64, t_min: Option<f64>) -> Result<Self, ScheduleError> {
        let bad = |m: &str| Err(ScheduleError::InvalidParams(m.to_string()));
        if !(horizon.is_finite() && horizon > 0.0) {
            return bad("horizon T must be positive and finite");
        }
        match &kind {
            ScheduleKind::LinearBeta { beta_min, beta_max } => {
                if !(beta_min.is_finite() && beta_max.is_finite()) || *beta_min < 0.0 {
                    return bad("beta_min must be non-negative and finite");
                }
                if beta_min >= beta_max {
                    return bad("beta_min must be smaller than beta_max");
                }
            }
            ScheduleKind::Cosine { offset } => {
                if !(offset.is_finite() && *offset >= 0.0) {
                    return bad("cosine offset must be non-negative");
                }
                // The cosine formula lives on unit time; α vanishes at t = 1.
                if horizon >= 1.0 {
                    return bad("cosine horizon must be below 1 (alpha vanishes at t = 1)");
                }
            }
            ScheduleKind::DiscreteInterpolated { knots } => {
                if knots.len() < 2 {
                    return bad("discrete schedule needs at least two knots");
                }
                if knots[0].0 < 0.0 || knots[0].1 > 0.0 {
                    return bad("first knot must have t >= 0 and log alpha <= 0");
                }
                for w in knots.windows(2) {
                    if !(w[1].0 > w[0].0) {
                        return bad("knot times must be strictly increasing");
                    }
                    if !(w[1].1 < w[0].1) {
                        return bad("knot log alpha values must be strictly decreasing");
                    }
                }
                if knots.iter().any(|k| !k.0.is_finite() || !k.1.is_finite()) {
                    return bad("knots must be finite");
                }
                if (knots.last().unwrap().0 - horizon).abs() > 1e-12 * horizon {
                    return bad("discrete horizon must equal the last knot time");
                }
            }
        }
        let t_min = t_min.unwrap_or(DEFAULT_T_MIN_FRACTION * horizon);
        if !(t_min > 0.0 && t_min < horizon) {
            return bad("t_min must lie in (0, T)");
        }
        let schedule = NoiseSchedule { kind, horizon, t_min };
        if let ScheduleKind::DiscreteInterpolated { knots } = &schedule.kind {
            if t_min < knots[0].0 {
                return bad("t_min lies before the first knot");
            }
        }
        if !(schedule.log_alpha(horizon) < 0.0 && schedule.log_alpha(horizon).is_finite()) {
            return bad("alpha_T must lie strictly inside (0, 1)");
        }
        Ok(schedule)
    }

    pub fn with_t_min(mut self, t_min: f64) -> Result<Self, ScheduleError> {
        if !(t_min > 0.0 && t_min < self.horizon) {
            return Err(ScheduleError::InvalidParams("t_min must lie in (0, T)".into()));
        }
        self.t_min = t_min;
        Ok(self)
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn log_alpha(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::LinearBeta { beta_min, beta_max } => {
                let s = t / self.horizon;
                -0.25 * s * s * (beta_max - beta_min) - 0.5 * s * beta_min
            }
            ScheduleKind::Cosine { offset } => {
                let u = self.cosine_angle(t, *offset);
                let u0 = self.cosine_angle(0.0, *offset);
                u.cos().ln() - u0.cos().ln()
            }
            ScheduleKind::DiscreteInterpolated { knots } => {
                let (i, j) = segment(knots, t, |k| k.0);
                let (t0, l0) = knots[i];
                let (t1, l1) = knots[j];
                l0 + (t - t0) * (l1 - l0) / (t1 - t0)
            }
        }
    }

    fn cosine_angle(&self, t: f64, offset: f64) -> f64 {
        std::f64::consts::FRAC_PI_2 * (t + offset) / (1.0 + offset)
    }

    pub fn dlog_alpha_dt(&self, t: f64) -> f64 {
        match &self.kind {
            ScheduleKind::LinearBeta { beta_min, beta_max } => {
                let s = t / self.horizon;
                (-0.5 * s * (beta_max - beta_min) - 0.5 * beta_min) / self.horizon
            }
            ScheduleKind::Cosine { offset } => {
                let u = self.cosine_angle(t, *offset);
                -u.tan() * std::f64::consts::FRAC_PI_2 / (1.0 + offset)
            }
            ScheduleKind::DiscreteInterpolated { knots } => {
                let (i, j) = segment(knots, t, |k| k.0);
                (knots[j].1 - knots[i].1) / (knots[j].0 - knots[i].0)
            }
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.log_alpha(t).exp()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        log_sigma_from_log_alpha(self.log_alpha(t)).exp()
    }

    pub fn lambda(&self, t: f64) -> f64 {
        let la = self.log_alpha(t);
        la - log_sigma_from_log_alpha(la)
    }

    pub fn ratio(&self, t: f64) -> f64 {
        (-self.lambda(t)).exp()
    }

    /// Closed-form inverse of `t ↦ log α_t`.
    pub fn t_from_log_alpha(&self, log_alpha: f64) -> f64 {
        match &self.kind {
            ScheduleKind::LinearBeta { beta_min, beta_max } => {
                let a = 0.25 * (beta_max - beta_min);
                let b = 0.5 * beta_min;
                let l = (-log_alpha).max(0.0);
                let s = 2.0 * l / (b + (b * b + 4.0 * a * l).sqrt());
                s * self.horizon
            }
            ScheduleKind::Cosine { offset } => {
                let u0 = self.cosine_angle(0.0, *offset);
                let u = (log_alpha.exp() * u0.cos()).clamp(-1.0, 1.0).acos();
                u * (1.0 + offset) / std::f64::consts::FRAC_PI_2 - offset
            }
            ScheduleKind::DiscreteInterpolated { knots } => {
                // log α decreases, so search on the negated value.
                let (i, j) = segment(knots, -log_alpha, |k| -k.1);
                let (t0, l0) = knots[i];
                let (t1, l1) = knots[j];
                t0 + (log_alpha - l0) * (t1 - t0) / (l1 - l0)
            }
        }
    }

    /// Bisection inverse of `t ↦ λ_t` on `(0, T]`, to `1e-12` in `t`.
    pub fn t_from_lambda_bisect(&self, lambda: f64) -> Result<f64, ScheduleError> {
        let (mut lo, mut hi) = match &self.kind {
            ScheduleKind::DiscreteInterpolated { knots } => (knots[0].0, self.horizon),
            _ => (0.0, self.horizon),
        };
        let lam_hi = self.lambda(hi);
        if lambda < lam_hi {
            return Err(ScheduleError::OutOfRange {
                variable: Variable::Lambda,
                value: lambda,
                lo: lam_hi,
                hi: f64::INFINITY,
            });
        }
        for _ in 0..BISECTION_MAX_ITERS {
            let mid = 0.5 * (lo + hi);
            if self.lambda(mid) > lambda {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= BISECTION_TOL * self.horizon.max(1.0) {
                return Ok(0.5 * (lo + hi));
            }
        }
        Err(ScheduleError::NoConvergence {
            iterations: BISECTION_MAX_ITERS,
            width: hi - lo,
        })
    }

    pub fn level_at_t(&self, t: f64) -> NoiseLevel {
        let la = self.log_alpha(t);
        let ls = log_sigma_from_log_alpha(la);
        NoiseLevel {
            t,
            lambda: la - ls,
            ratio: (ls - la).exp(),
            alpha: la.exp(),
            sigma: ls.exp(),
        }
    }

    pub fn level_at_lambda(&self, lambda: f64) -> NoiseLevel {
        let la = -0.5 * softplus(-2.0 * lambda);
        let ls = -0.5 * softplus(2.0 * lambda);
        NoiseLevel {
            t: self.t_from_log_alpha(la),
            lambda,
            ratio: (-lambda).exp(),
            alpha: la.exp(),
            sigma: ls.exp(),
        }
    }

    pub fn level_at_ratio(&self, ratio: f64) -> NoiseLevel {
        NoiseLevel {
            ratio,
            ..self.level_at_lambda(-ratio.ln())
        }
    }

    /// Noise level at `value` in `variable`. No domain check: stage points of
    /// a Runge–Kutta step may sit marginally outside the grid.
    pub fn level(&self, variable: Variable, value: f64) -> NoiseLevel {
        match variable {
            Variable::T => self.level_at_t(value),
            Variable::Lambda => self.level_at_lambda(value),
            Variable::Ratio => self.level_at_ratio(value),
        }
    }

    /// Image of `(0, T]` under `variable`, as a closed `[lo, hi]` interval
    /// (the open end at `t → 0` is reported as the limit value).
    pub fn domain(&self, variable: Variable) -> (f64, f64) {
        let t0 = match &self.kind {
            ScheduleKind::DiscreteInterpolated { knots } => knots[0].0,
            _ => 0.0,
        };
        match variable {
            Variable::T => (t0, self.horizon),
            Variable::Lambda => (self.lambda(self.horizon), f64::INFINITY),
            Variable::Ratio => (0.0, self.ratio(self.horizon)),
        }
    }

    /// Convert `value` between time variables.
    pub fn reparametrize(&self, value: f64, from: Variable, to: Variable) -> Result<f64, ScheduleError> {
        let (lo, hi) = self.domain(from);
        let slack = 1e-12 * lo.abs().max(1.0);
        let inside = value.is_finite()
            && match from {
                Variable::T | Variable::Ratio => value > lo && value <= hi * (1.0 + 1e-12),
                Variable::Lambda => value >= lo - slack,
            };
        if !inside {
            return Err(ScheduleError::OutOfRange {
                variable: from,
                value,
                lo,
                hi,
            });
        }
        if from == to {
            return Ok(value);
        }
        let level = self.level(from, value);
        Ok(level.value(to))
    }
}

fn log_sigma_from_log_alpha(log_alpha: f64) -> f64 {
    0.5 * (-(2.0 * log_alpha).exp_m1()).ln()
}

/// Indices of the knot segment bracketing `x` (extrapolating with the end
/// segments), where `key` is increasing along the knot list.
fn segment<F: Fn(&(f64, f64)) -> f64>(knots: &[(f64, f64)], x: f64, key: F) -> (usize, usize) {
    let n = knots.len();
    let p = knots.partition_point(|k| key(k) <= x);
    let j = p.clamp(1, n - 1);
    (j - 1, j)
}

/// Which way a pass walks the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Data towards noise (index 0 → N).
    Inversion,
    /// Noise towards data (index N → 0).
    Sampling,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::Inversion => Direction::Sampling,
            Direction::Sampling => Direction::Inversion,
        }
    }
}

/// Discretisation grid. Nodes are stored in canonical order: index 0 is the
/// low-noise end (`t_min`), index N the high-noise end (`s·T`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    variable: Variable,
    nodes: Vec<f64>,
    strength: f64,
    direction: Direction,
}

impl TimeGrid {
    /// Uniform grid in `variable` between the images of `t_min` and `strength · T`.
    pub fn build(
        schedule: &NoiseSchedule,
        variable: Variable,
        steps: usize,
        strength: f64,
        direction: Direction,
    ) -> Result<Self, ScheduleError> {
        if steps < 1 {
            return Err(ScheduleError::InvalidGrid("N must be at least 1".into()));
        }
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(ScheduleError::InvalidGrid("strength must lie in (0, 1]".into()));
        }
        let t_lo = schedule.t_min();
        let t_hi = strength * schedule.horizon();
        if t_hi <= t_lo {
            return Err(ScheduleError::DegenerateInterval { lo: t_lo, hi: t_hi });
        }
        let lo = schedule.level_at_t(t_lo).value(variable);
        let hi = schedule.level_at_t(t_hi).value(variable);
        let step = (hi - lo) / steps as f64;
        let mut nodes: Vec<f64> = (0..=steps).map(|i| lo + i as f64 * step).collect();
        nodes[steps] = hi;
        Ok(TimeGrid {
            variable,
            nodes,
            strength,
            direction,
        })
    }

    /// Grid from explicit nodes in canonical order.
    pub fn from_nodes(variable: Variable, nodes: Vec<f64>, direction: Direction) -> Result<Self, ScheduleError> {
        if nodes.len() < 2 {
            return Err(ScheduleError::InvalidGrid("a grid needs at least two nodes".into()));
        }
        if nodes.iter().any(|v| !v.is_finite()) {
            return Err(ScheduleError::InvalidGrid("grid nodes must be finite".into()));
        }
        let increasing = nodes.windows(2).all(|w| w[1] > w[0]);
        let decreasing = nodes.windows(2).all(|w| w[1] < w[0]);
        let ok = match variable {
            Variable::Lambda => decreasing,
            Variable::T | Variable::Ratio => increasing,
        };
        if !ok {
            return Err(ScheduleError::InvalidGrid(format!(
                "nodes must run from low to high noise ({} {})",
                variable,
                if variable == Variable::Lambda { "decreasing" } else { "increasing" }
            )));
        }
        Ok(TimeGrid {
            variable,
            nodes,
            strength: 1.0,
            direction,
        })
    }

    pub fn variable(&self) -> Variable {
        self.variable
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    /// Canonical-order nodes (low noise first).
    pub fn canonical_nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Nodes in traversal order for the grid's direction.
    pub fn nodes(&self) -> Vec<f64> {
        match self.direction {
            Direction::Inversion => self.nodes.clone(),
            Direction::Sampling => self.nodes.iter().rev().copied().collect(),
        }
    }

    pub fn node(&self, index: usize) -> f64 {
        self.nodes[index]
    }

    pub fn levels(&self, schedule: &NoiseSchedule) -> Vec<NoiseLevel> {
        self.nodes.iter().map(|&v| schedule.level(self.variable, v)).collect()
    }

    /// Smallest absolute step in the grid variable.
    pub fn min_step(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_step(&self) -> f64 {
        self.nodes.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schedules() -> Vec<NoiseSchedule> {
        vec![
            NoiseSchedule::standard(),
            NoiseSchedule::cosine(0.008, 0.9946).unwrap(),
            NoiseSchedule::discrete(vec![(0.0, 0.0), (0.3, -0.2), (0.7, -1.5), (1.0, -4.0)]).unwrap(),
        ]
    }

    #[test]
    fn alpha_sigma_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for s in schedules() {
            for _ in 0..1000 {
                let t = rng.random_range(1e-6..1.0) * s.horizon();
                let (a, sg) = (s.alpha(t), s.sigma(t));
                assert!((a * a + sg * sg - 1.0).abs() < 1e-12, "{t}");
                let lv = s.level_at_t(t);
                assert!((lv.alpha * lv.alpha + lv.sigma * lv.sigma - 1.0).abs() < 1e-12);
                let lv = s.level_at_lambda(lv.lambda);
                assert!((lv.alpha * lv.alpha + lv.sigma * lv.sigma - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monotone_alpha_sigma_lambda() {
        for s in schedules() {
            let ts: Vec<f64> = (1..=200).map(|i| i as f64 / 200.0 * s.horizon()).collect();
            for w in ts.windows(2) {
                assert!(s.alpha(w[1]) < s.alpha(w[0]));
                assert!(s.sigma(w[1]) > s.sigma(w[0]));
                assert!(s.lambda(w[1]) < s.lambda(w[0]));
                assert!(s.lambda(w[1]).is_finite());
            }
        }
    }

    #[test]
    fn linear_beta_endpoint_limits() {
        let s = NoiseSchedule::standard();
        let t = 1e-9;
        assert!((s.alpha(t) - 1.0).abs() < 1e-9);
        assert!(s.sigma(t) < 1e-4);
        assert!(s.lambda(t) > 9.0);
        let expected = (-0.25 * 0.25 * 19.9 - 0.5 * 0.5 * 0.1f64).exp();
        assert!((s.alpha(0.5) - expected).abs() < 1e-15);
    }

    #[test]
    fn discrete_midpoint_interpolation() {
        let s = NoiseSchedule::discrete(vec![(0.0, 0.0), (1.0, 0.5f64.ln())]).unwrap();
        assert!((s.log_alpha(0.5) - 0.5 * 0.5f64.ln()).abs() < 1e-15);
        assert!((s.alpha(0.5) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(NoiseSchedule::linear_beta(20.0, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear_beta(0.1, 20.0, 0.0).is_err());
        assert!(NoiseSchedule::discrete(vec![(0.0, 0.0), (1.0, 0.3)]).is_err());
        assert!(NoiseSchedule::discrete(vec![(0.5, -0.1), (0.2, -1.0)]).is_err());
        assert!(NoiseSchedule::discrete(vec![(0.0, 0.0)]).is_err());
    }

    #[test]
    fn lambda_zero_is_unit_ratio() {
        let s = NoiseSchedule::standard();
        let lv = s.level_at_lambda(0.0);
        assert_eq!(lv.ratio, 1.0);
        assert!((lv.alpha - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((lv.sigma - 0.5f64.sqrt()).abs() < 1e-15);
        let r = s.reparametrize(0.0, Variable::Lambda, Variable::Ratio).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn lambda_matches_direct_evaluation() {
        let s = NoiseSchedule::standard();
        let t = 0.5;
        let la: f64 = -0.25 * t * t * 19.9 - 0.5 * t * 0.1;
        let sigma = (1.0 - (2.0 * la).exp()).sqrt();
        let direct = la - sigma.ln();
        let got = s.reparametrize(t, Variable::T, Variable::Lambda).unwrap();
        assert!((got - direct).abs() < 1e-13, "{got} vs {direct}");
    }

    #[test]
    fn all_pairs_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in schedules() {
            for _ in 0..100 {
                let t = rng.random_range(0.002..1.0) * s.horizon();
                for from in Variable::ALL {
                    let v = s.level_at_t(t).value(from);
                    for to in Variable::ALL {
                        let w = s.reparametrize(v, from, to).unwrap();
                        let back = s.reparametrize(w, to, from).unwrap();
                        let rel = (back - v).abs() / v.abs().max(1e-300);
                        assert!(rel < 1e-10, "{from}->{to}: {v} vs {back}");
                    }
                }
            }
        }
    }

    #[test]
    fn bisection_agrees_with_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in schedules() {
            for _ in 0..100 {
                let t = rng.random_range(0.01..1.0) * s.horizon();
                let lam = s.lambda(t);
                let tb = s.t_from_lambda_bisect(lam).unwrap();
                let tc = s.level_at_lambda(lam).t;
                assert!((tb - t).abs() < 1e-10, "{tb} {t}");
                assert!((tc - t).abs() < 1e-10, "{tc} {t}");
            }
        }
    }

    #[test]
    fn reparametrize_rejects_out_of_range() {
        let s = NoiseSchedule::standard();
        assert!(s.reparametrize(1.5, Variable::T, Variable::Lambda).is_err());
        assert!(s.reparametrize(-1.0, Variable::T, Variable::Lambda).is_err());
        assert!(s.reparametrize(-40.0, Variable::Lambda, Variable::T).is_err());
        assert!(s.reparametrize(1e6, Variable::Ratio, Variable::T).is_err());
    }

    #[test]
    fn t_grid_arithmetic_spacing() {
        let s = NoiseSchedule::standard();
        let g = TimeGrid::build(&s, Variable::T, 4, 1.0, Direction::Inversion).unwrap();
        let expected = [0.001, 0.25075, 0.5005, 0.75025, 1.0];
        for (a, b) in g.nodes().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{a} {b}");
        }
        let spacing: Vec<f64> = g.canonical_nodes().windows(2).map(|w| w[1] - w[0]).collect();
        for w in spacing.windows(2) {
            assert!((w[1] - w[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn lambda_grid_midpoint_is_mean() {
        let s = NoiseSchedule::standard();
        let g = TimeGrid::build(&s, Variable::Lambda, 2, 1.0, Direction::Sampling).unwrap();
        let n = g.canonical_nodes();
        assert!((n[1] - 0.5 * (n[0] + n[2])).abs() < 1e-12);
    }

    #[test]
    fn t_grid_is_non_uniform_in_lambda() {
        let s = NoiseSchedule::standard();
        let g = TimeGrid::build(&s, Variable::T, 16, 1.0, Direction::Inversion).unwrap();
        let lams: Vec<f64> = g.levels(&s).iter().map(|l| l.lambda).collect();
        let steps: Vec<f64> = lams.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let max = steps.iter().cloned().fold(0.0, f64::max);
        let min = steps.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min > 1.5, "{max} {min}");
    }

    #[test]
    fn grid_monotone_per_direction() {
        let s = NoiseSchedule::standard();
        for var in Variable::ALL {
            for dir in [Direction::Inversion, Direction::Sampling] {
                let g = TimeGrid::build(&s, var, 9, 0.8, dir).unwrap();
                let nodes = g.nodes();
                let inc = nodes.windows(2).all(|w| w[1] > w[0]);
                let dec = nodes.windows(2).all(|w| w[1] < w[0]);
                assert!(inc || dec);
                // Mapped to t, inversion always climbs.
                let ts: Vec<f64> = nodes.iter().map(|&v| s.level(var, v).t).collect();
                let climbs = ts.windows(2).all(|w| w[1] > w[0]);
                assert_eq!(climbs, dir == Direction::Inversion, "{var} {dir:?}");
                // Round trip through t.
                for &v in &nodes {
                    let t = s.reparametrize(v, var, Variable::T).unwrap();
                    let back = s.reparametrize(t, Variable::T, var).unwrap();
                    assert!((back - v).abs() <= 1e-10 * v.abs().max(1e-12));
                }
            }
        }
    }

    #[test]
    fn grid_rejects_degenerate_inputs() {
        let s = NoiseSchedule::standard();
        assert!(TimeGrid::build(&s, Variable::T, 0, 1.0, Direction::Inversion).is_err());
        assert!(TimeGrid::build(&s, Variable::T, 4, 0.0, Direction::Inversion).is_err());
        assert!(matches!(
            TimeGrid::build(&s, Variable::T, 4, 5e-4, Direction::Inversion),
            Err(ScheduleError::DegenerateInterval { .. })
        ));
        assert!(TimeGrid::from_nodes(Variable::T, vec![0.1, 0.1], Direction::Inversion).is_err());
        assert!(TimeGrid::from_nodes(Variable::Lambda, vec![0.1, 0.2], Direction::Inversion).is_err());
    }
}
