//! Conditioned noise-prediction fields.
//!
//! Analytic fields are exact `ε`-predictors for Gaussian (or Gaussian
//! mixture) data pushed through the VP marginals, so every probability-flow
//! trajectory they generate is known in closed form or to any accuracy.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::schedule::{Direction, NoiseLevel};

/// Reserved id for the unconditional (empty prompt) condition.
pub const NULL_CONDITION: &str = "null";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("unknown condition id `{0}`")]
    UnknownCondition(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("callback failed: {0}")]
    Callback(String),
    #[error("guidance mode {0} requires a source condition")]
    MissingSource(&'static str),
    #[error("invalid field model: {0}")]
    InvalidModel(String),
    #[error("invalid guidance: {0}")]
    InvalidGuidance(String),
    #[error("degenerate noise level: {0}")]
    Degenerate(String),
}

/// One Gaussian data component `N(mean, spread² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub id: String,
    pub components: Vec<Component>,
    /// Phase of the oscillatory term of the rough-synthetic field.
    pub phase: f64,
}

impl Condition {
    pub fn gaussian(id: impl Into<String>, mean: Vec<f64>, spread: f64) -> Self {
        Condition {
            id: id.into(),
            components: vec![Component {
                weight: 1.0,
                mean,
                spread,
            }],
            phase: 0.0,
        }
    }

    pub fn mixture(id: impl Into<String>, components: Vec<Component>) -> Self {
        Condition {
            id: id.into(),
            components,
            phase: 0.0,
        }
    }

    /// Condition carrying only an id, for callback fields.
    pub fn label(id: impl Into<String>) -> Self {
        Condition {
            id: id.into(),
            components: Vec::new(),
            phase: 0.0,
        }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }
}

/// Host-supplied noise predictor: `(x, level, condition id, out)`.
pub type CallbackFn = dyn Fn(&[f64], &NoiseLevel, &str, &mut [f64]) -> Result<(), String> + Send + Sync;

#[derive(Clone)]
pub enum FieldKind {
    Gaussian,
    GaussianMixture,
    /// Gaussian base plus `roughness · amplitude · sin(frequency (x_j + λ) + phase_c + j)`.
    /// `roughness = 0` is the smooth baseline.
    RoughSynthetic {
        amplitude: f64,
        frequency: f64,
        roughness: f64,
    },
    Callback(Arc<CallbackFn>),
}

impl fmt::Debug for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::Gaussian => f.write_str("Gaussian"),
            FieldKind::GaussianMixture => f.write_str("GaussianMixture"),
            FieldKind::RoughSynthetic {
                amplitude,
                frequency,
                roughness,
            } => f
                .debug_struct("RoughSynthetic")
                .field("amplitude", amplitude)
                .field("frequency", frequency)
                .field("roughness", roughness)
                .finish(),
            FieldKind::Callback(_) => f.write_str("Callback"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FieldModel {
    kind: FieldKind,
    dim: usize,
    conditions: Vec<Condition>,
}

impl FieldModel {
    pub fn new(kind: FieldKind, dim: usize, conditions: Vec<Condition>) -> Result<Self, FieldError> {
        let bad = |m: String| Err(FieldError::InvalidModel(m));
        if dim == 0 {
            return bad("dimension must be at least 1".into());
        }
        for (i, c) in conditions.iter().enumerate() {
            if conditions[..i].iter().any(|o| o.id == c.id) {
                return bad(format!("duplicate condition id `{}`", c.id));
            }
            if !c.phase.is_finite() {
                return bad(format!("condition `{}` has a non-finite phase", c.id));
            }
            if matches!(kind, FieldKind::Callback(_)) {
                continue;
            }
            match (&kind, c.components.len()) {
                (_, 0) => return bad(format!("condition `{}` has no components", c.id)),
                (FieldKind::Gaussian | FieldKind::RoughSynthetic { .. }, n) if n != 1 => {
                    return bad(format!("condition `{}` must have exactly one component", c.id))
                }
                _ => {}
            }
            for comp in &c.components {
                if comp.mean.len() != dim {
                    return bad(format!("condition `{}` mean has length {} (d = {dim})", c.id, comp.mean.len()));
                }
                if !(comp.spread >= 0.0 && comp.spread.is_finite()) {
                    return bad(format!("condition `{}` spread must be >= 0", c.id));
                }
                if !(comp.weight > 0.0 && comp.weight.is_finite()) {
                    return bad(format!("condition `{}` weights must be positive", c.id));
                }
                if comp.mean.iter().any(|m| !m.is_finite()) {
                    return bad(format!("condition `{}` mean must be finite", c.id));
                }
            }
            let total: f64 = c.components.iter().map(|k| k.weight).sum();
            if (total - 1.0).abs() > 1e-12 {
                return bad(format!("condition `{}` weights sum to {total}, not 1", c.id));
            }
        }
        if let FieldKind::RoughSynthetic {
            amplitude,
            frequency,
            roughness,
        } = kind
        {
            if !(amplitude.is_finite() && frequency.is_finite() && (0.0..=1.0).contains(&roughness)) {
                return bad("rough-synthetic needs finite amplitude/frequency and roughness in [0, 1]".into());
            }
        }
        Ok(FieldModel { kind, dim, conditions })
    }

    pub fn callback(dim: usize, condition_ids: &[&str], f: Arc<CallbackFn>) -> Result<Self, FieldError> {
        let conditions = condition_ids.iter().map(|id| Condition::label(*id)).collect();
        FieldModel::new(FieldKind::Callback(f), dim, conditions)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn condition(&self, id: &str) -> Result<&Condition, FieldError> {
        self.conditions
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| FieldError::UnknownCondition(id.to_string()))
    }

    pub fn has_condition(&self, id: &str) -> bool {
        self.conditions.iter().any(|c| c.id == id)
    }

    /// Same model with a different roughness (rough-synthetic only).
    pub fn with_roughness(&self, roughness: f64) -> Result<Self, FieldError> {
        match self.kind {
            FieldKind::RoughSynthetic { amplitude, frequency, .. } => FieldModel::new(
                FieldKind::RoughSynthetic {
                    amplitude,
                    frequency,
                    roughness,
                },
                self.dim,
                self.conditions.clone(),
            ),
            _ => Err(FieldError::InvalidModel("roughness applies to rough-synthetic fields only".into())),
        }
    }

    pub fn eval_eps(&self, x: &[f64], level: &NoiseLevel, condition: &str) -> Result<Vec<f64>, FieldError> {
        let mut out = vec![0.0; self.dim];
        self.eval_eps_into(x, level, condition, &mut out)?;
        Ok(out)
    }

    pub fn eval_eps_into(&self, x: &[f64], level: &NoiseLevel, condition: &str, out: &mut [f64]) -> Result<(), FieldError> {
        if x.len() != self.dim {
            return Err(FieldError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let cond = self.condition(condition)?;
        match &self.kind {
            FieldKind::Gaussian => gaussian_eps(&cond.components[0], x, level, out),
            FieldKind::GaussianMixture => mixture_eps(&cond.components, x, level, out),
            FieldKind::RoughSynthetic {
                amplitude,
                frequency,
                roughness,
            } => {
                gaussian_eps(&cond.components[0], x, level, out);
                let amp = roughness * amplitude;
                if amp != 0.0 {
                    for (j, (o, xj)) in out.iter_mut().zip(x).enumerate() {
                        *o += amp * (frequency * (xj + level.lambda) + cond.phase + j as f64).sin();
                    }
                }
            }
            FieldKind::Callback(f) => {
                f(x, level, condition, out).map_err(FieldError::Callback)?;
                if out.len() != self.dim {
                    return Err(FieldError::DimensionMismatch {
                        expected: self.dim,
                        got: out.len(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// `ε = σ (x − α μ) / (α² s0² + σ²)`.
fn gaussian_eps(c: &Component, x: &[f64], level: &NoiseLevel, out: &mut [f64]) {
    let (a, s) = (level.alpha, level.sigma);
    let var = a * a * c.spread * c.spread + s * s;
    for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
        *o = s * (xi - a * mi) / var;
    }
}

/// `σ` times the negated marginal score of a Gaussian mixture, with posterior
/// responsibilities computed in log space.
fn mixture_eps(components: &[Component], x: &[f64], level: &NoiseLevel, out: &mut [f64]) {
    let (a, s) = (level.alpha, level.sigma);
    let d = x.len() as f64;
    let logits: Vec<f64> = components
        .iter()
        .map(|c| {
            let var = a * a * c.spread * c.spread + s * s;
            let dist2: f64 = x.iter().zip(&c.mean).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
            c.weight.ln() - 0.5 * d * var.ln() - 0.5 * dist2 / var
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (c, u) in components.iter().zip(&unnorm) {
        let r = u / total;
        let var = a * a * c.spread * c.spread + s * s;
        for ((o, xi), mi) in out.iter_mut().zip(x).zip(&c.mean) {
            *o += r * (s * (xi - a * mi) / var);
        }
    }
}

fn check_level(level: &NoiseLevel) -> Result<(), FieldError> {
    if !(level.alpha > f64::MIN_POSITIVE && level.sigma > f64::MIN_POSITIVE) {
        return Err(FieldError::Degenerate(format!(
            "alpha = {}, sigma = {} at t = {}",
            level.alpha, level.sigma, level.t
        )));
    }
    Ok(())
}

/// Data prediction `x₀ = (x − σ ε) / α`.
pub fn eps_to_x0(level: &NoiseLevel, x: &[f64], eps: &[f64]) -> Result<Vec<f64>, FieldError> {
    check_level(level)?;
    Ok(x.iter().zip(eps).map(|(xi, ei)| (xi - level.sigma * ei) / level.alpha).collect())
}

/// Inverse of [`eps_to_x0`]: `ε = (x − α x₀) / σ`.
pub fn x0_to_eps(level: &NoiseLevel, x: &[f64], x0: &[f64]) -> Result<Vec<f64>, FieldError> {
    check_level(level)?;
    Ok(x.iter().zip(x0).map(|(xi, di)| (xi - level.alpha * di) / level.sigma).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    Plain,
    NpiInversion,
    Proximal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub mode: GuidanceMode,
    /// Fraction of coordinates (smallest `|ε_trg − ε_src|` first) that fall back to `g = 1`.
    pub quantile: f64,
    pub source: Option<String>,
    pub target: String,
    pub null: String,
}

pub const DEFAULT_PROXIMAL_QUANTILE: f64 = 0.7;

impl GuidanceConfig {
    /// Plain guidance where both phases use `condition`.
    pub fn plain(scale: f64, condition: impl Into<String>) -> Self {
        let c = condition.into();
        GuidanceConfig {
            scale,
            mode: GuidanceMode::Plain,
            quantile: DEFAULT_PROXIMAL_QUANTILE,
            source: Some(c.clone()),
            target: c,
            null: NULL_CONDITION.to_string(),
        }
    }

    pub fn edit(scale: f64, mode: GuidanceMode, source: impl Into<String>, target: impl Into<String>) -> Self {
        GuidanceConfig {
            scale,
            mode,
            quantile: DEFAULT_PROXIMAL_QUANTILE,
            source: Some(source.into()),
            target: target.into(),
            null: NULL_CONDITION.to_string(),
        }
    }

    pub fn validate(&self, model: &FieldModel) -> Result<(), FieldError> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(FieldError::InvalidGuidance(format!("guidance scale {} must be >= 0", self.scale)));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(FieldError::InvalidGuidance(format!("quantile {} must lie in (0, 1)", self.quantile)));
        }
        if self.mode != GuidanceMode::Plain && self.source.is_none() {
            return Err(FieldError::MissingSource(match self.mode {
                GuidanceMode::NpiInversion => "npi-inversion",
                _ => "proximal",
            }));
        }
        model.condition(&self.target)?;
        if let Some(src) = &self.source {
            model.condition(src)?;
        }
        if self.mode != GuidanceMode::NpiInversion || self.source.is_none() {
            model.condition(&self.null)?;
        }
        Ok(())
    }

    fn source(&self) -> Result<&str, FieldError> {
        self.source.as_deref().ok_or(FieldError::MissingSource(match self.mode {
            GuidanceMode::NpiInversion => "npi-inversion",
            GuidanceMode::Proximal => "proximal",
            GuidanceMode::Plain => "plain",
        }))
    }

    /// Condition that carries the prompt in the given phase.
    pub fn active_condition(&self, phase: Direction) -> Result<&str, FieldError> {
        match phase {
            Direction::Inversion => self.source(),
            Direction::Sampling => Ok(&self.target),
        }
    }
}

/// Guided prediction `ε̂` for one phase of an edit.
pub fn guided_eps(
    model: &FieldModel,
    guidance: &GuidanceConfig,
    x: &[f64],
    level: &NoiseLevel,
    phase: Direction,
) -> Result<Vec<f64>, FieldError> {
    let mut out = vec![0.0; model.dim()];
    guided_eps_into(model, guidance, x, level, phase, &mut out)?;
    Ok(out)
}

pub fn guided_eps_into(
    model: &FieldModel,
    guidance: &GuidanceConfig,
    x: &[f64],
    level: &NoiseLevel,
    phase: Direction,
    out: &mut [f64],
) -> Result<(), FieldError> {
    let g = guidance.scale;
    let cond = guidance.active_condition(phase)?;
    match guidance.mode {
        GuidanceMode::Plain => {
            model.eval_eps_into(x, level, cond, out)?;
            let uncond = model.eval_eps(x, level, &guidance.null)?;
            combine(g, out, &uncond);
        }
        GuidanceMode::NpiInversion => {
            let src = guidance.source()?;
            model.eval_eps_into(x, level, cond, out)?;
            if phase == Direction::Sampling {
                let uncond = model.eval_eps(x, level, src)?;
                combine(g, out, &uncond);
            }
        }
        GuidanceMode::Proximal => {
            let src = guidance.source()?;
            model.eval_eps_into(x, level, cond, out)?;
            let conditional = out.to_vec();
            let uncond = model.eval_eps(x, level, &guidance.null)?;
            combine(g, out, &uncond);
            let e_trg = model.eval_eps(x, level, &guidance.target)?;
            let e_src = model.eval_eps(x, level, src)?;
            let gaps: Vec<f64> = e_trg.iter().zip(&e_src).map(|(a, b)| (a - b).abs()).collect();
            for j in proximal_mask(&gaps, guidance.quantile) {
                out[j] = conditional[j];
            }
        }
    }
    Ok(())
}

/// `out ← g·out + (1 − g)·uncond`.
fn combine(g: f64, out: &mut [f64], uncond: &[f64]) {
    for (o, u) in out.iter_mut().zip(uncond) {
        *o = g * *o + (1.0 - g) * u;
    }
}

/// Indices of the `round(q·d)` coordinates with the smallest gap (ties by index).
pub fn proximal_mask(gaps: &[f64], quantile: f64) -> Vec<usize> {
    let k = (quantile * gaps.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&a, &b| gaps[a].total_cmp(&gaps[b]).then(a.cmp(&b)));
    order.truncate(k.min(gaps.len()));
    order.sort_unstable();
    order
}

/// Anything that predicts the noise at a state and noise level.
pub trait NoisePredictor {
    fn dim(&self) -> usize;
    fn predict(&self, x: &[f64], level: &NoiseLevel, out: &mut [f64]) -> Result<(), FieldError>;
}

/// Unguided prediction under one condition.
#[derive(Debug, Clone, Copy)]
pub struct Conditioned<'a> {
    pub model: &'a FieldModel,
    pub condition: &'a str,
}

impl NoisePredictor for Conditioned<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn predict(&self, x: &[f64], level: &NoiseLevel, out: &mut [f64]) -> Result<(), FieldError> {
        self.model.eval_eps_into(x, level, self.condition, out)
    }
}

/// Guided prediction for one phase.
#[derive(Debug, Clone, Copy)]
pub struct Guided<'a> {
    pub model: &'a FieldModel,
    pub guidance: &'a GuidanceConfig,
    pub phase: Direction,
}

impl NoisePredictor for Guided<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn predict(&self, x: &[f64], level: &NoiseLevel, out: &mut [f64]) -> Result<(), FieldError> {
        guided_eps_into(self.model, self.guidance, x, level, self.phase, out)
    }
}

/// Predictor from a closure, mostly for tests and host bindings.
pub struct FnPredictor<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> NoisePredictor for FnPredictor<F>
where
    F: Fn(&[f64], &NoiseLevel, &mut [f64]) -> Result<(), FieldError>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64], level: &NoiseLevel, out: &mut [f64]) -> Result<(), FieldError> {
        (self.f)(x, level, out)
    }
}
