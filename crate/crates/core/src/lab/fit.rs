//! Least-squares slopes on log-log ladders.

use serde::Serialize;

use super::LabError;

pub const MIN_FIT_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Slope {
    pub slope: f64,
    /// Two standard errors of the slope.
    pub half_width: f64,
    pub points: usize,
}

impl Slope {
    pub fn contains(&self, target: f64, tol: f64) -> bool {
        (self.slope - target).abs() <= tol
    }
}

/// OLS fit of `log err` against `log h`. Non-finite or non-positive points are dropped.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<Slope, LabError> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(h, e)| h.is_finite() && e.is_finite() && *h > 0.0 && *e > 0.0)
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    let n = usable.len();
    if n < MIN_FIT_POINTS {
        return Err(LabError::TooFewPoints(n));
    }
    let nf = n as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(LabError::Config("slope fit needs distinct step sizes".into()));
    }
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = usable.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let se = (rss / (nf - 2.0) / sxx).sqrt();
    Ok(Slope { slope, half_width: 2.0 * se, points: n })
}
