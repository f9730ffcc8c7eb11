//! Explicit Runge–Kutta tableaux: the classical library plus the EES(2,5)
//! and EES(2,7) families, and their stability polynomials.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TableauError {
    #[error("inadmissible parameter x = {x} for {family}: {reason}")]
    Inadmissible {
        family: &'static str,
        x: f64,
        reason: String,
    },
    #[error("unknown tableau `{0}` (expected euler, midpoint, heun2, rk3, rk4, ees25, ees27)")]
    UnknownName(String),
}

/// Branch of the EES(2,7) family. `Plus` is the branch with `+√2` in the
/// `±` slots, which contains the default method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    #[default]
    Plus,
    Minus,
}

impl Branch {
    fn sqrt2(self) -> f64 {
        match self {
            Branch::Plus => std::f64::consts::SQRT_2,
            Branch::Minus => -std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    pub label: String,
    /// Row-major `s × s`, strictly lower triangular.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub order: u32,
    pub anti_sym_order: u32,
}

pub const EES25_DEFAULT_X: f64 = 0.1;

/// `x = (5 − 3√2)/14`, the default EES(2,7) member.
pub fn ees27_default_x() -> f64 {
    (5.0 - 3.0 * std::f64::consts::SQRT_2) / 14.0
}

impl ButcherTableau {
    /// Builds a tableau with `c` taken as the row sums of `a`.
    pub fn from_rows(label: impl Into<String>, a: Vec<Vec<f64>>, b: Vec<f64>, order: u32, anti_sym_order: u32) -> Self {
        let c = a.iter().map(|row| row.iter().sum()).collect();
        ButcherTableau {
            label: label.into(),
            a,
            b,
            c,
            order,
            anti_sym_order,
        }
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Checks explicitness, consistency and the order-2/3 conditions implied
    /// by the declared order. Returns the list of violated identities.
    pub fn verify(&self) -> Result<(), Vec<String>> {
        let s = self.stages();
        let mut failures = Vec::new();
        if self.a.len() != s || self.c.len() != s || self.a.iter().any(|r| r.len() != s) {
            failures.push(format!("shape mismatch for s = {s}"));
            return Err(failures);
        }
        // Tolerances scale with the magnitude of the summed terms: near excluded
        // parameters the entries grow and the sums cancel.
        let tol = |scale: f64| 1e-12 * scale.max(1.0);
        let abs_c: Vec<f64> = self.a.iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect();
        for i in 0..s {
            for j in i..s {
                if self.a[i][j] != 0.0 {
                    failures.push(format!("a[{}][{}] = {} breaks explicitness", i + 1, j + 1, self.a[i][j]));
                }
            }
            let row: f64 = self.a[i].iter().sum();
            if (row - self.c[i]).abs() > tol(abs_c[i]) {
                failures.push(format!("row sum {} differs from c[{}] = {}", row, i + 1, self.c[i]));
            }
        }
        let sum_b: f64 = self.b.iter().sum();
        if (sum_b - 1.0).abs() > tol(self.b.iter().map(|v| v.abs()).sum::<f64>()) {
            failures.push(format!("sum of b = {sum_b}, expected 1"));
        }
        let weighted = |k: i32| -> f64 { self.b.iter().zip(&abs_c).map(|(b, c)| b.abs() * c.powi(k)).sum() };
        if self.order >= 2 {
            let btc: f64 = self.b.iter().zip(&self.c).map(|(b, c)| b * c).sum();
            if (btc - 0.5).abs() > tol(weighted(1)) {
                failures.push(format!("b·c = {btc}, expected 1/2"));
            }
        }
        if self.order >= 3 {
            let btc2: f64 = self.b.iter().zip(&self.c).map(|(b, c)| b * c * c).sum();
            let ac = mat_vec(&self.a, &self.c);
            let btac: f64 = self.b.iter().zip(&ac).map(|(b, v)| b * v).sum();
            if (btc2 - 1.0 / 3.0).abs() > tol(weighted(2)) {
                failures.push(format!("b·c² = {btc2}, expected 1/3"));
            }
            if (btac - 1.0 / 6.0).abs() > tol(weighted(2)) {
                failures.push(format!("b·Ac = {btac}, expected 1/6"));
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(failures)
        }
    }

    /// Rational-where-possible text rendering of the tableau.
    pub fn render(&self) -> String {
        let mut out = format!("{} (order {}, anti-symmetric order {})\n", self.label, self.order, self.anti_sym_order);
        for (i, row) in self.a.iter().enumerate() {
            let entries: Vec<String> = row[..i].iter().map(|v| format_number(*v)).collect();
            out.push_str(&format!("{} | {}\n", format_number(self.c[i]), entries.join(", ")));
        }
        let b: Vec<String> = self.b.iter().map(|v| format_number(*v)).collect();
        out.push_str(&format!("b = {}\n", b.join(", ")));
        out
    }
}

fn mat_vec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn euler() -> ButcherTableau {
    ButcherTableau::from_rows("euler", vec![vec![0.0]], vec![1.0], 1, 1)
}

pub fn midpoint() -> ButcherTableau {
    ButcherTableau::from_rows("midpoint", vec![vec![0.0, 0.0], vec![0.5, 0.0]], vec![0.0, 1.0], 2, 2)
}

pub fn heun2() -> ButcherTableau {
    ButcherTableau::from_rows("heun2", vec![vec![0.0, 0.0], vec![1.0, 0.0]], vec![0.5, 0.5], 2, 2)
}

pub fn kutta_rk3() -> ButcherTableau {
    ButcherTableau::from_rows(
        "rk3",
        vec![vec![0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0], vec![-1.0, 2.0, 0.0]],
        vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
        3,
        3,
    )
}

pub fn rk4() -> ButcherTableau {
    ButcherTableau::from_rows(
        "rk4",
        vec![
            vec![0.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ],
        vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        4,
        4,
    )
}

pub fn classical_tableaux() -> Vec<ButcherTableau> {
    vec![euler(), midpoint(), heun2(), kutta_rk3(), rk4()]
}

const DEN_TOL: f64 = 1e-12;

fn guard(family: &'static str, x: f64, what: &str, den: f64) -> Result<f64, TableauError> {
    if den.abs() < DEN_TOL {
        Err(TableauError::Inadmissible {
            family,
            x,
            reason: format!("{what} vanishes"),
        })
    } else {
        Ok(den)
    }
}

/// EES(2,5;x): 3 stages, order 2, anti-symmetric order 5.
pub fn ees25_tableau(x: f64) -> Result<ButcherTableau, TableauError> {
    const F: &str = "ees25";
    if !x.is_finite() {
        return Err(TableauError::Inadmissible { family: F, x, reason: "not finite".into() });
    }
    let one_m_x = guard(F, x, "1 − x", 1.0 - x)?;
    let q = guard(F, x, "1 − 4x²", 1.0 - 4.0 * x * x)?;
    let c2 = (1.0 + 2.0 * x) / (4.0 * one_m_x);
    let a31 = (4.0 * x - 1.0).powi(2) / (4.0 * (x - 1.0) * q);
    let a32 = one_m_x / q;
    let a = vec![vec![0.0, 0.0, 0.0], vec![c2, 0.0, 0.0], vec![a31, a32, 0.0]];
    let b = vec![x, 0.5, 0.5 - x];
    let c = vec![0.0, c2, 3.0 / (4.0 * one_m_x)];
    Ok(ButcherTableau {
        label: format!("ees25(x={})", format_number(x)),
        a,
        b,
        c,
        order: 2,
        anti_sym_order: 5,
    })
}

/// Values listed as excluded for the `+` branch, beyond vanishing denominators.
fn ees27_listed_exclusions() -> [f64; 8] {
    let r2 = std::f64::consts::SQRT_2;
    let r3 = 3f64.sqrt();
    [1.0, 0.5, r2 / 2.0, -r2 / 2.0, 2.0 + r3, 2.0 - r3, 0.5 * (1.0 - r2), 0.5 * (2.0 - r2)]
}

/// EES(2,7;x): 4 stages, order 2, anti-symmetric order 7.
pub fn ees27_tableau(x: f64, branch: Branch) -> Result<ButcherTableau, TableauError> {
    const F: &str = "ees27";
    if !x.is_finite() {
        return Err(TableauError::Inadmissible { family: F, x, reason: "not finite".into() });
    }
    if branch == Branch::Plus {
        if let Some(e) = ees27_listed_exclusions().iter().find(|e| (x - *e).abs() < DEN_TOL) {
            return Err(TableauError::Inadmissible {
                family: F,
                x,
                reason: format!("{} is an excluded value", format_number(*e)),
            });
        }
    }
    let s = branch.sqrt2();
    let xm1 = guard(F, x, "x − 1", x - 1.0)?;
    let tx1 = guard(F, x, "2x − 1", 2.0 * x - 1.0)?;
    let d_alpha = guard(F, x, "1 − s − 2x", 1.0 - s - 2.0 * x)?;
    let d_beta = guard(F, x, "2 − s − 2x", 2.0 - s - 2.0 * x)?;
    guard(F, x, "2x² − 1", 2.0 * x * x - 1.0)?;
    guard(F, x, "2x² − 4x + 1", 2.0 * x * x - 4.0 * x + 1.0)?;

    let alpha = (2.0 * x + s) / (tx1 * d_alpha);
    let beta = 1.0 / (tx1 * d_alpha * d_beta);

    let b = vec![
        x,
        0.5 * (2.0 - s) - (1.0 - s) * x,
        (1.0 - s) * xm1,
        0.5 * (2.0 - s) - x,
    ];
    let a21 = (-2.0 + s * (1.0 - 2.0 * x)) / (4.0 * xm1);
    let a31 = (2.0 * x + s - 2.0) * (4.0 * x + s - 2.0) / (4.0 * s * xm1) * alpha;
    let a32 = 0.5 * (-1.0 + s) * alpha;
    let poly = -40.0 * x.powi(4) + (80.0 - 40.0 * s) * x.powi(3) - (88.0 - 60.0 * s) * x * x + (48.0 - 34.0 * s) * x + 7.0 * s
        - 10.0;
    // With s² = 2, (2x − s)/(2x² − 1) = s/(1 + sx) and
    // (2 + s − 2x)/(2x² − 4x + 1) = 2/(2 − s − 2x); the cancelled forms avoid
    // 0/0 round-off next to the removable points.
    let r1 = s / (1.0 + s * x);
    let a41 = r1 * poly / (4.0 * xm1) * beta;
    let a42 = (2.0 - s) * x * xm1 * (4.0 * x + s - 2.0) * beta;
    let a43 = (2.0 - s) * r1 * xm1 * tx1 / (2.0 * d_beta);
    let a = vec![
        vec![0.0; 4],
        vec![a21, 0.0, 0.0, 0.0],
        vec![a31, a32, 0.0, 0.0],
        vec![a41, a42, a43, 0.0],
    ];
    let sign = if branch == Branch::Plus { "+" } else { "-" };
    Ok(ButcherTableau::from_rows(format!("ees27{sign}(x={})", format_number(x)), a, b, 2, 7))
}

pub fn ees25_default() -> ButcherTableau {
    ees25_tableau(EES25_DEFAULT_X).expect("default x is admissible")
}

pub fn ees27_default() -> ButcherTableau {
    ees27_tableau(ees27_default_x(), Branch::Plus).expect("default x is admissible")
}

/// Looks up a tableau by name; EES families take an optional `x`.
pub fn by_name(name: &str, x: Option<f64>, branch: Branch) -> Result<ButcherTableau, TableauError> {
    match name.to_ascii_lowercase().as_str() {
        "euler" => Ok(euler()),
        "midpoint" => Ok(midpoint()),
        "heun2" | "heun" => Ok(heun2()),
        "rk3" | "kutta-rk3" | "kutta3" => Ok(kutta_rk3()),
        "rk4" => Ok(rk4()),
        "ees25" => ees25_tableau(x.unwrap_or(EES25_DEFAULT_X)),
        "ees27" => ees27_tableau(x.unwrap_or_else(ees27_default_x), branch),
        other => Err(TableauError::UnknownName(other.to_string())),
    }
}

/// `R(z) = Σ r_k z^k` with `r_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityPolynomial {
    pub coefficients: Vec<f64>,
}

impl StabilityPolynomial {
    pub fn new(coefficients: Vec<f64>) -> Self {
        StabilityPolynomial { coefficients }
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len().saturating_sub(1)
    }

    pub fn eval(&self, z: Complex64) -> Complex64 {
        self.coefficients
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, r| acc * z + r)
    }

    pub fn eval_real(&self, z: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, r| acc * z + r)
    }
}

impl fmt::Display for StabilityPolynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.coefficients.iter().map(|r| format_number(*r)).collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// `r_k = bᵀ A^{k−1} e`, exact for explicit schemes.
pub fn stability_polynomial(t: &ButcherTableau) -> StabilityPolynomial {
    let s = t.stages();
    let mut coeffs = vec![1.0];
    let mut v = vec![1.0; s];
    for _ in 0..s {
        coeffs.push(t.b.iter().zip(&v).map(|(b, x)| b * x).sum());
        v = mat_vec(&t.a, &v);
    }
    while coeffs.len() > 1 && *coeffs.last().unwrap() == 0.0 {
        coeffs.pop();
    }
    StabilityPolynomial { coefficients: coeffs }
}

/// `p/q` when `v` is a small-denominator rational to within a few ulps,
/// otherwise 17 significant digits.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if let Some((p, q)) = as_rational(v, 100_000) {
        return if q == 1 { format!("{p}") } else { format!("{p}/{q}") };
    }
    format!("{v:.16e}")
}

fn as_rational(v: f64, max_den: i64) -> Option<(i64, i64)> {
    if !v.is_finite() || v.abs() > 1e9 {
        return None;
    }
    // Continued-fraction convergents.
    let (mut h0, mut h1) = (0i64, 1i64);
    let (mut k0, mut k1) = (1i64, 0i64);
    let mut r = v;
    for _ in 0..40 {
        let a = r.floor();
        if a.abs() > 1e12 {
            break;
        }
        let ai = a as i64;
        let h2 = ai.checked_mul(h1)?.checked_add(h0)?;
        let k2 = ai.checked_mul(k1)?.checked_add(k0)?;
        if k2 > max_den {
            break;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if (h1 as f64 / k1 as f64 - v).abs() <= 4.0 * f64::EPSILON * v.abs() {
            return Some((h1, k1));
        }
        let frac = r - a;
        if frac == 0.0 {
            break;
        }
        r = 1.0 / frac;
    }
    None
}
