//! Linear stability domains, empirical boundedness probes on the linear test
//! equation, the McCallum–Foster Γ region and zero-stability checks.

use std::fmt::Write as _;
use std::io::{self, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::stepper::kernels::{self, CoupledState, DdimCoeffs, HeunState};
use crate::stepper::{SolverKind, StepError};
use crate::tableau::{stability_polynomial, ButcherTableau, StabilityPolynomial};

/// Cells with `||R| − 1|` below this are indeterminate.
pub const BOUNDARY_TOL: f64 = 1e-9;
/// Roots within this distance of the unit circle count as on it.
pub const UNIT_CIRCLE_TOL: f64 = 1e-9;
pub const DEFAULT_ITERS: usize = 10_000;
pub const DEFAULT_GROWTH_CAP: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("leading coefficient of the characteristic polynomial is zero")]
    DegenerateLeading,
    #[error("characteristic polynomial needs degree >= 1")]
    ConstantPolynomial,
    #[error("invalid window or resolution: {0}")]
    InvalidWindow(String),
    #[error("no stability boundary found on the negative real axis down to {0}")]
    NoBoundary(f64),
    #[error("solver has no linear-test realisation: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Window {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
}

impl Window {
    pub const fn new(re_min: f64, re_max: f64, im_min: f64, im_max: f64) -> Self {
        Window { re_min, re_max, im_min, im_max }
    }

    /// The comparison window used for the classical/EES domain plots.
    pub const STANDARD: Window = Window::new(-4.0, 1.0, -3.0, 3.0);

    pub fn parse(s: &str) -> Option<Self> {
        let v: Vec<f64> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        match v[..] {
            [a, b, c, d] if a < b && c < d => Some(Window::new(a, b, c, d)),
            _ => None,
        }
    }

    fn validate(&self, nx: usize, ny: usize) -> Result<(), StabilityError> {
        let finite = [self.re_min, self.re_max, self.im_min, self.im_max].iter().all(|v| v.is_finite());
        if !finite || self.re_min >= self.re_max || self.im_min >= self.im_max || nx == 0 || ny == 0 {
            return Err(StabilityError::InvalidWindow(format!("{self:?} at {nx}x{ny}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RasterSource {
    Polynomial,
    Empirical,
    GammaCriterion,
}

/// Cell values: 1 stable, 0 unstable, −1 indeterminate (boundary).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRaster {
    pub window: Window,
    pub nx: usize,
    pub ny: usize,
    /// Row-major, `iy * nx + ix`, `iy = 0` at `im_min`.
    pub cells: Vec<i8>,
    pub source: RasterSource,
}

impl StabilityRaster {
    fn build<F: Fn(Complex64) -> i8 + Sync>(window: Window, nx: usize, ny: usize, source: RasterSource, f: F) -> Result<Self, StabilityError> {
        window.validate(nx, ny)?;
        let cells = (0..nx * ny)
            .into_par_iter()
            .map(|k| f(cell_center(&window, nx, ny, k % nx, k / nx)))
            .collect();
        Ok(StabilityRaster { window, nx, ny, cells, source })
    }

    pub fn center(&self, ix: usize, iy: usize) -> Complex64 {
        cell_center(&self.window, self.nx, self.ny, ix, iy)
    }

    pub fn get(&self, ix: usize, iy: usize) -> i8 {
        self.cells[iy * self.nx + ix]
    }

    pub fn stable_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    /// Whether the raster is symmetric under `z ↦ z̄` (for windows symmetric about the real axis).
    pub fn is_conjugate_symmetric(&self) -> bool {
        (0..self.ny).all(|iy| (0..self.nx).all(|ix| self.get(ix, iy) == self.get(ix, self.ny - 1 - iy)))
    }

    /// Fraction of cells determinate in both rasters on which they agree,
    /// together with the number of such cells.
    pub fn agreement(&self, other: &StabilityRaster) -> (f64, usize) {
        assert_eq!((self.nx, self.ny), (other.nx, other.ny), "raster shapes differ");
        let mut n = 0usize;
        let mut same = 0usize;
        for (a, b) in self.cells.iter().zip(&other.cells) {
            if *a >= 0 && *b >= 0 {
                n += 1;
                if a == b {
                    same += 1;
                }
            }
        }
        (if n == 0 { 1.0 } else { same as f64 / n as f64 }, n)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "re,im,stable")?;
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let z = self.center(ix, iy);
                writeln!(w, "{},{},{}", z.re, z.im, self.get(ix, iy))?;
            }
        }
        Ok(())
    }

    /// Self-contained SVG: one rectangle per stable (or indeterminate) cell plus axes.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h) = (480.0, 480.0 * (self.window.im_max - self.window.im_min) / (self.window.re_max - self.window.re_min));
        let (cw, ch) = (w / self.nx as f64, h / self.ny as f64);
        let px = |re: f64| (re - self.window.re_min) / (self.window.re_max - self.window.re_min) * w;
        let py = |im: f64| h - (im - self.window.im_min) / (self.window.im_max - self.window.im_min) * h;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="-40 -30 {:.0} {:.0}">"#,
            w + 60.0,
            h + 60.0,
            w + 60.0,
            h + 60.0
        );
        let _ = writeln!(s, r#"<text x="0" y="-10" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
        let _ = writeln!(s, r##"<rect x="0" y="0" width="{w:.2}" height="{h:.2}" fill="#ffffff" stroke="#000"/>"##);
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let fill = match self.get(ix, iy) {
                    1 => "#4477aa",
                    -1 => "#bbbbbb",
                    _ => continue,
                };
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{fill}"/>"#,
                    ix as f64 * cw,
                    h - (iy + 1) as f64 * ch,
                    cw + 0.01,
                    ch + 0.01
                );
            }
        }
        if self.window.re_min < 0.0 && self.window.re_max > 0.0 {
            let x0 = px(0.0);
            let _ = writeln!(s, r##"<line x1="{x0:.2}" y1="0" x2="{x0:.2}" y2="{h:.2}" stroke="#000" stroke-width="0.5"/>"##);
        }
        if self.window.im_min < 0.0 && self.window.im_max > 0.0 {
            let y0 = py(0.0);
            let _ = writeln!(s, r##"<line x1="0" y1="{y0:.2}" x2="{w:.2}" y2="{y0:.2}" stroke="#000" stroke-width="0.5"/>"##);
        }
        let _ = writeln!(
            s,
            r#"<text x="0" y="{:.0}" font-family="sans-serif" font-size="11">Re z in [{}, {}], Im z in [{}, {}]</text>"#,
            h + 18.0,
            self.window.re_min,
            self.window.re_max,
            self.window.im_min,
            self.window.im_max
        );
        s.push_str("</svg>\n");
        s
    }
}

pub(crate) fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn cell_center(w: &Window, nx: usize, ny: usize, ix: usize, iy: usize) -> Complex64 {
    let dx = (w.re_max - w.re_min) / nx as f64;
    let dy = (w.im_max - w.im_min) / ny as f64;
    Complex64::new(w.re_min + (ix as f64 + 0.5) * dx, w.im_min + (iy as f64 + 0.5) * dy)
}

fn classify(modulus: f64) -> i8 {
    if (modulus - 1.0).abs() < BOUNDARY_TOL {
        -1
    } else if modulus < 1.0 {
        1
    } else {
        0
    }
}

/// Cells with `|R(z)| < 1`.
pub fn polynomial_domain(r: &StabilityPolynomial, window: Window, nx: usize, ny: usize) -> Result<StabilityRaster, StabilityError> {
    StabilityRaster::build(window, nx, ny, RasterSource::Polynomial, |z| classify(r.eval(z).norm()))
}

/// Crossing of `|R(x)| = 1` on the negative real axis closest to the origin,
/// located by scanning then bisecting.
pub fn real_axis_boundary(r: &StabilityPolynomial, limit: f64) -> Result<f64, StabilityError> {
    let step = 1e-3;
    let mut inner = -step;
    if r.eval_real(inner).abs() >= 1.0 {
        return Err(StabilityError::NoBoundary(inner));
    }
    loop {
        let outer = inner - step;
        if outer < limit {
            return Err(StabilityError::NoBoundary(limit));
        }
        if r.eval_real(outer).abs() >= 1.0 {
            let (mut a, mut b) = (outer, inner);
            while b - a > 1e-14 {
                let m = 0.5 * (a + b);
                if r.eval_real(m).abs() >= 1.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            return Ok(0.5 * (a + b));
        }
        inner = outer;
    }
}

/// A solver's realisation on `y' = λy` with `h = 1`, `z = λ`.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearProbe {
    Rk(ButcherTableau),
    ReversibleHeun,
    /// Also stands for Rex, which is this pair in `x/α` coordinates.
    McCallumFoster { base: ButcherTableau, zeta: f64 },
    Edict { p: f64 },
    Bdia { gamma: f64 },
    Obelm,
}

impl LinearProbe {
    pub fn from_kind(kind: &SolverKind) -> Result<Self, StabilityError> {
        use crate::stepper::SolverKind as K;
        Ok(match *kind {
            K::Ddim => LinearProbe::Rk(crate::tableau::euler()),
            K::Rk(m) => LinearProbe::Rk(m.tableau().map_err(|e| StabilityError::Unsupported(e.to_string()))?),
            K::ReversibleHeun => LinearProbe::ReversibleHeun,
            K::McCallumFoster { base, zeta } | K::Rex { base, zeta } => LinearProbe::McCallumFoster { base: base.tableau(), zeta },
            K::Edict { p } => LinearProbe::Edict { p },
            K::Bdia { gamma } => LinearProbe::Bdia { gamma },
            K::Obelm => LinearProbe::Obelm,
        })
    }
}

fn cmul(z: Complex64, y: &[f64], out: &mut [f64]) {
    out[0] = z.re * y[0] - z.im * y[1];
    out[1] = z.re * y[1] + z.im * y[0];
}

fn mag(v: &[f64]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Largest state magnitude (over primary and auxiliary components) seen in
/// `n_iters` steps from `y₀ = 1`, stopping early once it exceeds `cap`.
pub fn linear_orbit_max(probe: &LinearProbe, z: Complex64, n_iters: usize, cap: f64) -> Result<f64, StepError> {
    let mut f = |_v: f64, y: &[f64], out: &mut [f64]| -> Result<(), StepError> {
        cmul(z, y, out);
        Ok(())
    };
    let one = vec![1.0, 0.0];
    let mut peak = 1.0f64;
    let mut track = |vs: &[&[f64]]| -> bool {
        for v in vs {
            let m = mag(v);
            if !m.is_finite() {
                peak = f64::INFINITY;
                return true;
            }
            peak = peak.max(m);
        }
        peak > cap
    };
    match probe {
        LinearProbe::Rk(tab) => {
            let mut y = one;
            for _ in 0..n_iters {
                y = kernels::rk_step(tab, &mut f, 0.0, &y, 1.0)?;
                if track(&[&y]) {
                    break;
                }
            }
        }
        LinearProbe::ReversibleHeun => {
            let mut k = vec![0.0; 2];
            f(0.0, &one, &mut k)?;
            let mut s = HeunState { x: one.clone(), xhat: one, k };
            for _ in 0..n_iters {
                s = kernels::rev_heun_forward(&mut f, 0.0, 1.0, &s)?;
                if track(&[&s.x, &s.xhat, &s.k]) {
                    break;
                }
            }
        }
        LinearProbe::McCallumFoster { base, zeta } => {
            let mut s = CoupledState { x: one.clone(), xhat: one };
            for _ in 0..n_iters {
                s = kernels::mcf_forward(base, &mut f, *zeta, 0.0, 1.0, &s)?;
                if track(&[&s.x, &s.xhat]) {
                    break;
                }
            }
        }
        LinearProbe::Edict { p } => {
            let c = DdimCoeffs { a: 1.0, b: 1.0 };
            let mut e = |y: &[f64], out: &mut [f64]| -> Result<(), StepError> {
                cmul(z, y, out);
                Ok(())
            };
            let (mut x, mut y) = (one.clone(), one);
            for _ in 0..n_iters {
                (x, y) = kernels::edict_forward(c, *p, &mut e, &x, &y)?;
                if track(&[&x, &y]) {
                    break;
                }
            }
        }
        LinearProbe::Bdia { gamma } => {
            // Δ(i→i−1|x) = z x and Δ(i→i+1|x) = −z x; bootstrap with one Euler step.
            let down = DdimCoeffs { a: 1.0, b: 1.0 };
            let up = DdimCoeffs { a: 1.0, b: -1.0 };
            let mut e = vec![0.0; 2];
            cmul(z, &one, &mut e);
            let mut far = one.clone();
            let mut mid: Vec<f64> = (0..2).map(|j| one[j] + e[j]).collect();
            for _ in 0..n_iters {
                cmul(z, &mid, &mut e);
                let next = kernels::bdia_advance(*gamma, up, down, &far, &mid, &e);
                far = std::mem::replace(&mut mid, next);
                if track(&[&mid]) {
                    break;
                }
            }
        }
        LinearProbe::Obelm => {
            // In x̄ with unit steps DDIM is x̄ − ε̄, so ε̄ = −z x̄ gives the Euler factor 1 + z.
            let mut e = vec![0.0; 2];
            cmul(-z, &one, &mut e);
            let mut far = one.clone();
            let mut mid: Vec<f64> = (0..2).map(|j| one[j] - e[j]).collect();
            for _ in 0..n_iters {
                cmul(-z, &mid, &mut e);
                let next = kernels::obelm_advance(1.0, 1.0, &far, &mid, &e);
                far = std::mem::replace(&mut mid, next);
                if track(&[&mid]) {
                    break;
                }
            }
        }
    }
    Ok(peak)
}

/// True iff the iterates stay below `growth_cap` times their initial size.
pub fn empirical_boundedness(probe: &LinearProbe, z: Complex64, n_iters: usize, growth_cap: f64) -> bool {
    match linear_orbit_max(probe, z, n_iters, growth_cap) {
        Ok(peak) => peak <= growth_cap,
        Err(_) => false,
    }
}

pub fn empirical_raster(
    probe: &LinearProbe,
    window: Window,
    nx: usize,
    ny: usize,
    n_iters: usize,
    growth_cap: f64,
) -> Result<StabilityRaster, StabilityError> {
    StabilityRaster::build(window, nx, ny, RasterSource::Empirical, |z| {
        empirical_boundedness(probe, z, n_iters, growth_cap) as i8
    })
}

/// How the Γ criterion decides a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaTest {
    /// `|Γ(z)| < 1 + ζ` as printed; exact only for real Γ.
    Modulus,
    /// Both roots of `μ² − Γμ + ζ` inside the unit circle.
    CharacteristicRoots,
}

/// `Γ(z) = 1 + ζ − (1 − ζ)R(−z) − R(−z)R(z)` with `R` the transfer function of
/// the base increment (`Ψ_h y = R(z) y`, so `R(z) = z` for Euler).
pub fn mcf_gamma(increment: &StabilityPolynomial, zeta: f64, z: Complex64) -> Complex64 {
    let (rp, rm) = (increment.eval(z), increment.eval(-z));
    Complex64::new(1.0 + zeta, 0.0) - (1.0 - zeta) * rm - rm * rp
}

/// Transfer function of the increment `Ψ_h = Φ_h − id`, i.e. `R(z) − 1`.
pub fn increment_polynomial(tab: &ButcherTableau) -> StabilityPolynomial {
    let mut p = stability_polynomial(tab);
    p.coefficients[0] = 0.0;
    p
}

/// Larger root modulus of `μ² − Γμ + ζ`.
pub fn mcf_spectral_radius(gamma: Complex64, zeta: f64) -> f64 {
    let disc = (gamma * gamma - 4.0 * zeta).sqrt();
    let (m1, m2) = ((gamma + disc) / 2.0, (gamma - disc) / 2.0);
    m1.norm().max(m2.norm())
}

pub fn mcf_gamma_region(
    base: &ButcherTableau,
    zeta: f64,
    test: GammaTest,
    window: Window,
    nx: usize,
    ny: usize,
) -> Result<StabilityRaster, StabilityError> {
    let inc = increment_polynomial(base);
    StabilityRaster::build(window, nx, ny, RasterSource::GammaCriterion, |z| {
        let g = mcf_gamma(&inc, zeta, z);
        match test {
            GammaTest::Modulus => {
                let m = g.norm() / (1.0 + zeta);
                classify(m)
            }
            GammaTest::CharacteristicRoots => classify(mcf_spectral_radius(g, zeta)),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroStability {
    pub roots: Vec<(f64, f64)>,
    /// Every root has modulus ≤ 1.
    pub modulus_condition: bool,
    /// Additionally, roots on the unit circle are simple.
    pub root_condition: bool,
}

/// Root condition for `P(ζ) = Σ c_k ζ^{n−k}` (`coeffs[0]` is the leading coefficient).
pub fn zero_stability(coeffs: &[f64]) -> Result<ZeroStability, StabilityError> {
    let n = coeffs.len().checked_sub(1).ok_or(StabilityError::ConstantPolynomial)?;
    if n == 0 {
        return Err(StabilityError::ConstantPolynomial);
    }
    if coeffs[0] == 0.0 {
        return Err(StabilityError::DegenerateLeading);
    }
    let roots: Vec<Complex64> = if n == 1 {
        vec![Complex64::new(-coeffs[1] / coeffs[0], 0.0)]
    } else {
        let mut m = DMatrix::<f64>::zeros(n, n);
        for k in 0..n {
            m[(0, k)] = -coeffs[k + 1] / coeffs[0];
        }
        for k in 1..n {
            m[(k, k - 1)] = 1.0;
        }
        m.complex_eigenvalues().iter().copied().collect()
    };
    let modulus_condition = roots.iter().all(|r| r.norm() <= 1.0 + UNIT_CIRCLE_TOL);
    let on_circle: Vec<&Complex64> = roots.iter().filter(|r| (r.norm() - 1.0).abs() <= UNIT_CIRCLE_TOL).collect();
    // Numerically a double root splits by about √ε, hence the looser pairing tolerance.
    let simple = on_circle
        .iter()
        .enumerate()
        .all(|(a, ra)| on_circle[a + 1..].iter().all(|rb| (*ra - *rb).norm() > 1e-6));
    let mut pairs: Vec<(f64, f64)> = roots.iter().map(|r| (r.re, r.im)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(ZeroStability { roots: pairs, modulus_condition, root_condition: modulus_condition && simple })
}
