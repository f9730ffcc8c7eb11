//! Step rules on plain vectors. Each kernel takes the vector field (or the
//! noise prediction at a fixed level) as a closure so the same code serves
//! the diffusion sessions and the linear test equation.

use super::StepError;
use crate::tableau::ButcherTableau;

fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(yi, xi)| yi + a * xi).collect()
}

fn check_finite(v: &[f64], stage: Option<usize>) -> Result<(), StepError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StepError::NonFinite { step: None, stage })
    }
}

/// Runge–Kutta increment `Ψ_h(v, y) = h Σ bᵢ kᵢ`.
pub fn rk_increment<F>(tab: &ButcherTableau, f: &mut F, v: f64, y: &[f64], h: f64) -> Result<Vec<f64>, StepError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), StepError>,
{
    let s = tab.stages();
    let d = y.len();
    let mut k = vec![vec![0.0; d]; s];
    let mut stage = vec![0.0; d];
    for i in 0..s {
        stage.copy_from_slice(y);
        for j in 0..i {
            let a = tab.a[i][j];
            if a != 0.0 {
                for (st, kj) in stage.iter_mut().zip(&k[j]) {
                    *st += h * a * kj;
                }
            }
        }
        f(v + tab.c[i] * h, &stage, &mut k[i])?;
        check_finite(&k[i], Some(i))?;
    }
    let mut inc = vec![0.0; d];
    for (b, ki) in tab.b.iter().zip(&k) {
        if *b != 0.0 {
            for (o, kv) in inc.iter_mut().zip(ki) {
                *o += h * b * kv;
            }
        }
    }
    Ok(inc)
}

/// `y + Ψ_h(v, y)`; a negative `h` realises `Φ_{−h}`.
pub fn rk_step<F>(tab: &ButcherTableau, f: &mut F, v: f64, y: &[f64], h: f64) -> Result<Vec<f64>, StepError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), StepError>,
{
    let inc = rk_increment(tab, f, v, y, h)?;
    Ok(axpy(y, 1.0, &inc))
}

/// Reversible Heun state `(x, x̂, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeunState {
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    pub k: Vec<f64>,
}

pub fn rev_heun_forward<F>(f: &mut F, v_next: f64, h: f64, s: &HeunState) -> Result<HeunState, StepError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), StepError>,
{
    let xhat: Vec<f64> = (0..s.x.len()).map(|j| 2.0 * s.x[j] - s.xhat[j] + h * s.k[j]).collect();
    let mut k = vec![0.0; s.x.len()];
    f(v_next, &xhat, &mut k)?;
    check_finite(&k, Some(0))?;
    let x = (0..s.x.len()).map(|j| s.x[j] + 0.5 * h * (s.k[j] + k[j])).collect();
    Ok(HeunState { x, xhat, k })
}

/// Exact inverse of [`rev_heun_forward`] with the same `h`.
pub fn rev_heun_backward<F>(f: &mut F, v_prev: f64, h: f64, s: &HeunState) -> Result<HeunState, StepError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), StepError>,
{
    let xhat: Vec<f64> = (0..s.x.len()).map(|j| 2.0 * s.x[j] - s.xhat[j] - h * s.k[j]).collect();
    let mut k = vec![0.0; s.x.len()];
    f(v_prev, &xhat, &mut k)?;
    check_finite(&k, Some(0))?;
    let x = (0..s.x.len()).map(|j| s.x[j] - 0.5 * h * (k[j] + s.k[j])).collect();
    Ok(HeunState { x, xhat, k })
}

/// Coupled pair `(x, x̂)` of the McCallum–Foster construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledState {
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
}

/// Forward McCallum–Foster step from `v` to `v + h`.
pub fn mcf_forward<F>(
    base: &ButcherTableau,
    f: &mut F,
    zeta: f64,
    v: f64,
    h: f64,
    s: &CoupledState,
) -> Result<CoupledState, StepError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), StepError>,
{
    let psi = rk_increment(base, f, v, &s.xhat, h)?;
    let x: Vec<f64> = (0..s.x.len())
        .map(|j| zeta * s.x[j] + (1.0 - zeta) * s.xhat[j] + psi[j])
        .collect();
    let back = rk_increment(base, f, v + h, &x, -h)?;
    let xhat = axpy(&s.xhat, -1.0, &back);
    Ok(CoupledState { x, xhat })
}

/// Inverse of [`mcf_forward`]: from the state at `v + h` back to `v`.
pub fn mcf_backward<F>(
    base: &ButcherTableau,
    f: &mut F,
    zeta: f64,
    v: f64,
    h: f64,
    s: &CoupledState,
) -> Result<CoupledState, StepError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), StepError>,
{
    let back = rk_increment(base, f, v + h, &s.x, -h)?;
    let xhat = axpy(&s.xhat, 1.0, &back);
    let psi = rk_increment(base, f, v, &xhat, h)?;
    let x = (0..s.x.len())
        .map(|j| (s.x[j] - (1.0 - zeta) * xhat[j] - psi[j]) / zeta)
        .collect();
    Ok(CoupledState { x, xhat })
}

/// Rex step data: α at both ends and `τ` at both ends of a step `i → j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RexStep {
    pub alpha_from: f64,
    pub alpha_to: f64,
    pub tau_from: f64,
    pub tau_to: f64,
}

/// Forward Rex step in the original state: the McCallum–Foster pair in
/// `x̄ = x/α` with `τ` as time, written with the α-ratio prefactors.
/// `f(τ, x̄, out)` evaluates `dx̄/dτ`.
pub fn rex_forward<F>(base: &ButcherTableau, f: &mut F, zeta: f64, st: RexStep, s: &CoupledState) -> Result<CoupledState, StepError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), StepError>,
{
    let h = st.tau_to - st.tau_from;
    let r = st.alpha_to / st.alpha_from;
    let xhat_bar: Vec<f64> = s.xhat.iter().map(|v| v / st.alpha_from).collect();
    let psi = rk_increment(base, f, st.tau_from, &xhat_bar, h)?;
    let x: Vec<f64> = (0..s.x.len())
        .map(|j| r * (zeta * s.x[j] + (1.0 - zeta) * s.xhat[j]) + st.alpha_to * psi[j])
        .collect();
    let x_bar: Vec<f64> = x.iter().map(|v| v / st.alpha_to).collect();
    let back = rk_increment(base, f, st.tau_to, &x_bar, -h)?;
    let xhat = (0..s.x.len()).map(|j| r * s.xhat[j] - st.alpha_to * back[j]).collect();
    Ok(CoupledState { x, xhat })
}

/// Inverse of [`rex_forward`] for the same step data.
pub fn rex_backward<F>(base: &ButcherTableau, f: &mut F, zeta: f64, st: RexStep, s: &CoupledState) -> Result<CoupledState, StepError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), StepError>,
{
    let h = st.tau_to - st.tau_from;
    let r = st.alpha_to / st.alpha_from;
    let x_bar: Vec<f64> = s.x.iter().map(|v| v / st.alpha_to).collect();
    let back = rk_increment(base, f, st.tau_to, &x_bar, -h)?;
    let xhat: Vec<f64> = (0..s.x.len()).map(|j| (s.xhat[j] + st.alpha_to * back[j]) / r).collect();
    let xhat_bar: Vec<f64> = xhat.iter().map(|v| v / st.alpha_from).collect();
    let psi = rk_increment(base, f, st.tau_from, &xhat_bar, h)?;
    let x = (0..s.x.len())
        .map(|j| ((s.x[j] - st.alpha_to * psi[j]) / r - (1.0 - zeta) * xhat[j]) / zeta)
        .collect();
    Ok(CoupledState { x, xhat })
}

/// Affine DDIM map `x ↦ a x + b ε(x)` between two levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoeffs {
    pub a: f64,
    pub b: f64,
}

/// EDICT forward step. `eps` is the prediction at the current level.
pub fn edict_forward<E>(c: DdimCoeffs, p: f64, eps: &mut E, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>), StepError>
where
    E: FnMut(&[f64], &mut [f64]) -> Result<(), StepError>,
{
    let d = x.len();
    let mut e = vec![0.0; d];
    eps(y, &mut e)?;
    let x_inter: Vec<f64> = (0..d).map(|j| c.a * x[j] + c.b * e[j]).collect();
    eps(&x_inter, &mut e)?;
    let y_inter: Vec<f64> = (0..d).map(|j| c.a * y[j] + c.b * e[j]).collect();
    let x_new: Vec<f64> = (0..d).map(|j| p * x_inter[j] + (1.0 - p) * y_inter[j]).collect();
    let y_new = (0..d).map(|j| p * y_inter[j] + (1.0 - p) * x_new[j]).collect();
    Ok((x_new, y_new))
}

/// Exact inverse of [`edict_forward`]: the four lines undone in reverse order.
pub fn edict_backward<E>(c: DdimCoeffs, p: f64, eps: &mut E, x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>), StepError>
where
    E: FnMut(&[f64], &mut [f64]) -> Result<(), StepError>,
{
    let d = x.len();
    let y_inter: Vec<f64> = (0..d).map(|j| (y[j] - (1.0 - p) * x[j]) / p).collect();
    let x_inter: Vec<f64> = (0..d).map(|j| (x[j] - (1.0 - p) * y_inter[j]) / p).collect();
    let mut e = vec![0.0; d];
    eps(&x_inter, &mut e)?;
    let y_old: Vec<f64> = (0..d).map(|j| (y_inter[j] - c.b * e[j]) / c.a).collect();
    eps(&y_old, &mut e)?;
    let x_old = (0..d).map(|j| (x_inter[j] - c.b * e[j]) / c.a).collect();
    Ok((x_old, y_old))
}

/// BDIA: `x_far_new = γ x_far + (1−γ) x_mid − γ Δ(mid→far) + Δ(mid→next)`, where
/// `Δ(i→j|x) = (a−1)x + bε(x)` and `e = ε(x_mid)`.
pub fn bdia_advance(gamma: f64, to_far: DdimCoeffs, to_next: DdimCoeffs, x_far: &[f64], x_mid: &[f64], e: &[f64]) -> Vec<f64> {
    (0..x_mid.len())
        .map(|j| {
            let d_far = (to_far.a - 1.0) * x_mid[j] + to_far.b * e[j];
            let d_next = (to_next.a - 1.0) * x_mid[j] + to_next.b * e[j];
            gamma * x_far[j] + (1.0 - gamma) * x_mid[j] - gamma * d_far + d_next
        })
        .collect()
}

/// Solves the BDIA relation for `x_far` given the advanced state.
pub fn bdia_retreat(gamma: f64, to_far: DdimCoeffs, to_next: DdimCoeffs, x_next: &[f64], x_mid: &[f64], e: &[f64]) -> Vec<f64> {
    (0..x_mid.len())
        .map(|j| {
            let d_far = (to_far.a - 1.0) * x_mid[j] + to_far.b * e[j];
            let d_next = (to_next.a - 1.0) * x_mid[j] + to_next.b * e[j];
            (x_next[j] - (1.0 - gamma) * x_mid[j] + gamma * d_far - d_next) / gamma
        })
        .collect()
}

/// O-BELM coefficients `(a₁, a₂, b₁)` for steps `h_i` (towards the data) and `h_{i+1}`.
pub fn obelm_coeffs(h_i: f64, h_ip1: f64) -> (f64, f64, f64) {
    let (hi2, hp2) = (h_i * h_i, h_ip1 * h_ip1);
    ((hp2 - hi2) / hp2, hi2 / hp2, -(h_i + h_ip1) / h_ip1)
}

/// `x̄_{i−1} = a₂ x̄_{i+1} + a₁ x̄_i + b₁ h_i ε̄_i`.
pub fn obelm_advance(h_i: f64, h_ip1: f64, xb_ip1: &[f64], xb_i: &[f64], e: &[f64]) -> Vec<f64> {
    let (a1, a2, b1) = obelm_coeffs(h_i, h_ip1);
    (0..xb_i.len()).map(|j| a2 * xb_ip1[j] + a1 * xb_i[j] + b1 * h_i * e[j]).collect()
}

/// The same relation solved for `x̄_{i+1}`.
pub fn obelm_retreat(h_i: f64, h_ip1: f64, xb_im1: &[f64], xb_i: &[f64], e: &[f64]) -> Vec<f64> {
    let (a1, a2, b1) = obelm_coeffs(h_i, h_ip1);
    (0..xb_i.len()).map(|j| (xb_im1[j] - a1 * xb_i[j] - b1 * h_i * e[j]) / a2).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tableau::{classical_tableaux, ees25_default, ees27_default, euler, midpoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nonlinear(_v: f64, y: &[f64], out: &mut [f64]) -> Result<(), StepError> {
        for j in 0..y.len() {
            out[j] = (y[j] * 1.3 + j as f64).sin() - 0.2 * y[(j + 1) % y.len()];
        }
        Ok(())
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn constant_field_moves_linearly() {
        let mut f = |_v: f64, _y: &[f64], out: &mut [f64]| {
            out.copy_from_slice(&[2.0, -1.0]);
            Ok(())
        };
        let mut tabs = classical_tableaux();
        tabs.push(ees25_default());
        tabs.push(ees27_default());
        for t in tabs {
            let y = rk_step(&t, &mut f, 0.0, &[1.0, 1.0], 0.3).unwrap();
            assert!((y[0] - 1.6).abs() < 1e-15 && (y[1] - 0.7).abs() < 1e-15, "{}", t.label);
        }
    }

    #[test]
    fn linear_field_gets_transfer_function() {
        let mut f = |_v: f64, y: &[f64], out: &mut [f64]| {
            out[0] = -y[0];
            Ok(())
        };
        let y = rk_step(&euler(), &mut f, 0.0, &[1.0], 0.25).unwrap();
        assert_eq!(y[0], 0.75);
        let y = rk_step(&ees25_default(), &mut f, 0.0, &[1.0], 1.0).unwrap();
        assert!((y[0] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn non_finite_stage_reported() {
        let mut f = |_v: f64, _y: &[f64], out: &mut [f64]| {
            out[0] = f64::NAN;
            Ok(())
        };
        let err = rk_step(&midpoint(), &mut f, 0.0, &[1.0], 0.1).unwrap_err();
        assert_eq!(err, StepError::NonFinite { step: None, stage: Some(0) });
    }

    #[test]
    fn ees_forward_backward_is_near_identity() {
        // One step then the negative step from the new point: error shrinks like h^{m+1}.
        let mut errs = Vec::new();
        for h in [0.2, 0.1] {
            let y0 = [0.4, -0.3, 1.1];
            let t = ees25_default();
            let y1 = rk_step(&t, &mut nonlinear, 0.0, &y0, h).unwrap();
            let back = rk_step(&t, &mut nonlinear, h, &y1, -h).unwrap();
            errs.push(rel(&back, &y0));
        }
        let slope = (errs[0] / errs[1]).log2();
        assert!(slope > 5.0, "slope {slope}");
    }

    #[test]
    fn reversible_heun_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut k = vec![0.0; 4];
        nonlinear(0.0, &x, &mut k).unwrap();
        let s0 = HeunState { x: x.clone(), xhat: x.clone(), k };
        let mut s = s0.clone();
        let h = 0.07;
        for n in 0..30 {
            s = rev_heun_forward(&mut nonlinear, (n + 1) as f64 * h, h, &s).unwrap();
        }
        for n in (0..30).rev() {
            s = rev_heun_backward(&mut nonlinear, n as f64 * h, h, &s).unwrap();
        }
        assert!(rel(&s.x, &s0.x) < 1e-13);
        assert!(rel(&s.xhat, &s0.xhat) < 1e-13);
        assert!(rel(&s.k, &s0.k) < 1e-13);
    }

    #[test]
    fn zero_field_heun_is_constant() {
        let mut zero = |_v: f64, _y: &[f64], o: &mut [f64]| {
            o.iter_mut().for_each(|v| *v = 0.0);
            Ok(())
        };
        let s = HeunState { x: vec![1.0], xhat: vec![1.0], k: vec![0.0] };
        let n = rev_heun_forward(&mut zero, 0.1, 0.1, &s).unwrap();
        assert_eq!(n, s);
    }

    #[test]
    fn mcf_inverts_for_both_bases() {
        for base in [euler(), midpoint()] {
            let x = vec![0.3, -0.9, 0.5];
            let s0 = CoupledState { x: x.clone(), xhat: x };
            let mut s = s0.clone();
            let h = 0.05;
            for n in 0..24 {
                s = mcf_forward(&base, &mut nonlinear, 0.999, n as f64 * h, h, &s).unwrap();
            }
            for n in (0..24).rev() {
                s = mcf_backward(&base, &mut nonlinear, 0.999, n as f64 * h, h, &s).unwrap();
            }
            assert!(rel(&s.x, &s0.x) < 1e-12, "{}", base.label);
            assert!(rel(&s.xhat, &s0.xhat) < 1e-12);
        }
    }

    #[test]
    fn rex_with_unit_alpha_is_mcf() {
        let base = midpoint();
        let s = CoupledState { x: vec![0.3, -0.9], xhat: vec![0.1, 0.2] };
        let st = RexStep { alpha_from: 1.0, alpha_to: 1.0, tau_from: 0.4, tau_to: 0.3 };
        let a = rex_forward(&base, &mut nonlinear, 0.9, st, &s).unwrap();
        let b = mcf_forward(&base, &mut nonlinear, 0.9, 0.4, -0.1, &s).unwrap();
        assert!(rel(&a.x, &b.x) < 1e-15 && rel(&a.xhat, &b.xhat) < 1e-15);
        let back = rex_backward(&base, &mut nonlinear, 0.9, st, &a).unwrap();
        assert!(rel(&back.x, &s.x) < 1e-14 && rel(&back.xhat, &s.xhat) < 1e-14);
    }

    #[test]
    fn mcf_unit_coupling_constant_increment_tracks_base() {
        let mut f = |_v: f64, _y: &[f64], out: &mut [f64]| {
            out[0] = 1.5;
            Ok(())
        };
        let s = CoupledState { x: vec![2.0], xhat: vec![2.0] };
        let n = mcf_forward(&euler(), &mut f, 1.0, 0.0, 0.2, &s).unwrap();
        assert!((n.x[0] - 2.3).abs() < 1e-15 && (n.xhat[0] - 2.3).abs() < 1e-15);
    }

    fn toy_eps(x: &[f64], out: &mut [f64]) -> Result<(), StepError> {
        for j in 0..x.len() {
            out[j] = (2.0 * x[j]).tanh() + 0.1 * x[j] * x[j];
        }
        Ok(())
    }

    #[test]
    fn edict_inverts() {
        let c = DdimCoeffs { a: 1.02, b: -0.07 };
        let (x0, y0) = (vec![0.5, -0.2], vec![0.5, -0.2]);
        let (x1, y1) = edict_forward(c, 0.93, &mut toy_eps, &x0, &y0).unwrap();
        let (xb, yb) = edict_backward(c, 0.93, &mut toy_eps, &x1, &y1).unwrap();
        assert!(rel(&xb, &x0) < 1e-15 && rel(&yb, &y0) < 1e-15);
    }

    #[test]
    fn edict_unit_mixing_is_ddim_for_constant_eps() {
        let mut e = |_x: &[f64], out: &mut [f64]| {
            out.iter_mut().for_each(|v| *v = 0.4);
            Ok(())
        };
        let c = DdimCoeffs { a: 1.1, b: -0.2 };
        let (x1, y1) = edict_forward(c, 1.0, &mut e, &[1.0], &[1.0]).unwrap();
        assert!((x1[0] - (1.1 - 0.08)).abs() < 1e-15 && (y1[0] - x1[0]).abs() < 1e-15);
    }

    #[test]
    fn bdia_relation_inverts() {
        let far = DdimCoeffs { a: 0.97, b: 0.05 };
        let next = DdimCoeffs { a: 1.03, b: -0.06 };
        let (xf, xm) = ([0.3, -0.4], [0.25, -0.35]);
        let mut e = [0.0; 2];
        toy_eps(&xm, &mut e).unwrap();
        let xn = bdia_advance(0.96, far, next, &xf, &xm, &e);
        let back = bdia_retreat(0.96, far, next, &xn, &xm, &e);
        assert!(rel(&back, &xf) < 1e-15);
    }

    #[test]
    fn obelm_uniform_coefficients() {
        assert_eq!(obelm_coeffs(0.1, 0.1), (0.0, 1.0, -2.0));
    }

    /// Second-order consistency: the O-BELM relation is exact on quadratics
    /// `x̄(σ̄) = c₀ + c₁σ̄ + c₂σ̄²` with `ε̄ = dx̄/dσ̄` for non-uniform steps.
    #[test]
    fn obelm_exact_on_quadratics() {
        let (c0, c1, c2) = (0.3, -1.2, 0.8);
        let xb = |s: f64| c0 + c1 * s + c2 * s * s;
        let de = |s: f64| c1 + 2.0 * c2 * s;
        let (s_im1, s_i, s_ip1) = (0.2, 0.45, 0.9);
        let (h_i, h_ip1) = (s_i - s_im1, s_ip1 - s_i);
        let got = obelm_advance(h_i, h_ip1, &[xb(s_ip1)], &[xb(s_i)], &[de(s_i)]);
        assert!((got[0] - xb(s_im1)).abs() < 1e-14);
        let back = obelm_retreat(h_i, h_ip1, &[xb(s_im1)], &[xb(s_i)], &[de(s_i)]);
        assert!((back[0] - xb(s_ip1)).abs() < 1e-14);
    }
}
