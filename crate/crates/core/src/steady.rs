//! Optimal steady pair `z_s = (x_s, u_s)`: the equilibrium with the lowest
//! stage cost. Used for analysis and verification only; the controller
//! never sees it.

use crate::dynamics::{ControlBounds, DiscreteDynamics};
use crate::error::{check_dim, EmpcError, Result};
use crate::linalg::{distance, norm2, solve, Mat};
use crate::objective::EconomicObjective;
use crate::scalar::{from_usize, lit, to_f64, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct SteadyPair<T> {
    pub x_s: Vec<T>,
    pub u_s: Vec<T>,
    /// Stage cost at the pair, without any reporting shift.
    pub ell_s: T,
    /// `‖f(x_s, u_s) − x_s‖`
    pub residual: T,
}

impl<T: Scalar> SteadyPair<T> {
    /// Euclidean distance from `(x, u)` to `(x_s, u_s)`.
    pub fn distance(&self, x: &[T], u: &[T]) -> T {
        let dx = distance(x, &self.x_s);
        let du = distance(u, &self.u_s);
        (dx * dx + du * du).sqrt()
    }
}

const MAX_NEWTON: usize = 100;

fn residual_tol<T: Scalar>() -> T {
    lit::<T>(1e-10).max(T::epsilon() * lit(1e3))
}

/// Equilibrium state for a constant input.
///
/// Uses the model's closed form when it has one; otherwise a damped Newton
/// iteration from `guess` on `F(x, u) = 0` (continuous models) or
/// `f(x, u) − x = 0` (native maps).
pub fn steady_state_for_input<T: Scalar>(
    dynamics: &DiscreteDynamics<T>,
    u: &[T],
    guess: &[T],
) -> Result<Vec<T>> {
    check_dim("steady-state input", dynamics.control_dim(), u.len())?;
    check_dim("steady-state guess", dynamics.state_dim(), guess.len())?;
    let n = dynamics.state_dim();
    if let Some(model) = dynamics.ode() {
        if let Some(x) = model.equilibrium(u) {
            return Ok(x);
        }
    }
    let residual = |x: &[T]| -> Result<(Vec<T>, Mat<T>)> {
        match dynamics.ode() {
            Some(model) => {
                let mut r = vec![T::zero(); n];
                model.rhs(x, u, &mut r);
                let mut jx = Mat::zeros(n, n);
                let mut ju = Mat::zeros(n, u.len());
                model.jacobians(x, u, &mut jx, &mut ju);
                Ok((r, jx))
            }
            None => {
                let lin = dynamics.step_with_jacobians(x, u)?;
                let r = lin.next.iter().zip(x).map(|(&a, &b)| a - b).collect();
                let mut j = lin.a;
                j.add_scaled(-T::one(), &Mat::identity(n));
                Ok((r, j))
            }
        }
    };
    let mut x = guess.to_vec();
    let mut history = Vec::new();
    let (mut r, mut jac) = residual(&x)?;
    let mut r_norm = norm2(&r);
    let tol = residual_tol::<T>() * lit(1e-2);
    for _ in 0..MAX_NEWTON {
        history.push(to_f64(r_norm));
        if r_norm <= tol {
            return Ok(x);
        }
        let Some(dx) = solve(&jac, &r) else {
            break;
        };
        let mut lambda = T::one();
        let mut improved = false;
        while lambda >= lit(1e-6) {
            let trial: Vec<T> = x.iter().zip(&dx).map(|(&a, &d)| a - lambda * d).collect();
            if let Ok((rt, jt)) = residual(&trial) {
                let nt = norm2(&rt);
                if nt.is_finite() && nt < r_norm {
                    x = trial;
                    r = rt;
                    jac = jt;
                    r_norm = nt;
                    improved = true;
                    break;
                }
            }
            lambda = lambda * lit(0.5);
        }
        if !improved {
            break;
        }
    }
    history.push(to_f64(r_norm));
    if r_norm <= residual_tol() {
        return Ok(x);
    }
    Err(EmpcError::NewtonFailure { residuals: history })
}

/// Grid scan of the input box followed by golden-section refinement
/// (coordinate-wise when `m > 1`) of `u ↦ ℓ(x_ss(u), u)`.
///
/// `guess` seeds the Newton solves for models without a closed form. Grid
/// points whose steady state cannot be computed are skipped.
pub fn optimal_steady_pair<T: Scalar>(
    dynamics: &DiscreteDynamics<T>,
    objective: &EconomicObjective<T>,
    bounds: &ControlBounds<T>,
    grid_points: usize,
    guess: &[T],
) -> Result<SteadyPair<T>> {
    if grid_points < 3 {
        return Err(EmpcError::InvalidArgument(format!("grid_points must be >= 3, got {grid_points}")));
    }
    let m = bounds.dim();
    check_dim("steady bounds", dynamics.control_dim(), m)?;
    let total = (grid_points as f64).powi(m as i32);
    if total > 1e6 {
        return Err(EmpcError::InvalidArgument(format!("steady grid of {total} points is too large")));
    }
    let objective = objective.clone().with_ell_shift(T::zero());
    let value = |u: &[T]| -> Option<(T, Vec<T>)> {
        let x = steady_state_for_input(dynamics, u, guess).ok()?;
        let v = objective.effective_stage(&x, u);
        v.is_finite().then_some((v, x))
    };
    let spacing: Vec<T> = (0..m)
        .map(|i| (bounds.upper()[i] - bounds.lower()[i]) / from_usize(grid_points - 1))
        .collect();
    let grid_value = |idx: &[usize]| -> Vec<T> {
        (0..m).map(|i| (bounds.lower()[i] + spacing[i] * from_usize(idx[i])).min(bounds.upper()[i])).collect()
    };

    let mut best: Option<(T, Vec<T>)> = None;
    let mut idx = vec![0usize; m];
    let mut failures = 0usize;
    loop {
        let u = grid_value(&idx);
        match value(&u) {
            Some((v, _)) => {
                if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                    best = Some((v, u));
                }
            }
            None => {
                failures += 1;
                log::warn!("no steady state found for u = {u:?}");
            }
        }
        // odometer increment
        let mut d = 0;
        while d < m {
            idx[d] += 1;
            if idx[d] < grid_points {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == m {
            break;
        }
    }
    let Some((grid_best, mut u)) = best else {
        return Err(EmpcError::SteadyScanFailed);
    };
    if failures > 0 {
        log::warn!("{failures} steady grid points skipped");
    }

    let tol = lit::<T>(1e-10);
    let eval = |u: &[T]| value(u).map(|(v, _)| v).unwrap_or_else(T::infinity);
    let mut current = grid_best;
    for _sweep in 0..50 {
        let before = u.clone();
        for i in 0..m {
            let lo = (u[i] - spacing[i]).max(bounds.lower()[i]);
            let hi = (u[i] + spacing[i]).min(bounds.upper()[i]);
            let mut probe = u.clone();
            let ui = golden_section(
                |s| {
                    probe[i] = s;
                    eval(&probe)
                },
                lo,
                hi,
                tol,
            );
            let mut candidate = u.clone();
            candidate[i] = ui;
            let v = eval(&candidate);
            if v <= current {
                current = v;
                u = candidate;
            }
        }
        if m == 1 || distance(&u, &before) <= tol {
            break;
        }
    }

    let (ell_s, x_s) = value(&u).ok_or(EmpcError::SteadyScanFailed)?;
    let next = dynamics.step(&x_s, &u)?;
    let residual = distance(&next, &x_s);
    if residual > residual_tol() {
        return Err(EmpcError::NewtonFailure { residuals: vec![to_f64(residual)] });
    }
    Ok(SteadyPair { x_s, u_s: u, ell_s, residual })
}

/// Minimizer of a unimodal `f` on `[a, b]` to bracket width `tol`.
fn golden_section<T: Scalar>(mut f: impl FnMut(T) -> T, mut a: T, mut b: T, tol: T) -> T {
    let inv_phi = lit::<T>((5f64.sqrt() - 1.0) / 2.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        if !(c < d) {
            break;
        }
    }
    let mid = lit::<T>(0.5) * (a + b);
    let candidates = [(f(mid), mid), (fc, c), (fd, d)];
    candidates.into_iter().fold((T::infinity(), mid), |acc, p| if p.0 < acc.0 { p } else { acc }).1
}
