//! Direct single-shooting solver for the box-constrained open-loop problem
//! `min_{u ∈ 𝕌^{N+1}} J(u, x)`.
//!
//! States are eliminated by forward simulation, so the only decision
//! variables are the stacked inputs and the only constraints are the input
//! box. The box is handled by exact projection inside a limited-memory BFGS
//! iteration with Armijo backtracking along the projected path.

use std::collections::VecDeque;

use crate::dynamics::{ControlBounds, DiscreteDynamics};
use crate::error::{check_dim, EmpcError, Result};
use crate::linalg::{all_finite, axpy, dot, norm2, norm_inf};
use crate::objective::{CostBreakdown, EconomicObjective};
use crate::scalar::{lit, Scalar};
use crate::sequence::ControlSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientMode {
    /// Central differences with step `fd_step · max(1, |uᵢ|)`.
    FiniteDifference,
    /// Backward recursion through the RK4 step Jacobians.
    Adjoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverSettings<T> {
    pub max_iters: usize,
    /// Tolerance on the ∞-norm of the projected gradient `P(u − ∇J) − u`.
    pub grad_tol: T,
    /// Smallest line-search step before the search is declared failed.
    pub step_tol: T,
    pub fd_step: T,
    pub gradient_mode: GradientMode,
    /// Number of stored L-BFGS correction pairs.
    pub memory: usize,
    /// Stop once `stall_window` accepted steps lowered `J` by at most
    /// `stall_tol` in total. A window of 0 disables the test.
    pub stall_window: usize,
    pub stall_tol: T,
}

impl<T: Scalar> Default for SolverSettings<T> {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            grad_tol: lit(1e-8),
            step_tol: lit(1e-12),
            fd_step: lit(1e-6),
            gradient_mode: GradientMode::Adjoint,
            memory: 30,
            stall_window: 20,
            stall_tol: lit(1e-9),
        }
    }
}

impl<T: Scalar> SolverSettings<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(EmpcError::InvalidArgument(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("grad_tol", self.grad_tol)?;
        positive("step_tol", self.step_tol)?;
        positive("fd_step", self.fd_step)?;
        positive("stall_tol", self.stall_tol)?;
        if self.max_iters == 0 {
            return Err(EmpcError::InvalidArgument("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Projected-gradient norm reached `grad_tol`.
    Converged,
    MaxIterations,
    /// No step down to `step_tol` produced a decrease, even along the
    /// projected steepest-descent path.
    LineSearchFailed,
    /// Cost decrease over the stall window fell below `stall_tol`.
    Stalled,
}

/// One row of solver diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    pub cost: T,
    pub projected_grad_norm: T,
    pub step: T,
}

#[derive(Clone, Debug)]
pub struct SolveResult<T: Scalar> {
    pub cost: CostBreakdown<T>,
    pub useq: ControlSequence<T>,
    pub iterations: usize,
    pub converged: bool,
    pub projected_grad_norm: T,
    pub termination: Termination,
}

/// Gradient of `J` with respect to the stacked `[u₀; …; u_N]`.
pub fn gradient<T: Scalar>(
    dynamics: &DiscreteDynamics<T>,
    objective: &EconomicObjective<T>,
    x0: &[T],
    useq: &ControlSequence<T>,
    mode: GradientMode,
    fd_step: T,
) -> Result<Vec<T>> {
    match mode {
        GradientMode::Adjoint => Ok(cost_and_adjoint_gradient(dynamics, objective, x0, useq.as_flat())?.1),
        GradientMode::FiniteDifference => {
            central_difference_gradient(dynamics, objective, x0, useq.as_flat(), fd_step)
        }
    }
}

/// Cost and its gradient from one forward sweep (storing step Jacobians)
/// and one backward costate sweep.
pub fn cost_and_adjoint_gradient<T: Scalar>(
    dynamics: &DiscreteDynamics<T>,
    objective: &EconomicObjective<T>,
    x0: &[T],
    stacked: &[T],
) -> Result<(T, Vec<T>)> {
    let n = dynamics.state_dim();
    let m = dynamics.control_dim();
    check_dim("initial state", n, x0.len())?;
    if stacked.is_empty() || stacked.len() % m != 0 {
        return Err(EmpcError::InvalidArgument("stacked control length not a multiple of m".into()));
    }
    let horizon = stacked.len() / m - 1;
    let tau = dynamics.tau();
    let alpha = objective.alpha();
    let gamma = objective.gamma();

    let mut states = Vec::with_capacity(horizon + 2);
    let mut tapes = vec![Vec::new(); horizon + 1];
    states.push(x0.to_vec());
    for (k, u) in stacked.chunks(m).enumerate() {
        let next = dynamics
            .step_taped(&states[k], u, &mut tapes[k])
            .map_err(|e| EmpcError::RolloutFailure { index: k, source: Box::new(e) })?;
        states.push(next);
    }

    let mut cost = T::zero();
    let mut grad = vec![T::zero(); stacked.len()];
    let mut costate = vec![T::zero(); n];
    let mut seed = vec![T::zero(); n];
    let mut gx = vec![T::zero(); n];
    let mut gu = vec![T::zero(); m];
    let mut x_bar = vec![T::zero(); n];
    let mut u_bar = vec![T::zero(); m];
    let mut dir = vec![T::zero(); n];
    let mut terminal = T::zero();
    for k in (0..=horizon).rev() {
        let xk = &states[k];
        let uk = &stacked[k * m..(k + 1) * m];
        let weight = if k == horizon { gamma } else { T::one() };

        for i in 0..n {
            dir[i] = states[k + 1][i] - xk[i];
        }
        let step_norm = norm2(&dir);
        let stage = objective.effective_stage(xk, uk) + alpha * step_norm / tau;
        if k == horizon {
            terminal = stage;
        } else {
            cost = cost + stage;
        }

        gx.iter_mut().for_each(|v| *v = T::zero());
        gu.iter_mut().for_each(|v| *v = T::zero());
        objective.add_effective_stage_gradient(xk, uk, &mut gx, &mut gu);
        // ∇ of α‖f(x,u) − x‖/τ; zero subgradient where the step vanishes.
        let s = if alpha > T::zero() && step_norm > T::zero() {
            weight * alpha / (tau * step_norm)
        } else {
            T::zero()
        };
        for i in 0..n {
            seed[i] = s * dir[i] + if k < horizon { costate[i] } else { T::zero() };
        }
        dynamics
            .reverse(&tapes[k], xk, uk, &seed, &mut x_bar, &mut u_bar)
            .map_err(|e| EmpcError::RolloutFailure { index: k, source: Box::new(e) })?;
        for i in 0..n {
            costate[i] = weight * gx[i] - s * dir[i] + x_bar[i];
        }
        for j in 0..m {
            grad[k * m + j] = weight * gu[j] + u_bar[j];
        }
    }
    Ok((cost + gamma * terminal, grad))
}

/// Central-difference gradient; the perturbed points may leave the box.
pub fn central_difference_gradient<T: Scalar>(
    dynamics: &DiscreteDynamics<T>,
    objective: &EconomicObjective<T>,
    x0: &[T],
    stacked: &[T],
    fd_step: T,
) -> Result<Vec<T>> {
    let mut probe = stacked.to_vec();
    let mut grad = Vec::with_capacity(stacked.len());
    for i in 0..stacked.len() {
        let h = fd_step * T::one().max(stacked[i].abs());
        probe[i] = stacked[i] + h;
        let plus = objective.total_cost_stacked(dynamics, x0, &probe)?.total;
        probe[i] = stacked[i] - h;
        let minus = objective.total_cost_stacked(dynamics, x0, &probe)?.total;
        probe[i] = stacked[i];
        grad.push((plus - minus) / (h + h));
    }
    Ok(grad)
}

/// `‖P(u − g) − u‖_∞`
fn projected_gradient_norm<T: Scalar>(useq: &ControlSequence<T>, g: &[T]) -> T {
    let b = useq.bounds();
    let m = b.dim();
    useq.as_flat()
        .iter()
        .zip(g)
        .enumerate()
        .fold(T::zero(), |acc, (i, (&u, &gi))| {
            let moved = (u - gi).max(b.lower()[i % m]).min(b.upper()[i % m]);
            acc.max((moved - u).abs())
        })
}

struct Problem<'a, T: Scalar> {
    dynamics: &'a DiscreteDynamics<T>,
    objective: &'a EconomicObjective<T>,
    x0: &'a [T],
    settings: &'a SolverSettings<T>,
}

impl<T: Scalar> Problem<'_, T> {
    fn cost(&self, stacked: &[T]) -> Option<T> {
        self.objective
            .total_cost_stacked(self.dynamics, self.x0, stacked)
            .ok()
            .map(|c| c.total)
            .filter(|v| v.is_finite())
    }

    /// Cost and gradient, or `None` where the rollout fails or is not finite.
    fn cost_grad(&self, stacked: &[T]) -> Option<(T, Vec<T>)> {
        let (f, g) = match self.settings.gradient_mode {
            GradientMode::Adjoint => {
                cost_and_adjoint_gradient(self.dynamics, self.objective, self.x0, stacked).ok()?
            }
            GradientMode::FiniteDifference => {
                let f = self.cost(stacked)?;
                let g = central_difference_gradient(
                    self.dynamics,
                    self.objective,
                    self.x0,
                    stacked,
                    self.settings.fd_step,
                )
                .ok()?;
                (f, g)
            }
        };
        (f.is_finite() && all_finite(&g)).then_some((f, g))
    }
}

struct Accepted<T> {
    point: Vec<T>,
    cost: T,
    grad: Vec<T>,
    step: T,
}

/// Armijo backtracking along the projected path `t ↦ P(u + t d)`, halving
/// `t` from `first_step` down to `step_tol`. Failed rollouts count as
/// rejected trials.
fn line_search<T: Scalar>(
    problem: &Problem<'_, T>,
    bounds: &ControlBounds<T>,
    u: &[T],
    cost: T,
    grad: &[T],
    direction: &[T],
    first_step: T,
) -> Option<Accepted<T>> {
    let c1 = lit::<T>(1e-4);
    let mut t = first_step;
    let mut trial = vec![T::zero(); u.len()];
    while t >= problem.settings.step_tol {
        for i in 0..u.len() {
            trial[i] = u[i] + t * direction[i];
        }
        bounds.project(&mut trial);
        if trial.as_slice() == u {
            return None;
        }
        let slope: T = grad.iter().zip(&trial).zip(u).map(|((&g, &a), &b)| g * (a - b)).sum();
        if slope < T::zero() {
            if let Some(f) = problem.cost(&trial) {
                if f <= cost + c1 * slope && f < cost {
                    let (_, g) = problem.cost_grad(&trial)?;
                    return Some(Accepted { point: trial, cost: f, grad: g, step: t });
                }
            }
        }
        t = t * lit(0.5);
    }
    None
}



/// Solves the open-loop problem from `warm`. See [`solve_with_observer`].
pub fn solve<T: Scalar>(
    dynamics: &DiscreteDynamics<T>,
    objective: &EconomicObjective<T>,
    x0: &[T],
    warm: &ControlSequence<T>,
    settings: &SolverSettings<T>,
) -> Result<SolveResult<T>> {
    solve_with_observer(dynamics, objective, x0, warm, settings, &mut |_| {})
}

/// Projected L-BFGS from `warm`, reporting every iteration to `observer`.
///
/// Every iterate is feasible and every accepted step strictly decreases the
/// cost, so the returned cost never exceeds the warm-start cost.
pub fn solve_with_observer<T: Scalar>(
    dynamics: &DiscreteDynamics<T>,
    objective: &EconomicObjective<T>,
    x0: &[T],
    warm: &ControlSequence<T>,
    settings: &SolverSettings<T>,
    observer: &mut dyn FnMut(&IterationRecord<T>),
) -> Result<SolveResult<T>> {
    settings.validate()?;
    check_dim("initial state", dynamics.state_dim(), x0.len())?;
    check_dim("warm start", dynamics.control_dim(), warm.control_dim())?;
    if !warm.bounds().contains(warm.get(0)) {
        return Err(EmpcError::InvalidArgument("warm start outside the control box".into()));
    }
    let problem = Problem { dynamics, objective, x0, settings };
    let bounds = warm.bounds().clone();
    let m = bounds.dim();
    let dim = warm.as_flat().len();

    let mut current = warm.clone();
    // Costs compared across iterations all come from the same evaluator.
    let (mut cost, mut grad) = problem
        .cost_grad(current.as_flat())
        .and_then(|(_, g)| Some((problem.cost(current.as_flat())?, g)))
        .ok_or_else(|| EmpcError::UnrecoverableStart(format!("x0 = {x0:?}")))?;

    let mut memory: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(settings.memory);
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let mut pg_norm = projected_gradient_norm(&current, &grad);
    let mut last_step = T::zero();
    let mut direction = vec![T::zero(); dim];
    let mut history: VecDeque<T> = VecDeque::with_capacity(settings.stall_window + 1);
    history.push_back(cost);

    loop {
        observer(&IterationRecord { iteration: iterations, cost, projected_grad_norm: pg_norm, step: last_step });
        if pg_norm <= settings.grad_tol {
            termination = Termination::Converged;
            break;
        }
        if iterations >= settings.max_iters {
            break;
        }

        // Inputs held at a bound by the gradient stay fixed this iteration.
        let u = current.as_flat();
        let free: Vec<bool> = (0..dim)
            .map(|i| {
                let (lo, hi) = (bounds.lower()[i % m], bounds.upper()[i % m]);
                !((u[i] <= lo && grad[i] > T::zero()) || (u[i] >= hi && grad[i] < T::zero()))
            })
            .collect();

        let mut accepted = None;
        for use_memory in [true, false] {
            if use_memory && memory.is_empty() {
                continue;
            }
            if use_memory {
                two_loop(&grad, &free, &memory, &mut direction);
            } else {
                memory.clear();
                for i in 0..dim {
                    direction[i] = if free[i] { -grad[i] } else { T::zero() };
                }
            }
            if dot(&grad, &direction) >= T::zero() {
                continue;
            }
            let first = if use_memory {
                T::one()
            } else {
                // First-order step: cap the largest move at the box width.
                let width = (0..m)
                    .map(|i| bounds.upper()[i] - bounds.lower()[i])
                    .fold(T::zero(), T::max);
                let d_inf = norm_inf(&direction);
                if d_inf > width && width > T::zero() { width / d_inf } else { T::one() }
            };
            accepted = line_search(&problem, &bounds, u, cost, &grad, &direction, first);
            if accepted.is_some() {
                break;
            }
        }

        let Some(step) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };
        let s: Vec<T> = step.point.iter().zip(current.as_flat()).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = step.grad.iter().zip(&grad).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > T::epsilon() * norm2(&s) * norm2(&y) && sy > T::zero() {
            if memory.len() == settings.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, T::one() / sy));
        }
        current.set_projected(&step.point);
        cost = step.cost;
        grad = step.grad;
        last_step = step.step;
        iterations += 1;
        pg_norm = projected_gradient_norm(&current, &grad);
        if settings.stall_window > 0 {
            history.push_back(cost);
            if history.len() > settings.stall_window {
                let oldest = history.pop_front().unwrap_or(cost);
                if pg_norm > settings.grad_tol && oldest - cost <= settings.stall_tol {
                    observer(&IterationRecord { iteration: iterations, cost, projected_grad_norm: pg_norm, step: last_step });
                    termination = Termination::Stalled;
                    break;
                }
            }
        }
    }

    let breakdown = objective.total_cost(dynamics, x0, &current)?;
    Ok(SolveResult {
        cost: breakdown,
        useq: current,
        iterations,
        converged: termination == Termination::Converged,
        projected_grad_norm: pg_norm,
        termination,
    })
}

/// L-BFGS two-loop recursion on the free variables; fixed ones get zero.
fn two_loop<T: Scalar>(grad: &[T], free: &[bool], memory: &VecDeque<(Vec<T>, Vec<T>, T)>, out: &mut [T]) {
    let mask = |v: &[T], out: &mut [T]| {
        for i in 0..v.len() {
            out[i] = if free[i] { v[i] } else { T::zero() };
        }
    };
    mask(grad, out);
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = *rho * masked_dot(s, out, free);
        axpy(-a, y, out);
        mask(&out.to_vec(), out);
        alphas.push(a);
    }
    let (s, y, _) = memory.back().expect("non-empty memory");
    let yy = masked_dot(y, y, free);
    let sy = masked_dot(s, y, free);
    let scale = if yy > T::zero() && sy > T::zero() { sy / yy } else { T::one() };
    out.iter_mut().for_each(|v| *v = *v * scale);
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * masked_dot(y, out, free);
        axpy(a - b, s, out);
    }
    mask(&out.to_vec(), out);
    out.iter_mut().for_each(|v| *v = -*v);
}

fn masked_dot<T: Scalar>(a: &[T], b: &[T], free: &[bool]) -> T {
    a.iter()
        .zip(b)
        .zip(free)
        .filter(|(_, &f)| f)
        .fold(T::zero(), |acc, ((&x, &y), _)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::models::{Cstr, Integrator, LinearTest};
    use crate::objective::{LinearStateCost, QuadraticCost};

    fn identity(dim: usize) -> DiscreteDynamics<f64> {
        DiscreteDynamics::from_ode(Arc::new(Integrator { dim, gain: 0.0 }), 0.1, 1).unwrap()
    }

    fn cstr() -> DiscreteDynamics<f64> {
        DiscreteDynamics::from_ode(Arc::new(Cstr::default()), 0.1, 20).unwrap()
    }

    fn neg_x2(alpha: f64, gamma: f64) -> EconomicObjective<f64> {
        EconomicObjective::new(Arc::new(LinearStateCost::negated_component(1, 3))).with_weights(alpha, gamma).unwrap()
    }

    fn box1(dim: usize) -> ControlBounds<f64> {
        ControlBounds::uniform(dim, -1.0, 1.0).unwrap()
    }

    #[test]
    fn separable_quadratic_goes_to_zero() {
        let obj = EconomicObjective::new(Arc::new(QuadraticCost::control_energy(2, 2))).with_weights(0.3, 1.0).unwrap();
        let warm = ControlSequence::constant(&[0.8, -0.6], 5, box1(2)).unwrap();
        let r = solve(&identity(2), &obj, &[0.2, 0.1], &warm, &SolverSettings::default()).unwrap();
        assert!(r.converged, "{:?}", r.termination);
        assert!(r.useq.as_flat().iter().all(|u| u.abs() < 1e-6));
        assert!(r.cost.total.abs() < 1e-6);
    }

    #[test]
    fn terminal_block_has_no_gradient_without_terminal_weight() {
        let d = cstr();
        let obj = neg_x2(0.0, 0.0);
        let useq = ControlSequence::constant(&[0.2], 6, Cstr::bounds()).unwrap();
        for mode in [GradientMode::Adjoint, GradientMode::FiniteDifference] {
            let g = gradient(&d, &obj, &[0.5, 0.1, 0.2], &useq, mode, 1e-6).unwrap();
            assert_eq!(g[6], 0.0, "{mode:?}");
            assert!(g[..6].iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn control_free_cost_on_identity_has_zero_gradient() {
        let obj = EconomicObjective::new(Arc::new(QuadraticCost::state_energy(2, 2)));
        let useq = ControlSequence::constant(&[0.4, -0.2], 4, box1(2)).unwrap();
        let g = gradient(&identity(2), &obj, &[1.0, 2.0], &useq, GradientMode::Adjoint, 1e-6).unwrap();
        assert!(g.iter().all(|v| *v == 0.0), "{g:?}");
    }

    #[test]
    fn adjoint_matches_differences_on_the_cstr() {
        let d = cstr();
        let obj = neg_x2(0.01, 0.5);
        let flat: Vec<f64> = (0..21).map(|k| 0.06 + 0.017 * k as f64).collect();
        let useq = ControlSequence::from_flat(flat, Cstr::bounds()).unwrap();
        let x0 = [0.5, 0.1, 0.2];
        let a = gradient(&d, &obj, &x0, &useq, GradientMode::Adjoint, 1e-6).unwrap();
        let f = gradient(&d, &obj, &x0, &useq, GradientMode::FiniteDifference, 1e-6).unwrap();
        let err: f64 = a.iter().zip(&f).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-7 * crate::linalg::norm2(&f), "{err}");
    }

    #[test]
    fn two_step_integrator_hits_the_reachable_optimum() {
        // x⁺ = x + 0.5u, ℓ = x², N = 2: the best first move drives x₁ to
        // max(0, x₀ − 0.5), after which x₂ is zero when reachable.
        let d = DiscreteDynamics::from_ode(Arc::new(Integrator { dim: 1, gain: 1.0 }), 0.5, 1).unwrap();
        let obj = EconomicObjective::new(Arc::new(QuadraticCost::state_energy(1, 1)));
        let r = solve(&d, &obj, &[0.9], &ControlSequence::midpoint(2, box1(1)), &SolverSettings::default()).unwrap();
        let x1: f64 = 0.9 - 0.5;
        assert!((r.cost.total - (0.81 + x1 * x1)).abs() < 1e-9, "{}", r.cost.total);
        assert_eq!(r.useq.get(0), &[-1.0]);
    }

    #[test]
    fn cstr_stationary_setting_converges_from_mid_box() {
        let warm = ControlSequence::constant(&[0.249], 20, Cstr::bounds()).unwrap();
        let settings = SolverSettings { stall_window: 0, ..SolverSettings::default() };
        let r = solve(&cstr(), &neg_x2(0.01, 0.001), &[0.5, 0.1, 0.2], &warm, &settings).unwrap();
        assert!(r.converged || r.termination == Termination::LineSearchFailed, "{:?}", r.termination);
        assert!(r.iterations <= 1000);
        let w = solve(&cstr(), &neg_x2(0.01, 0.001), &[0.5, 0.1, 0.2], &warm, &SolverSettings::default()).unwrap();
        assert!(w.cost.total <= r.cost.total + 1e-9);
    }

    #[test]
    fn result_cost_is_the_reevaluated_cost() {
        let d = cstr();
        let obj = neg_x2(0.1, 1.0);
        let r = solve(&d, &obj, &[0.5, 0.1, 0.2], &ControlSequence::midpoint(20, Cstr::bounds()), &SolverSettings::default())
            .unwrap();
        let again = obj.total_cost(&d, &[0.5, 0.1, 0.2], &r.useq).unwrap();
        assert!((again.total - r.cost.total).abs() <= 1e-12);
    }

    #[test]
    fn shifted_optimizer_is_a_finite_feasible_warm_start() {
        let d = cstr();
        let obj = neg_x2(0.01, 0.01);
        let x0 = [0.5, 0.1, 0.2];
        let r = solve(&d, &obj, &x0, &ControlSequence::midpoint(20, Cstr::bounds()), &SolverSettings::default()).unwrap();
        let x1 = d.step(&x0, r.useq.get(0)).unwrap();
        let next = r.useq.warm_start_shift();
        assert!((0..next.len()).all(|k| Cstr::<f64>::bounds().contains(next.get(k))));
        assert!(obj.total_cost(&d, &x1, &next).unwrap().total.is_finite());
    }

    #[test]
    fn bad_settings_and_dimensions_are_rejected() {
        let obj = EconomicObjective::new(Arc::new(QuadraticCost::control_energy(1, 1)));
        let warm = ControlSequence::midpoint(3, box1(1));
        let zero_tol = SolverSettings { grad_tol: 0.0, ..SolverSettings::default() };
        assert!(solve(&identity(1), &obj, &[0.0], &warm, &zero_tol).is_err());
        assert!(solve(&identity(1), &obj, &[0.0, 1.0], &warm, &SolverSettings::default()).is_err());
    }

    #[test]
    fn observer_sees_nonincreasing_costs() {
        let mut costs = Vec::new();
        let warm = ControlSequence::midpoint(20, Cstr::bounds());
        solve_with_observer(&cstr(), &neg_x2(1.0, 1.0), &[0.5, 0.1, 0.2], &warm, &SolverSettings::default(), &mut |r| {
            costs.push(r.cost)
        })
        .unwrap();
        assert!(costs.len() > 1);
        assert!(costs.windows(2).all(|w| w[1] <= w[0]));
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn descent_and_feasibility(
                x0 in prop::collection::vec(-2.0f64..2.0, 2),
                warm in prop::collection::vec(-1.0f64..1.0, 10),
                alpha in 0.0f64..1.0,
                gamma in 0.0f64..2.0,
            ) {
                let d = DiscreteDynamics::from_ode(Arc::new(LinearTest { dim: 2, rate: 1.0 }), 0.2, 2).unwrap();
                let cost = QuadraticCost { control_weight: 0.1, ..QuadraticCost::state_energy(2, 2) };
                let obj = EconomicObjective::new(Arc::new(cost)).with_weights(alpha, gamma).unwrap();
                let warm = ControlSequence::from_flat(warm, box1(2)).unwrap();
                let j0 = obj.total_cost(&d, &x0, &warm).unwrap().total;
                let settings = SolverSettings { max_iters: 200, ..SolverSettings::default() };
                let r = solve(&d, &obj, &x0, &warm, &settings).unwrap();
                prop_assert!(r.cost.total <= j0);
                prop_assert!(r.useq.as_flat().iter().all(|u| (-1.0..=1.0).contains(u)));
            }

            #[test]
            fn cstr_solves_stay_inside_the_box(
                x0 in (0.05f64..0.55, 0.0f64..0.15, 0.1f64..0.25),
                u in 0.049f64..0.449,
            ) {
                let x0 = [x0.0, x0.1, x0.2];
                let warm = ControlSequence::constant(&[u], 10, Cstr::bounds()).unwrap();
                let obj = neg_x2(0.1, 1.0);
                let j0 = obj.total_cost(&cstr(), &x0, &warm).unwrap().total;
                let settings = SolverSettings { max_iters: 50, ..SolverSettings::default() };
                let r = solve(&cstr(), &obj, &x0, &warm, &settings).unwrap();
                prop_assert!(r.cost.total <= j0);
                prop_assert!(r.useq.as_flat().iter().all(|v| (0.049..=0.449).contains(v)));
            }
        }
    }
}
