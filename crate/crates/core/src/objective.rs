//! Economic stage cost, exact soft-constraint penalty, increment penalty and
//! the open-loop cost
//!
//! ```text
//! J(u, x) = γ [ℓ_N + α Δ_N] + Σ_{k<N} [ℓ_k + α Δ_k]
//! ```
//!
//! where `Δ_k = ‖x_{k+1} − x_k‖ / τ`. The terminal increment `Δ_N` needs one
//! dynamics step beyond the horizon, so a cost evaluation performs `N + 1`
//! steps.

use std::fmt::Debug;
use std::sync::Arc;

use crate::dynamics::DiscreteDynamics;
use crate::error::{check_dim, EmpcError, Result};
use crate::linalg::{distance, dot};
use crate::scalar::{from_usize, lit, Scalar};
use crate::sequence::ControlSequence;

/// Economic stage cost `ℓ(x, u)` with its gradient.
pub trait StageCost<T: Scalar>: Send + Sync + Debug {
    fn value(&self, x: &[T], u: &[T]) -> T;
    /// Accumulates `∂ℓ/∂x` into `gx` and `∂ℓ/∂u` into `gu`.
    fn add_gradient(&self, x: &[T], u: &[T], gx: &mut [T], gu: &mut [T]);
}

/// `ℓ(x, u) = wᵀx`. The CSTR's `ℓ = −x₂` is `w = (0, −1, 0)`.
#[derive(Clone, Debug)]
pub struct LinearStateCost<T> {
    pub weights: Vec<T>,
}

impl<T: Scalar> LinearStateCost<T> {
    /// `ℓ = −x_index` in a state of dimension `dim`.
    pub fn negated_component(index: usize, dim: usize) -> Self {
        let mut weights = vec![T::zero(); dim];
        weights[index] = -T::one();
        Self { weights }
    }
}

impl<T: Scalar> StageCost<T> for LinearStateCost<T> {
    fn value(&self, x: &[T], _u: &[T]) -> T {
        dot(&self.weights, x)
    }

    fn add_gradient(&self, _x: &[T], _u: &[T], gx: &mut [T], _gu: &mut [T]) {
        for (g, &w) in gx.iter_mut().zip(&self.weights) {
            *g = *g + w;
        }
    }
}

/// `ℓ(x, u) = q_x ‖x − x_ref‖² + q_u ‖u − u_ref‖²`.
#[derive(Clone, Debug)]
pub struct QuadraticCost<T> {
    pub state_weight: T,
    pub state_ref: Vec<T>,
    pub control_weight: T,
    pub control_ref: Vec<T>,
}

impl<T: Scalar> QuadraticCost<T> {
    /// `‖u‖²`
    pub fn control_energy(n: usize, m: usize) -> Self {
        Self {
            state_weight: T::zero(),
            state_ref: vec![T::zero(); n],
            control_weight: T::one(),
            control_ref: vec![T::zero(); m],
        }
    }

    /// `‖x‖²`
    pub fn state_energy(n: usize, m: usize) -> Self {
        Self {
            state_weight: T::one(),
            state_ref: vec![T::zero(); n],
            control_weight: T::zero(),
            control_ref: vec![T::zero(); m],
        }
    }
}

impl<T: Scalar> StageCost<T> for QuadraticCost<T> {
    fn value(&self, x: &[T], u: &[T]) -> T {
        let ex = distance(x, &self.state_ref);
        let eu = distance(u, &self.control_ref);
        self.state_weight * ex * ex + self.control_weight * eu * eu
    }

    fn add_gradient(&self, x: &[T], u: &[T], gx: &mut [T], gu: &mut [T]) {
        let two = lit::<T>(2.0);
        for i in 0..x.len() {
            gx[i] = gx[i] + two * self.state_weight * (x[i] - self.state_ref[i]);
        }
        for i in 0..u.len() {
            gu[i] = gu[i] + two * self.control_weight * (u[i] - self.control_ref[i]);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConstantCost<T>(pub T);

impl<T: Scalar> StageCost<T> for ConstantCost<T> {
    fn value(&self, _x: &[T], _u: &[T]) -> T {
        self.0
    }

    fn add_gradient(&self, _x: &[T], _u: &[T], _gx: &mut [T], _gu: &mut [T]) {}
}

/// Names accepted by [`build_stage_cost`].
pub const STAGE_COST_NAMES: [&str; 4] = ["neg_x2", "state_energy", "control_energy", "quadratic"];

/// Resolves a stage cost by name for a model with `n` states and `m` inputs.
/// `quadratic` is `‖x‖² + ‖u‖²`.
pub fn build_stage_cost<T: Scalar>(name: &str, n: usize, m: usize) -> Result<Arc<dyn StageCost<T>>> {
    Ok(match name {
        "neg_x2" => {
            if n < 2 {
                return Err(EmpcError::InvalidArgument(format!("neg_x2 needs at least 2 states, model has {n}")));
            }
            Arc::new(LinearStateCost::negated_component(1, n))
        }
        "state_energy" => Arc::new(QuadraticCost::state_energy(n, m)),
        "control_energy" => Arc::new(QuadraticCost::control_energy(n, m)),
        "quadratic" => Arc::new(QuadraticCost { control_weight: T::one(), ..QuadraticCost::state_energy(n, m) }),
        _ => return Err(EmpcError::UnknownName { kind: "stage cost", name: name.to_string() }),
    })
}

/// Affine state constraint `g(x) = aᵀx − b ≤ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineConstraint<T> {
    pub coeffs: Vec<T>,
    pub bound: T,
}

impl<T: Scalar> AffineConstraint<T> {
    /// `x_index ≤ value`
    pub fn upper(index: usize, dim: usize, value: T) -> Self {
        let mut coeffs = vec![T::zero(); dim];
        coeffs[index] = T::one();
        Self { coeffs, bound: value }
    }

    /// `x_index ≥ value`
    pub fn lower(index: usize, dim: usize, value: T) -> Self {
        let mut coeffs = vec![T::zero(); dim];
        coeffs[index] = -T::one();
        Self { coeffs, bound: -value }
    }

    pub fn eval(&self, x: &[T]) -> T {
        dot(&self.coeffs, x) - self.bound
    }
}

/// Stage cost, exact penalty and the `(α, γ)` weights of the open-loop cost.
#[derive(Clone, Debug)]
pub struct EconomicObjective<T: Scalar> {
    stage_cost: Arc<dyn StageCost<T>>,
    constraints: Vec<AffineConstraint<T>>,
    rho: T,
    alpha: T,
    gamma: T,
    ell_shift: T,
}

/// Pieces of `J`: `total = running + weighted_terminal`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostBreakdown<T> {
    pub total: T,
    /// `V = Σ_{k<N} [ℓ_k + α Δ_k]`
    pub running: T,
    /// `Ψ_N = ℓ_N + α Δ_N`
    pub terminal: T,
    /// `γ Ψ_N`
    pub weighted_terminal: T,
    /// `ℓ_N` (effective stage cost at the terminal pair)
    pub terminal_ell: T,
    /// `Δ_N`
    pub terminal_delta: T,
}

impl<T: Scalar> EconomicObjective<T> {
    pub fn new(stage_cost: Arc<dyn StageCost<T>>) -> Self {
        Self {
            stage_cost,
            constraints: Vec::new(),
            rho: T::zero(),
            alpha: T::zero(),
            gamma: T::zero(),
            ell_shift: T::zero(),
        }
    }

    fn nonneg(name: &str, v: T) -> Result<T> {
        if v >= T::zero() && v.is_finite() {
            Ok(v)
        } else {
            Err(EmpcError::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")))
        }
    }

    pub fn with_weights(mut self, alpha: T, gamma: T) -> Result<Self> {
        self.alpha = Self::nonneg("alpha", alpha)?;
        self.gamma = Self::nonneg("gamma", gamma)?;
        Ok(self)
    }

    pub fn with_soft_constraints(mut self, constraints: Vec<AffineConstraint<T>>, rho: T) -> Result<Self> {
        self.rho = Self::nonneg("rho", rho)?;
        self.constraints = constraints;
        Ok(self)
    }

    pub fn with_ell_shift(mut self, shift: T) -> Self {
        self.ell_shift = shift;
        self
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn ell_shift(&self) -> T {
        self.ell_shift
    }

    pub fn constraints(&self) -> &[AffineConstraint<T>] {
        &self.constraints
    }

    pub fn stage_cost(&self) -> &Arc<dyn StageCost<T>> {
        &self.stage_cost
    }

    /// `ℓ(x,u) + ρ Σᵢ max{0, gᵢ(x)} + shift`.
    pub fn effective_stage(&self, x: &[T], u: &[T]) -> T {
        let penalty: T = self.constraints.iter().map(|c| c.eval(x).max(T::zero())).sum();
        self.stage_cost.value(x, u) + self.rho * penalty + self.ell_shift
    }

    /// Gradient of [`effective_stage`](Self::effective_stage); on a kink of
    /// the penalty (`gᵢ = 0`) the zero one-sided derivative is used.
    pub fn add_effective_stage_gradient(&self, x: &[T], u: &[T], gx: &mut [T], gu: &mut [T]) {
        self.stage_cost.add_gradient(x, u, gx, gu);
        for c in &self.constraints {
            if c.eval(x) > T::zero() {
                for (g, &a) in gx.iter_mut().zip(&c.coeffs) {
                    *g = *g + self.rho * a;
                }
            }
        }
    }

    /// `(ℓ_eff(x,u), Δ(x,u))`.
    pub fn stage(&self, dynamics: &DiscreteDynamics<T>, x: &[T], u: &[T]) -> Result<(T, T)> {
        let delta = dynamics.delta(x, u)?;
        Ok((self.effective_stage(x, u), delta))
    }

    /// Open-loop cost of `useq` from `x0`.
    pub fn total_cost(
        &self,
        dynamics: &DiscreteDynamics<T>,
        x0: &[T],
        useq: &ControlSequence<T>,
    ) -> Result<CostBreakdown<T>> {
        check_dim("control sequence", dynamics.control_dim(), useq.control_dim())?;
        self.total_cost_stacked(dynamics, x0, useq.as_flat())
    }

    /// Same as [`total_cost`](Self::total_cost) on a stacked `[u₀; …; u_N]`
    /// that is not required to lie inside the control box.
    pub fn total_cost_stacked(
        &self,
        dynamics: &DiscreteDynamics<T>,
        x0: &[T],
        stacked: &[T],
    ) -> Result<CostBreakdown<T>> {
        check_dim("initial state", dynamics.state_dim(), x0.len())?;
        let m = dynamics.control_dim();
        if stacked.is_empty() || stacked.len() % m != 0 {
            return Err(EmpcError::InvalidArgument(format!(
                "stacked control length {} is not a positive multiple of m = {m}",
                stacked.len()
            )));
        }
        let horizon = stacked.len() / m - 1;
        let tau = dynamics.tau();
        let mut running = T::zero();
        let mut x = x0.to_vec();
        for (k, u) in stacked.chunks(m).take(horizon).enumerate() {
            let next = dynamics
                .step(&x, u)
                .map_err(|e| EmpcError::RolloutFailure { index: k, source: Box::new(e) })?;
            let delta = distance(&next, &x) / tau;
            running = running + self.effective_stage(&x, u) + self.alpha * delta;
            x = next;
        }
        let u_n = &stacked[horizon * m..];
        let beyond = dynamics
            .step(&x, u_n)
            .map_err(|e| EmpcError::RolloutFailure { index: horizon, source: Box::new(e) })?;
        let terminal_delta = distance(&beyond, &x) / tau;
        let terminal_ell = self.effective_stage(&x, u_n);
        let terminal = terminal_ell + self.alpha * terminal_delta;
        let weighted_terminal = self.gamma * terminal;
        Ok(CostBreakdown {
            total: running + weighted_terminal,
            running,
            terminal,
            weighted_terminal,
            terminal_ell,
            terminal_delta,
        })
    }

    /// Checks that adding `c` to `ℓ` shifts `J` by exactly `c (N + γ)`
    /// (relative tolerance 1e-9).
    pub fn shift_invariance_check(
        &self,
        dynamics: &DiscreteDynamics<T>,
        x0: &[T],
        useq: &ControlSequence<T>,
        c: T,
    ) -> Result<bool> {
        let base = self.clone().with_ell_shift(T::zero()).total_cost(dynamics, x0, useq)?;
        let shifted = self.clone().with_ell_shift(c).total_cost(dynamics, x0, useq)?;
        let expected = base.total + c * (from_usize::<T>(useq.horizon()) + self.gamma);
        let scale = T::one().max(expected.abs()).max(shifted.total.abs());
        Ok((shifted.total - expected).abs() <= lit::<T>(1e-9) * scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ControlBounds;
    use crate::models::{Cstr, Integrator};

    const XS: [f64; 3] = [0.0832, 0.0846, 0.149];

    fn cstr(tau: f64) -> DiscreteDynamics<f64> {
        DiscreteDynamics::from_ode(Arc::new(Cstr::default()), tau, 4).unwrap()
    }

    fn identity(dim: usize) -> DiscreteDynamics<f64> {
        DiscreteDynamics::from_ode(Arc::new(Integrator { dim, gain: 0.0 }), 0.1, 1).unwrap()
    }

    fn neg_x2() -> EconomicObjective<f64> {
        EconomicObjective::new(Arc::new(LinearStateCost::negated_component(1, 3)))
    }

    #[test]
    fn stage_cost_registry_resolves_every_name() {
        for name in STAGE_COST_NAMES {
            let c = build_stage_cost::<f64>(name, 3, 1).unwrap();
            assert!(c.value(&[1.0, 2.0, 3.0], &[0.5]).is_finite());
        }
        let q = build_stage_cost::<f64>("quadratic", 2, 1).unwrap();
        assert_eq!(q.value(&[1.0, 2.0], &[3.0]), 14.0);
        assert!(build_stage_cost::<f64>("neg_x2", 1, 1).is_err());
        assert!(matches!(build_stage_cost::<f64>("nope", 3, 1), Err(EmpcError::UnknownName { .. })));
    }

    #[test]
    fn stage_cost_at_reported_steady_pair() {
        let (ell, _) = neg_x2().stage(&cstr(0.1), &XS, &[0.149]).unwrap();
        assert!((ell + 0.0846).abs() < 1e-15);
    }

    #[test]
    fn rho_has_no_effect_without_constraints() {
        let obj = neg_x2().with_soft_constraints(vec![], 100.0).unwrap();
        assert_eq!(obj.effective_stage(&XS, &[0.149]), neg_x2().effective_stage(&XS, &[0.149]));
    }

    #[test]
    fn exact_penalty_adds_rho_times_violation() {
        let g = AffineConstraint::upper(0, 3, 0.05);
        let obj = neg_x2().with_soft_constraints(vec![g], 10.0).unwrap();
        let extra = obj.effective_stage(&XS, &[0.149]) - neg_x2().effective_stage(&XS, &[0.149]);
        assert!((extra - 0.332).abs() < 1e-12);
        // Inactive constraint adds nothing.
        let x = [0.01, 0.0846, 0.149];
        assert_eq!(obj.effective_stage(&x, &[0.149]), neg_x2().effective_stage(&x, &[0.149]));
    }

    #[test]
    fn constant_stage_cost_without_weights_sums_over_horizon() {
        let obj = EconomicObjective::new(Arc::new(ConstantCost(0.7)));
        let b = Cstr::bounds();
        let useq = ControlSequence::constant(&[0.2], 20, b).unwrap();
        let cost = obj.total_cost(&cstr(0.1), &[0.5, 0.1, 0.2], &useq).unwrap();
        assert!((cost.total - 20.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn identity_dynamics_with_zero_cost_is_free() {
        let obj = EconomicObjective::new(Arc::new(ConstantCost(0.0))).with_weights(3.0, 5.0).unwrap();
        let b = ControlBounds::uniform(2, -1.0, 1.0).unwrap();
        let useq = ControlSequence::new(vec![vec![0.3, -0.9], vec![1.0, 0.0], vec![-1.0, 0.5]], b).unwrap();
        let cost = obj.total_cost(&identity(2), &[4.0, -2.0], &useq).unwrap();
        assert_eq!(cost.total, 0.0);
    }

    #[test]
    fn breakdown_is_consistent() {
        let obj = neg_x2().with_weights(0.01, 0.5).unwrap();
        let useq = ControlSequence::constant(&[0.3], 20, Cstr::bounds()).unwrap();
        let c = obj.total_cost(&cstr(0.1), &[0.5, 0.1, 0.2], &useq).unwrap();
        assert_eq!(c.total, c.running + c.weighted_terminal);
        assert_eq!(c.weighted_terminal, 0.5 * c.terminal);
        assert_eq!(c.terminal, c.terminal_ell + 0.01 * c.terminal_delta);
    }

    #[test]
    fn total_cost_matches_stagewise_reassembly() {
        let dynamics = cstr(0.1);
        let obj = neg_x2().with_weights(0.2, 3.0).unwrap();
        let useq = ControlSequence::new(
            (0..11).map(|k| vec![0.05 + 0.035 * k as f64]).collect(),
            Cstr::bounds(),
        )
        .unwrap();
        let x0 = [0.5, 0.1, 0.2];
        let traj = dynamics.rollout(&x0, &useq).unwrap();
        let mut expected = 0.0;
        for k in 0..10 {
            let (ell, delta) = obj.stage(&dynamics, &traj.states[k], useq.get(k)).unwrap();
            expected += ell + 0.2 * delta;
        }
        let (ell_n, delta_n) = obj.stage(&dynamics, traj.last(), useq.get(10)).unwrap();
        expected += 3.0 * (ell_n + 0.2 * delta_n);
        let got = obj.total_cost(&dynamics, &x0, &useq).unwrap().total;
        assert!((got - expected).abs() < 1e-13, "{got} vs {expected}");
    }

    #[test]
    fn shift_invariance_offsets() {
        let dynamics = cstr(0.1);
        let useq = ControlSequence::constant(&[0.149], 20, Cstr::bounds()).unwrap();
        let x0 = [0.5, 0.1, 0.2];
        let obj = neg_x2().with_weights(0.01, 1.0).unwrap();
        assert!(obj.shift_invariance_check(&dynamics, &x0, &useq, 0.0).unwrap());
        assert!(obj.shift_invariance_check(&dynamics, &x0, &useq, 1.0).unwrap());
        let base = obj.total_cost(&dynamics, &x0, &useq).unwrap().total;
        let shifted = obj.clone().with_ell_shift(1.0).total_cost(&dynamics, &x0, &useq).unwrap().total;
        assert!((shifted - base - 21.0).abs() < 1e-12);
        // Normalizing by the steady value ℓ_s = −0.0846.
        let obj = neg_x2().with_weights(0.01, 0.001).unwrap();
        assert!(obj.shift_invariance_check(&dynamics, &x0, &useq, 0.0846).unwrap());
        let shifted = obj.clone().with_ell_shift(0.0846).total_cost(&dynamics, &x0, &useq).unwrap().total;
        let base = obj.total_cost(&dynamics, &x0, &useq).unwrap().total;
        assert!((shifted - base - 20.001 * 0.0846).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(neg_x2().with_weights(-1.0, 0.0).is_err());
        assert!(neg_x2().with_weights(0.0, f64::NAN).is_err());
        assert!(neg_x2().with_soft_constraints(vec![], -2.0).is_err());
    }
}
