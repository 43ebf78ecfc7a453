//! Discrete-time dynamics `x⁺ = f(x, u)`, either native or produced by
//! fixed-step RK4 with zero-order-hold input over a sampling period `tau`.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{check_dim, EmpcError, Result};
use crate::linalg::{all_finite, axpy, distance, Mat};
use crate::scalar::{from_usize, lit, to_f64, Scalar};
use crate::sequence::ControlSequence;

/// Continuous right-hand side `ẋ = F(x, u)` with analytic Jacobians.
pub trait OdeModel<T: Scalar>: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn rhs(&self, x: &[T], u: &[T], dx: &mut [T]);
    /// Writes `∂F/∂x` (n×n) and `∂F/∂u` (n×m).
    fn jacobians(&self, x: &[T], u: &[T], jx: &mut Mat<T>, ju: &mut Mat<T>);

    /// Closed-form equilibrium for a constant input, if the model has one.
    fn equilibrium(&self, _u: &[T]) -> Option<Vec<T>> {
        None
    }
}

/// A map that is discrete by nature (no underlying ODE).
pub trait DiscreteMap<T: Scalar>: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn map(&self, x: &[T], u: &[T], out: &mut [T]);
    /// Writes `∂f/∂x` (n×n) and `∂f/∂u` (n×m).
    fn jacobians(&self, x: &[T], u: &[T], a: &mut Mat<T>, b: &mut Mat<T>);
}

/// Box `[lower, upper]` of admissible control values.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlBounds<T> {
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Scalar> ControlBounds<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        check_dim("control bounds", lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(EmpcError::InvalidArgument("control bounds must be non-empty".into()));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l <= u) {
                return Err(EmpcError::InvalidArgument(format!(
                    "control bounds need finite lower <= upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Same interval `[lower, upper]` on each of `dim` inputs.
    pub fn uniform(dim: usize, lower: T, upper: T) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn midpoint(&self) -> Vec<T> {
        let half = lit::<T>(0.5);
        self.lower.iter().zip(&self.upper).map(|(&l, &u)| half * (l + u)).collect()
    }

    pub fn contains(&self, u: &[T]) -> bool {
        u.len() == self.dim()
            && u.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, h))| l <= v && v <= h)
    }

    /// Clamps `u` into the box in place.
    pub fn project(&self, u: &mut [T]) {
        for (i, v) in u.iter_mut().enumerate() {
            let i = i % self.dim();
            *v = v.max(self.lower[i]).min(self.upper[i]);
        }
    }
}

#[derive(Clone, Debug)]
enum Kind<T: Scalar> {
    Ode { model: Arc<dyn OdeModel<T>>, substeps: usize },
    Native(Arc<dyn DiscreteMap<T>>),
}

/// Linearization of one discrete step around `(x, u)`.
#[derive(Clone, Debug)]
pub struct StepJacobians<T> {
    pub next: Vec<T>,
    /// `∂f/∂x`
    pub a: Mat<T>,
    /// `∂f/∂u`
    pub b: Mat<T>,
}

/// States `x₀ … x_N` produced by a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<Vec<T>>,
}

impl<T> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &[T] {
        self.states.last().expect("trajectory holds at least x0")
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteDynamics<T: Scalar> {
    kind: Kind<T>,
    tau: T,
}

impl<T: Scalar> DiscreteDynamics<T> {
    /// RK4 discretization of `model` with `substeps` steps of size `tau / substeps`.
    pub fn from_ode(model: Arc<dyn OdeModel<T>>, tau: T, substeps: usize) -> Result<Self> {
        if !(tau > T::zero() && tau.is_finite()) {
            return Err(EmpcError::InvalidArgument(format!("sampling period must be > 0, got {tau}")));
        }
        if substeps == 0 {
            return Err(EmpcError::InvalidArgument("substeps must be >= 1".into()));
        }
        Ok(Self { kind: Kind::Ode { model, substeps }, tau })
    }

    /// A native map. `tau` only normalizes the increment measure; use 1 when
    /// the map does not come from sampling.
    pub fn from_map(map: Arc<dyn DiscreteMap<T>>, tau: T) -> Result<Self> {
        if !(tau > T::zero() && tau.is_finite()) {
            return Err(EmpcError::InvalidArgument(format!("sampling period must be > 0, got {tau}")));
        }
        Ok(Self { kind: Kind::Native(map), tau })
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn substeps(&self) -> usize {
        match &self.kind {
            Kind::Ode { substeps, .. } => *substeps,
            Kind::Native(_) => 1,
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            Kind::Ode { model, .. } => model.state_dim(),
            Kind::Native(map) => map.state_dim(),
        }
    }

    pub fn control_dim(&self) -> usize {
        match &self.kind {
            Kind::Ode { model, .. } => model.control_dim(),
            Kind::Native(map) => map.control_dim(),
        }
    }

    pub fn model_name(&self) -> &str {
        match &self.kind {
            Kind::Ode { model, .. } => model.name(),
            Kind::Native(map) => map.name(),
        }
    }

    /// The continuous model behind this map, if any.
    pub fn ode(&self) -> Option<&Arc<dyn OdeModel<T>>> {
        match &self.kind {
            Kind::Ode { model, .. } => Some(model),
            Kind::Native(_) => None,
        }
    }

    /// Same model, different sampling period and sub-step count.
    pub fn resampled(&self, tau: T, substeps: usize) -> Result<Self> {
        match &self.kind {
            Kind::Ode { model, .. } => Self::from_ode(model.clone(), tau, substeps),
            Kind::Native(map) => Self::from_map(map.clone(), tau),
        }
    }

    fn check(&self, x: &[T], u: &[T]) -> Result<()> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("control", self.control_dim(), u.len())
    }

    fn failure(x: &[T], u: &[T]) -> EmpcError {
        EmpcError::IntegrationFailure {
            state: x.iter().map(|&v| to_f64(v)).collect(),
            control: u.iter().map(|&v| to_f64(v)).collect(),
        }
    }

    /// `f(x, u)`.
    pub fn step(&self, x: &[T], u: &[T]) -> Result<Vec<T>> {
        self.check(x, u)?;
        let next = match &self.kind {
            Kind::Ode { model, substeps } => {
                let h = self.tau / from_usize(*substeps);
                let mut y = x.to_vec();
                let mut work = Rk4Work::new(model.state_dim());
                for _ in 0..*substeps {
                    rk4_step(model.as_ref(), &mut y, u, h, &mut work);
                    if !all_finite(&y) {
                        return Err(Self::failure(x, u));
                    }
                }
                y
            }
            Kind::Native(map) => {
                let mut out = vec![T::zero(); map.state_dim()];
                map.map(x, u, &mut out);
                out
            }
        };
        if !all_finite(&next) {
            return Err(Self::failure(x, u));
        }
        Ok(next)
    }

    /// `f(x, u)` together with `∂f/∂x` and `∂f/∂u`, obtained by propagating
    /// forward sensitivities through every RK4 stage.
    pub fn step_with_jacobians(&self, x: &[T], u: &[T]) -> Result<StepJacobians<T>> {
        self.check(x, u)?;
        let n = self.state_dim();
        let m = self.control_dim();
        match &self.kind {
            Kind::Ode { model, substeps } => {
                let h = self.tau / from_usize(*substeps);
                let mut y = x.to_vec();
                let mut sx = Mat::identity(n);
                let mut su = Mat::zeros(n, m);
                let mut work = SensWork::new(n, m);
                for _ in 0..*substeps {
                    rk4_step_sens(model.as_ref(), &mut y, &mut sx, &mut su, u, h, &mut work);
                    if !all_finite(&y) || !sx.is_finite() || !su.is_finite() {
                        return Err(Self::failure(x, u));
                    }
                }
                Ok(StepJacobians { next: y, a: sx, b: su })
            }
            Kind::Native(map) => {
                let mut next = vec![T::zero(); n];
                map.map(x, u, &mut next);
                let mut a = Mat::zeros(n, n);
                let mut b = Mat::zeros(n, m);
                map.jacobians(x, u, &mut a, &mut b);
                if !all_finite(&next) || !a.is_finite() || !b.is_finite() {
                    return Err(Self::failure(x, u));
                }
                Ok(StepJacobians { next, a, b })
            }
        }
    }

    /// Vector-Jacobian products `(∂f/∂x)ᵀv` and `(∂f/∂u)ᵀv`, by reverse
    /// accumulation through the RK4 stages. Returns `f(x, u)`.
    pub fn step_vjp(&self, x: &[T], u: &[T], v: &[T], x_bar: &mut [T], u_bar: &mut [T]) -> Result<Vec<T>> {
        let mut tape = Vec::new();
        let next = self.step_taped(x, u, &mut tape)?;
        self.reverse(&tape, x, u, v, x_bar, u_bar)?;
        Ok(next)
    }

    /// `f(x, u)`, recording the RK4 stage points into `tape`.
    pub(crate) fn step_taped(&self, x: &[T], u: &[T], tape: &mut Vec<T>) -> Result<Vec<T>> {
        self.check(x, u)?;
        let Kind::Ode { model, substeps } = &self.kind else {
            tape.clear();
            return self.step(x, u);
        };
        let n = x.len();
        let h = self.tau / from_usize(*substeps);
        let half = lit::<T>(0.5) * h;
        let sixth = h / lit(6.0);
        tape.clear();
        tape.resize(substeps * 4 * n, T::zero());
        let mut y = x.to_vec();
        let mut work = Rk4Work::new(n);
        for j in 0..*substeps {
            let base = j * 4 * n;
            tape[base..base + n].copy_from_slice(&y);
            model.rhs(&y, u, &mut work.k[0]);
            for stage in 1..4 {
                let c = if stage == 3 { h } else { half };
                let p = &mut tape[base + stage * n..base + (stage + 1) * n];
                p.copy_from_slice(&y);
                axpy(c, &work.k[stage - 1], p);
                model.rhs(p, u, &mut work.k[stage]);
            }
            for i in 0..n {
                y[i] = y[i] + sixth * (work.k[0][i] + lit::<T>(2.0) * (work.k[1][i] + work.k[2][i]) + work.k[3][i]);
            }
            if !all_finite(&y) {
                return Err(Self::failure(x, u));
            }
        }
        Ok(y)
    }

    /// Reverse sweep over a tape written by [`Self::step_taped`] at `(x, u)`.
    pub(crate) fn reverse(&self, tape: &[T], x: &[T], u: &[T], v: &[T], x_bar: &mut [T], u_bar: &mut [T]) -> Result<()> {
        let n = self.state_dim();
        let m = self.control_dim();
        check_dim("adjoint seed", n, v.len())?;
        check_dim("state adjoint", n, x_bar.len())?;
        check_dim("control adjoint", m, u_bar.len())?;
        match &self.kind {
            Kind::Ode { model, substeps } => {
                let h = self.tau / from_usize(*substeps);
                let half = lit::<T>(0.5) * h;
                let mut jx = Mat::zeros(n, n);
                let mut ju = Mat::zeros(n, m);
                let mut adj = v.to_vec();
                let mut k_bar: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); n]);
                let mut p_bar = vec![T::zero(); n];
                let mut tmp_u = vec![T::zero(); m];
                u_bar.iter_mut().for_each(|b| *b = T::zero());
                let weights = [h / lit(6.0), h / lit(3.0), h / lit(3.0), h / lit(6.0)];
                for j in (0..*substeps).rev() {
                    let base = j * 4 * n;
                    for (kb, &w) in k_bar.iter_mut().zip(&weights) {
                        for i in 0..n {
                            kb[i] = w * adj[i];
                        }
                    }
                    for stage in (0..4).rev() {
                        let p = &tape[base + stage * n..base + (stage + 1) * n];
                        jx.fill_zero();
                        ju.fill_zero();
                        model.jacobians(p, u, &mut jx, &mut ju);
                        jx.tr_mul_vec(&k_bar[stage], &mut p_bar);
                        ju.tr_mul_vec(&k_bar[stage], &mut tmp_u);
                        axpy(T::one(), &tmp_u, u_bar);
                        axpy(T::one(), &p_bar, &mut adj);
                        if stage > 0 {
                            let c = if stage == 3 { h } else { half };
                            axpy(c, &p_bar, &mut k_bar[stage - 1]);
                        }
                    }
                }
                x_bar.copy_from_slice(&adj);
            }
            Kind::Native(map) => {
                let mut a = Mat::zeros(n, n);
                let mut b = Mat::zeros(n, m);
                map.jacobians(x, u, &mut a, &mut b);
                a.tr_mul_vec(v, x_bar);
                b.tr_mul_vec(v, u_bar);
            }
        }
        if !all_finite(x_bar) || !all_finite(u_bar) {
            return Err(Self::failure(x, u));
        }
        Ok(())
    }

    /// Increment measure `‖f(x,u) − x‖₂ / τ`.
    pub fn delta(&self, x: &[T], u: &[T]) -> Result<T> {
        let next = self.step(x, u)?;
        Ok(distance(&next, x) / self.tau)
    }

    /// States `x₀ … x_N` under `u₀ … u_{N−1}`; the terminal input `u_N`
    /// does not move the trajectory.
    pub fn rollout(&self, x0: &[T], useq: &ControlSequence<T>) -> Result<Trajectory<T>> {
        check_dim("initial state", self.state_dim(), x0.len())?;
        check_dim("control sequence", self.control_dim(), useq.control_dim())?;
        let horizon = useq.horizon();
        let mut states = Vec::with_capacity(horizon + 1);
        states.push(x0.to_vec());
        for k in 0..horizon {
            let next = self
                .step(&states[k], useq.get(k))
                .map_err(|e| EmpcError::RolloutFailure { index: k, source: Box::new(e) })?;
            states.push(next);
        }
        Ok(Trajectory { states })
    }
}

struct Rk4Work<T> {
    k: [Vec<T>; 4],
    p: Vec<T>,
}

impl<T: Scalar> Rk4Work<T> {
    fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![T::zero(); n]), p: vec![T::zero(); n] }
    }
}

fn rk4_step<T: Scalar>(model: &dyn OdeModel<T>, y: &mut [T], u: &[T], h: T, w: &mut Rk4Work<T>) {
    let half = lit::<T>(0.5) * h;
    let sixth = h / lit(6.0);
    model.rhs(y, u, &mut w.k[0]);
    for stage in 1..4 {
        let c = if stage == 3 { h } else { half };
        w.p.copy_from_slice(y);
        axpy(c, &w.k[stage - 1], &mut w.p);
        model.rhs(&w.p, u, &mut w.k[stage]);
    }
    for i in 0..y.len() {
        y[i] = y[i] + sixth * (w.k[0][i] + lit::<T>(2.0) * (w.k[1][i] + w.k[2][i]) + w.k[3][i]);
    }
}

struct SensWork<T> {
    k: [Vec<T>; 4],
    dkx: [Mat<T>; 4],
    dku: [Mat<T>; 4],
    p: Vec<T>,
    px: Mat<T>,
    pu: Mat<T>,
    jx: Mat<T>,
    ju: Mat<T>,
}

impl<T: Scalar> SensWork<T> {
    fn new(n: usize, m: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![T::zero(); n]),
            dkx: std::array::from_fn(|_| Mat::zeros(n, n)),
            dku: std::array::from_fn(|_| Mat::zeros(n, m)),
            p: vec![T::zero(); n],
            px: Mat::zeros(n, n),
            pu: Mat::zeros(n, m),
            jx: Mat::zeros(n, n),
            ju: Mat::zeros(n, m),
        }
    }
}

/// One RK4 step of `y` together with `sx = ∂y/∂x₀` and `su = ∂y/∂u`.
fn rk4_step_sens<T: Scalar>(
    model: &dyn OdeModel<T>,
    y: &mut [T],
    sx: &mut Mat<T>,
    su: &mut Mat<T>,
    u: &[T],
    h: T,
    w: &mut SensWork<T>,
) {
    let half = lit::<T>(0.5) * h;
    let sixth = h / lit(6.0);
    for stage in 0..4 {
        let c = match stage {
            0 => T::zero(),
            3 => h,
            _ => half,
        };
        w.p.copy_from_slice(y);
        w.px.copy_from(sx);
        w.pu.copy_from(su);
        if stage > 0 {
            axpy(c, &w.k[stage - 1], &mut w.p);
            w.px.add_scaled(c, &w.dkx[stage - 1]);
            w.pu.add_scaled(c, &w.dku[stage - 1]);
        }
        model.rhs(&w.p, u, &mut w.k[stage]);
        w.jx.fill_zero();
        w.ju.fill_zero();
        model.jacobians(&w.p, u, &mut w.jx, &mut w.ju);
        w.jx.matmul_into(&w.px, &mut w.dkx[stage]);
        w.jx.matmul_into(&w.pu, &mut w.dku[stage]);
        w.dku[stage].add_scaled(T::one(), &w.ju);
    }
    let two = lit::<T>(2.0);
    for i in 0..y.len() {
        y[i] = y[i] + sixth * (w.k[0][i] + two * (w.k[1][i] + w.k[2][i]) + w.k[3][i]);
    }
    for (stage, weight) in [(0, T::one()), (1, two), (2, two), (3, T::one())] {
        sx.add_scaled(sixth * weight, &w.dkx[stage]);
        su.add_scaled(sixth * weight, &w.dku[stage]);
    }
}
