//! Concrete plant models and a name-keyed registry.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::dynamics::{ControlBounds, OdeModel};
use crate::error::{EmpcError, Result};
use crate::linalg::Mat;
use crate::scalar::{lit, Scalar};

/// Isothermal-in-form, dimensionless CSTR with parallel reactions
/// `R → P₁`, `R → P₂`. States: reactant concentration, product concentration,
/// temperature. Input: heat flow.
#[derive(Clone, Debug)]
pub struct Cstr<T> {
    /// Pre-exponential factor of the desired reaction.
    pub k1: T,
    /// Activation temperature of the desired reaction.
    pub e1: T,
    /// Pre-exponential factor of the waste reaction.
    pub k2: T,
    /// Activation temperature of the waste reaction.
    pub e2: T,
}

impl<T: Scalar> Default for Cstr<T> {
    fn default() -> Self {
        Self { k1: lit(1.0e4), e1: lit(1.0), k2: lit(400.0), e2: lit(0.55) }
    }
}

impl<T: Scalar> Cstr<T> {
    /// Admissible heat-flow range.
    pub fn bounds() -> ControlBounds<T> {
        ControlBounds::uniform(1, lit(0.049), lit(0.449)).expect("valid box")
    }

    fn rates(&self, x: &[T]) -> (T, T) {
        let a1 = (-self.e1 / x[2]).exp();
        let a2 = (-self.e2 / x[2]).exp();
        (a1, a2)
    }
}

impl<T: Scalar> OdeModel<T> for Cstr<T> {
    fn name(&self) -> &str {
        "cstr"
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn rhs(&self, x: &[T], u: &[T], dx: &mut [T]) {
        let (a1, a2) = self.rates(x);
        let r1 = self.k1 * x[0] * x[0] * a1;
        let r2 = self.k2 * x[0] * a2;
        dx[0] = T::one() - r1 - r2 - x[0];
        dx[1] = r1 - x[1];
        dx[2] = u[0] - x[2];
    }

    fn jacobians(&self, x: &[T], _u: &[T], jx: &mut Mat<T>, ju: &mut Mat<T>) {
        let (a1, a2) = self.rates(x);
        let two = lit::<T>(2.0);
        let t2 = x[2] * x[2];
        let dr1_dx1 = two * self.k1 * x[0] * a1;
        let dr1_dx3 = self.k1 * x[0] * x[0] * a1 * self.e1 / t2;
        let dr2_dx1 = self.k2 * a2;
        let dr2_dx3 = self.k2 * x[0] * a2 * self.e2 / t2;
        jx.fill_zero();
        jx[(0, 0)] = -dr1_dx1 - dr2_dx1 - T::one();
        jx[(0, 2)] = -dr1_dx3 - dr2_dx3;
        jx[(1, 0)] = dr1_dx1;
        jx[(1, 1)] = -T::one();
        jx[(1, 2)] = dr1_dx3;
        jx[(2, 2)] = -T::one();
        ju.fill_zero();
        ju[(2, 0)] = T::one();
    }

    /// `x₃ = u`; `x₁` is the positive root of
    /// `a x₁² + (1 + b) x₁ − 1 = 0` with `a = k1 e^{−e1/u}`, `b = k2 e^{−e2/u}`;
    /// `x₂ = a x₁²`.
    fn equilibrium(&self, u: &[T]) -> Option<Vec<T>> {
        let temp = u[0];
        if !(temp > T::zero()) {
            return None;
        }
        let a = self.k1 * (-self.e1 / temp).exp();
        let b = self.k2 * (-self.e2 / temp).exp();
        let p = T::one() + b;
        // Rationalized root, stable when a is small.
        let x1 = lit::<T>(2.0) / (p + (p * p + lit::<T>(4.0) * a).sqrt());
        Some(vec![x1, a * x1 * x1, temp])
    }
}

/// `ẋ = gain · u`, one input per state. `gain = 0` gives the identity map.
#[derive(Clone, Debug)]
pub struct Integrator<T> {
    pub dim: usize,
    pub gain: T,
}

impl<T: Scalar> OdeModel<T> for Integrator<T> {
    fn name(&self) -> &str {
        "integrator"
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn control_dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, _x: &[T], u: &[T], dx: &mut [T]) {
        for (d, &ui) in dx.iter_mut().zip(u) {
            *d = self.gain * ui;
        }
    }

    fn jacobians(&self, _x: &[T], _u: &[T], jx: &mut Mat<T>, ju: &mut Mat<T>) {
        jx.fill_zero();
        ju.fill_zero();
        for i in 0..self.dim {
            ju[(i, i)] = self.gain;
        }
    }
}

/// `ẋ = −rate · x + u`, one input per state.
#[derive(Clone, Debug)]
pub struct LinearTest<T> {
    pub dim: usize,
    pub rate: T,
}

impl<T: Scalar> OdeModel<T> for LinearTest<T> {
    fn name(&self) -> &str {
        "linear-test"
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn control_dim(&self) -> usize {
        self.dim
    }

    fn rhs(&self, x: &[T], u: &[T], dx: &mut [T]) {
        for i in 0..self.dim {
            dx[i] = u[i] - self.rate * x[i];
        }
    }

    fn jacobians(&self, _x: &[T], _u: &[T], jx: &mut Mat<T>, ju: &mut Mat<T>) {
        jx.fill_zero();
        ju.fill_zero();
        for i in 0..self.dim {
            jx[(i, i)] = -self.rate;
            ju[(i, i)] = T::one();
        }
    }

    fn equilibrium(&self, u: &[T]) -> Option<Vec<T>> {
        if self.rate == T::zero() {
            return None;
        }
        Some(u.iter().map(|&v| v / self.rate).collect())
    }
}

/// Numeric model parameters by name, as read from a config file.
pub type ModelParams = BTreeMap<String, f64>;

/// A model resolved from the registry, with its defaults.
#[derive(Clone, Debug)]
pub struct ModelEntry<T: Scalar> {
    pub model: Arc<dyn OdeModel<T>>,
    pub bounds: ControlBounds<T>,
    pub default_x0: Vec<T>,
}

/// Names accepted by [`build_model`].
pub const MODEL_NAMES: [&str; 3] = ["cstr", "integrator", "linear-test"];

fn param(params: &ModelParams, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn dim_param(params: &ModelParams) -> Result<usize> {
    let d = param(params, "dim", 1.0);
    if d < 1.0 || d.fract() != 0.0 {
        return Err(EmpcError::InvalidArgument(format!("model dim must be a positive integer, got {d}")));
    }
    Ok(d as usize)
}

/// Resolves a model by name. Unknown parameter keys are rejected.
pub fn build_model<T: Scalar>(name: &str, params: &ModelParams) -> Result<ModelEntry<T>> {
    let allowed: &[&str] = match name {
        "cstr" => &["k1", "e1", "k2", "e2"],
        "integrator" => &["dim", "gain", "bound"],
        "linear-test" => &["dim", "rate", "bound"],
        _ => return Err(EmpcError::UnknownName { kind: "model", name: name.to_string() }),
    };
    if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(EmpcError::InvalidArgument(format!("unknown parameter `{bad}` for model `{name}`")));
    }
    let entry = match name {
        "cstr" => {
            let d = Cstr::<f64>::default();
            let model = Cstr {
                k1: lit(param(params, "k1", d.k1)),
                e1: lit(param(params, "e1", d.e1)),
                k2: lit(param(params, "k2", d.k2)),
                e2: lit(param(params, "e2", d.e2)),
            };
            ModelEntry {
                model: Arc::new(model),
                bounds: Cstr::bounds(),
                default_x0: vec![lit(0.5), lit(0.1), lit(0.2)],
            }
        }
        "integrator" => {
            let dim = dim_param(params)?;
            let bound = param(params, "bound", 1.0);
            ModelEntry {
                model: Arc::new(Integrator { dim, gain: lit(param(params, "gain", 1.0)) }),
                bounds: ControlBounds::uniform(dim, lit(-bound), lit(bound))?,
                default_x0: vec![T::one(); dim],
            }
        }
        _ => {
            let dim = dim_param(params)?;
            let bound = param(params, "bound", 1.0);
            ModelEntry {
                model: Arc::new(LinearTest { dim, rate: lit(param(params, "rate", 1.0)) }),
                bounds: ControlBounds::uniform(dim, lit(-bound), lit(bound))?,
                default_x0: vec![T::one(); dim],
            }
        }
    };
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_jacobians(model: &dyn OdeModel<f64>, x: &[f64], u: &[f64]) -> (Mat<f64>, Mat<f64>) {
        let n = model.state_dim();
        let m = model.control_dim();
        let mut jx = Mat::zeros(n, n);
        let mut ju = Mat::zeros(n, m);
        let h = 1e-7;
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            model.rhs(&xp, u, &mut fp);
            model.rhs(&xm, u, &mut fm);
            for i in 0..n {
                jx[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        for j in 0..m {
            let mut up = u.to_vec();
            let mut um = u.to_vec();
            up[j] += h;
            um[j] -= h;
            model.rhs(x, &up, &mut fp);
            model.rhs(x, &um, &mut fm);
            for i in 0..n {
                ju[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        (jx, ju)
    }

    #[test]
    fn cstr_jacobians_match_finite_differences() {
        let model = Cstr::<f64>::default();
        for (x, u) in [([0.5, 0.1, 0.2], 0.149), ([0.08, 0.09, 0.3], 0.4), ([0.9, 0.0, 0.06], 0.05)] {
            let mut jx = Mat::zeros(3, 3);
            let mut ju = Mat::zeros(3, 1);
            model.jacobians(&x, &[u], &mut jx, &mut ju);
            let (fx, fu) = fd_jacobians(&model, &x, &[u]);
            for i in 0..3 {
                for j in 0..3 {
                    let scale = 1.0f64.max(fx[(i, j)].abs());
                    assert!((jx[(i, j)] - fx[(i, j)]).abs() < 1e-6 * scale, "({i},{j})");
                }
                assert!((ju[(i, 0)] - fu[(i, 0)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn cstr_closed_form_equilibrium_zeroes_rhs() {
        let model = Cstr::<f64>::default();
        for u in [0.049, 0.149, 0.3, 0.449] {
            let x = model.equilibrium(&[u]).unwrap();
            let mut dx = [0.0; 3];
            model.rhs(&x, &[u], &mut dx);
            assert!(dx.iter().all(|v| v.abs() < 1e-12), "u = {u}: {dx:?}");
        }
    }

    #[test]
    fn registry_resolves_known_names_and_rejects_others() {
        for name in MODEL_NAMES {
            let entry = build_model::<f64>(name, &ModelParams::new()).unwrap();
            assert_eq!(entry.model.name(), name);
            assert_eq!(entry.default_x0.len(), entry.model.state_dim());
        }
        assert!(matches!(
            build_model::<f64>("tank", &ModelParams::new()),
            Err(EmpcError::UnknownName { .. })
        ));
        let mut bad = ModelParams::new();
        bad.insert("k9".into(), 1.0);
        assert!(build_model::<f64>("cstr", &bad).is_err());
    }
}
