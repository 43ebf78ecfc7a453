//! Self-checks behind the `check` subcommand: adjoint gradients against
//! central differences, constant-shift invariance of the cost and of the
//! solver's argmin, equivalence with exhaustive grid search on tiny
//! instances, and the ordering properties of the quasi-steady scan.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{lemma_one_scan, EquilibriumBand, SampleRegion};
use crate::dynamics::{ControlBounds, DiscreteDynamics, OdeModel};
use crate::error::{EmpcError, Result};
use crate::linalg::{distance, norm_inf};
use crate::models::{Cstr, Integrator, LinearTest};
use crate::objective::{EconomicObjective, LinearStateCost, QuadraticCost};
use crate::scalar::{from_usize, lit, to_f64, Scalar};
use crate::sequence::ControlSequence;
use crate::solver::{cost_and_adjoint_gradient, central_difference_gradient, solve, SolverSettings};
use crate::steady::optimal_steady_pair;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckSettings<T> {
    /// Random gradient probes, spread over the built-in models.
    pub gradient_probes: usize,
    pub fd_step: T,
    /// Bound on `‖g_adj − g_fd‖ / ‖g_fd‖`.
    pub gradient_tol: T,
    /// Bound on `|J − J_grid|` beyond which the solver is said to lose.
    pub grid_tol: T,
    /// Bound on `‖u*_shifted − u*‖_∞`.
    pub argmin_tol: T,
    pub shift: T,
    pub lemma_samples: usize,
    pub lemma_alpha: T,
    pub seed: u64,
}

impl<T: Scalar> Default for CheckSettings<T> {
    fn default() -> Self {
        Self {
            gradient_probes: 120,
            fd_step: lit(1e-6),
            gradient_tol: lit(1e-5),
            grid_tol: lit(1e-6),
            argmin_tol: lit(1e-6),
            shift: lit(0.37),
            lemma_samples: 10_000,
            lemma_alpha: lit(10.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckItem {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: String) {
        self.items.push(CheckItem { name, passed, detail });
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for item in &self.items {
            let tag = if item.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{tag}  {:<18} {}", item.name, item.detail)?;
        }
        Ok(())
    }
}

/// The instance the shift and scan checks run on.
#[derive(Clone, Debug)]
pub struct CheckInstance<T: Scalar> {
    pub dynamics: DiscreteDynamics<T>,
    pub objective: EconomicObjective<T>,
    pub bounds: ControlBounds<T>,
    pub x0: Vec<T>,
    pub horizon: usize,
    pub solver: SolverSettings<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck<T> {
    pub probes: usize,
    pub max_rel_error: T,
    /// Model name and horizon of the worst probe.
    pub worst: (String, usize),
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, lo: T, hi: T) -> T {
    lo + (hi - lo) * lit::<T>(rng.gen::<f64>())
}

fn random_sequence<T: Scalar>(rng: &mut ChaCha8Rng, horizon: usize, bounds: &ControlBounds<T>) -> Result<ControlSequence<T>> {
    let m = bounds.dim();
    let flat = (0..(horizon + 1) * m)
        .map(|i| uniform(rng, bounds.lower()[i % m], bounds.upper()[i % m]))
        .collect();
    ControlSequence::from_flat(flat, bounds.clone())
}

/// Compares adjoint and central-difference gradients at random `(x₀, u, α, γ)`
/// on the CSTR, a two-state linear model and a two-state integrator,
/// cycling through the models.
pub fn gradient_check<T: Scalar>(probes: usize, fd_step: T, seed: u64) -> Result<GradientCheck<T>> {
    type Zoo<T> = (Arc<dyn OdeModel<T>>, EconomicObjective<T>, ControlBounds<T>, Vec<[f64; 2]>, T, usize);
    let zoo: Vec<Zoo<T>> = vec![
        (
            Arc::new(Cstr::default()),
            EconomicObjective::new(Arc::new(LinearStateCost::negated_component(1, 3))),
            Cstr::bounds(),
            vec![[0.05, 0.55], [0.0, 0.15], [0.1, 0.25]],
            lit(0.1),
            20,
        ),
        (
            Arc::new(LinearTest { dim: 2, rate: lit(1.5) }),
            EconomicObjective::new(Arc::new(QuadraticCost {
                control_weight: lit(0.5),
                ..QuadraticCost::state_energy(2, 2)
            })),
            ControlBounds::uniform(2, lit(-1.0), lit(1.0))?,
            vec![[-2.0, 2.0]; 2],
            lit(0.2),
            4,
        ),
        (
            Arc::new(Integrator { dim: 2, gain: lit(0.8) }),
            EconomicObjective::new(Arc::new(QuadraticCost::state_energy(2, 2))),
            ControlBounds::uniform(2, lit(-1.0), lit(1.0))?,
            vec![[-2.0, 2.0]; 2],
            lit(0.1),
            2,
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (T::zero(), (String::new(), 0));
    for p in 0..probes {
        let (model, base, bounds, box_x, tau, substeps) = &zoo[p % zoo.len()];
        let dynamics = DiscreteDynamics::from_ode(model.clone(), *tau, *substeps)?;
        let horizon = rng.gen_range(1..=20);
        let x0: Vec<T> = box_x.iter().map(|[lo, hi]| uniform(&mut rng, lit(*lo), lit(*hi))).collect();
        let useq = random_sequence(&mut rng, horizon, bounds)?;
        let objective = base.clone().with_weights(uniform(&mut rng, T::zero(), lit(2.0)), uniform(&mut rng, T::zero(), lit(2.0)))?;
        let (_, adj) = cost_and_adjoint_gradient(&dynamics, &objective, &x0, useq.as_flat())?;
        let fd = central_difference_gradient(&dynamics, &objective, &x0, useq.as_flat(), fd_step)?;
        let diff: Vec<T> = adj.iter().zip(&fd).map(|(a, b)| *a - *b).collect();
        let scale = crate::linalg::norm2(&fd).max(lit(1e-12));
        let rel = crate::linalg::norm2(&diff) / scale;
        if !(rel <= worst.0) {
            worst = (rel, (model.name().to_string(), horizon));
        }
    }
    Ok(GradientCheck { probes, max_rel_error: worst.0, worst: worst.1 })
}

/// Best stacked sequence on a tensor lattice of `points` values per input
/// coordinate, re-centred on the incumbent and halved in spacing
/// `refinements` times. Returns `(cost, stacked)`.
pub fn grid_search<T: Scalar>(
    dynamics: &DiscreteDynamics<T>,
    objective: &EconomicObjective<T>,
    x0: &[T],
    horizon: usize,
    bounds: &ControlBounds<T>,
    points: usize,
    refinements: usize,
) -> Result<(T, Vec<T>)> {
    let m = bounds.dim();
    let dim = m * (horizon + 1);
    if points < 2 || (points as f64).powi(dim as i32) > 1e6 {
        return Err(EmpcError::InvalidArgument(format!("grid of {points}^{dim} points is not searchable")));
    }
    let lo = |i: usize| bounds.lower()[i % m];
    let hi = |i: usize| bounds.upper()[i % m];
    let mut centre: Vec<T> = (0..dim).map(|i| (lo(i) + hi(i)) * lit(0.5)).collect();
    let mut half: Vec<T> = (0..dim).map(|i| (hi(i) - lo(i)) * lit(0.5)).collect();
    let mut best: Option<(T, Vec<T>)> = None;
    for _ in 0..=refinements {
        let mut idx = vec![0usize; dim];
        loop {
            let point: Vec<T> = (0..dim)
                .map(|i| {
                    let t = lit::<T>(-1.0) + lit::<T>(2.0) * from_usize::<T>(idx[i]) / from_usize::<T>(points - 1);
                    (centre[i] + t * half[i]).max(lo(i)).min(hi(i))
                })
                .collect();
            if let Ok(c) = objective.total_cost_stacked(dynamics, x0, &point) {
                if c.total.is_finite() && best.as_ref().is_none_or(|(b, _)| c.total < *b) {
                    best = Some((c.total, point));
                }
            }
            let mut d = 0;
            while d < dim {
                idx[d] += 1;
                if idx[d] < points {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == dim {
                break;
            }
        }
        let Some((_, incumbent)) = &best else {
            return Err(EmpcError::InvalidArgument("no finite cost on the grid".into()));
        };
        centre.clone_from(incumbent);
        for h in &mut half {
            *h = *h * lit(0.5);
        }
    }
    Ok(best.expect("grid visited"))
}

/// Largest `J_solver − J_grid` over `x⁺ = x + τu`, `ℓ = x²`, `α = γ = 0`,
/// `N ∈ {1, 2, 3}` and a few initial states, solving from the box midpoint.
pub fn grid_equivalence<T: Scalar>(settings: &SolverSettings<T>) -> Result<T> {
    let tau = lit::<T>(0.5);
    let dynamics = DiscreteDynamics::from_ode(Arc::new(Integrator { dim: 1, gain: T::one() }), tau, 1)?;
    let objective = EconomicObjective::new(Arc::new(QuadraticCost::state_energy(1, 1)));
    let bounds = ControlBounds::uniform(1, lit(-1.0), lit(1.0))?;
    let mut worst = lit::<T>(f64::NEG_INFINITY);
    for horizon in 1..=3 {
        for x in [-1.3, -0.2, 0.35, 0.9] {
            let x0 = [lit::<T>(x)];
            let (grid, _) = grid_search(&dynamics, &objective, &x0, horizon, &bounds, 3, 2)?;
            let warm = ControlSequence::midpoint(horizon, bounds.clone());
            let r = solve(&dynamics, &objective, &x0, &warm, settings)?;
            worst = worst.max(r.cost.total - grid);
        }
    }
    Ok(worst)
}

/// Runs every check and collects an itemized report. Only setup errors on
/// the instance itself surface as `Err`.
pub fn run_suite<T: Scalar>(instance: &CheckInstance<T>, settings: &CheckSettings<T>) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let f = |v: T| to_f64(v);

    match gradient_check(settings.gradient_probes, settings.fd_step, settings.seed) {
        Ok(g) => report.push(
            "gradient",
            g.max_rel_error < settings.gradient_tol,
            format!(
                "{} probes, max rel err {:.3e} (tol {:.0e}, worst {} N={})",
                g.probes,
                f(g.max_rel_error),
                f(settings.gradient_tol),
                g.worst.0,
                g.worst.1
            ),
        ),
        Err(e) => report.push("gradient", false, e.to_string()),
    }

    let CheckInstance { dynamics, objective, bounds, x0, horizon, solver } = instance;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x5eed);
    let mut shift_ok = true;
    for _ in 0..20 {
        let useq = random_sequence(&mut rng, *horizon, bounds)?;
        shift_ok &= objective.shift_invariance_check(dynamics, x0, &useq, settings.shift)?;
    }
    report.push("cost shift", shift_ok, format!("20 random sequences, c = {}", f(settings.shift)));

    let warm = ControlSequence::midpoint(*horizon, bounds.clone());
    let shifted = objective.clone().with_ell_shift(objective.ell_shift() + settings.shift);
    match (solve(dynamics, objective, x0, &warm, solver), solve(dynamics, &shifted, x0, &warm, solver)) {
        (Ok(a), Ok(b)) => {
            let gap = distance(a.useq.as_flat(), b.useq.as_flat());
            let gap_inf = a.useq.as_flat().iter().zip(b.useq.as_flat()).map(|(p, q)| (*p - *q).abs());
            let gap_inf = gap_inf.fold(T::zero(), T::max);
            report.push(
                "argmin shift",
                gap_inf <= settings.argmin_tol,
                format!("|u* - u*_c|_inf = {:.3e} (2-norm {:.3e}, tol {:.0e})", f(gap_inf), f(gap), f(settings.argmin_tol)),
            );
        }
        (Err(e), _) | (_, Err(e)) => report.push("argmin shift", false, e.to_string()),
    }

    match grid_equivalence(solver) {
        Ok(gap) => report.push(
            "grid search",
            gap <= settings.grid_tol,
            format!("max J_solver - J_grid = {:.3e} (tol {:.0e})", f(gap), f(settings.grid_tol)),
        ),
        Err(e) => report.push("grid search", false, e.to_string()),
    }

    let scan = optimal_steady_pair(dynamics, objective, bounds, 201, x0).and_then(|steady| {
        let radius = norm_inf(&steady.x_s).max(T::one()) * lit(0.1);
        let band = EquilibriumBand::over(bounds, radius * lit(1e-5), radius);
        let eps = [lit(1e-2), lit(1e-3), lit(1e-4)];
        let region = SampleRegion::NearEquilibria(band);
        lemma_one_scan(dynamics, objective, &steady, settings.lemma_alpha, settings.lemma_samples, &eps, &region, settings.seed)
    });
    match scan {
        Ok(r) => {
            let counts: Vec<String> = r.levels.iter().map(|l| l.count.to_string()).collect();
            report.push(
                "quasi-steady scan",
                r.nested && r.monotone && r.dist_decreasing,
                format!(
                    "nested {} monotone {} shrinking {} (counts {}, L_psi ~ {:.3})",
                    r.nested,
                    r.monotone,
                    r.dist_decreasing,
                    counts.join("/"),
                    f(r.l_psi_estimate)
                ),
            );
        }
        Err(e) => report.push("quasi-steady scan", false, e.to_string()),
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_instance() -> CheckInstance<f64> {
        let model: Arc<dyn OdeModel<f64>> = Arc::new(LinearTest { dim: 1, rate: 1.0 });
        let cost = QuadraticCost { state_weight: 1.0, state_ref: vec![0.4], control_weight: 0.1, control_ref: vec![0.0] };
        CheckInstance {
            dynamics: DiscreteDynamics::from_ode(model, 0.1, 4).unwrap(),
            objective: EconomicObjective::new(Arc::new(cost)).with_weights(0.1, 1.0).unwrap(),
            bounds: ControlBounds::uniform(1, -1.0, 1.0).unwrap(),
            x0: vec![1.0],
            horizon: 10,
            solver: SolverSettings::default(),
        }
    }

    #[test]
    fn grid_search_finds_the_lattice_minimum_of_a_separable_bowl() {
        let d = DiscreteDynamics::from_ode(Arc::new(Integrator { dim: 1, gain: 0.0 }), 0.1, 1).unwrap();
        let obj = EconomicObjective::new(Arc::new(QuadraticCost::control_energy(1, 1))).with_weights(0.0, 1.0).unwrap();
        let b = ControlBounds::uniform(1, -1.0, 1.0).unwrap();
        let (c, u) = grid_search(&d, &obj, &[0.0], 2, &b, 3, 2).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(u, vec![0.0; 3]);
    }

    #[test]
    fn grid_refinement_never_worsens() {
        let d = DiscreteDynamics::from_ode(Arc::new(Integrator { dim: 1, gain: 1.0 }), 0.5, 1).unwrap();
        let obj = EconomicObjective::new(Arc::new(QuadraticCost::state_energy(1, 1)));
        let b = ControlBounds::uniform(1, -1.0, 1.0).unwrap();
        let mut last = f64::INFINITY;
        for r in 0..4 {
            let (c, _) = grid_search(&d, &obj, &[0.35], 2, &b, 3, r).unwrap();
            assert!(c <= last);
            last = c;
        }
    }

    #[test]
    fn adjoint_gradients_pass_and_coarse_differences_fail() {
        let good = gradient_check::<f64>(30, 1e-6, 1).unwrap();
        assert!(good.max_rel_error < 1e-5, "{good:?}");
        let bad = gradient_check::<f64>(30, 1e-1, 1).unwrap();
        assert!(bad.max_rel_error > 1e-5, "{bad:?}");
    }

    #[test]
    fn solver_matches_grid_search() {
        assert!(grid_equivalence::<f64>(&SolverSettings::default()).unwrap() <= 1e-6);
    }

    #[test]
    fn default_suite_passes_on_the_linear_model() {
        let settings = CheckSettings { gradient_probes: 30, lemma_samples: 2000, ..CheckSettings::default() };
        let report = run_suite(&linear_instance(), &settings).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.items.len(), 5);
    }

    #[test]
    fn corrupted_fd_step_fails_the_suite() {
        let settings = CheckSettings { gradient_probes: 30, lemma_samples: 500, fd_step: 0.1, ..CheckSettings::default() };
        let report = run_suite(&linear_instance(), &settings).unwrap();
        assert!(!report.passed());
        assert!(!report.items[0].passed, "{report}");
        assert!(report.items[1..].iter().all(|i| i.passed), "{report}");
    }
}
