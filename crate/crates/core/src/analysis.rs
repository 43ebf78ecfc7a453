//! Post-processing of closed-loop logs and open-loop sweeps into
//! quasi-steady metrics, terminal-bound envelopes and sampled checks of the
//! `ℓ + αΔ ≤ ε` implication.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::ClosedLoopLog;
use crate::dynamics::{ControlBounds, DiscreteDynamics};
use crate::error::{check_dim, EmpcError, Result};
use crate::objective::EconomicObjective;
use crate::linalg::norm2;
use crate::scalar::{lit, to_f64, Scalar};
use crate::sequence::ControlSequence;
use crate::solver::{solve, SolverSettings};
use crate::steady::{steady_state_for_input, SteadyPair};

/// Thresholds on the tail maxima that declare a run stationary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds<T> {
    pub eps_ell: T,
    pub eps_delta: T,
}

impl<T: Scalar> Default for Thresholds<T> {
    fn default() -> Self {
        Self { eps_ell: lit(1e-3), eps_delta: lit(1e-3) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuasiSteadyReport<T> {
    /// `max_tail |ℓ(x_k,u_k) − ℓ_s|`
    pub eps_ell: T,
    /// `max_tail Δ(x_k,u_k)`
    pub eps_delta: T,
    /// `max_tail d((x_k,u_k), z_s)`
    pub tail_distance: T,
    pub tail_start: usize,
    pub tail_len: usize,
    pub stationary: bool,
    /// First step after which both thresholds hold until the end of the log.
    pub steps_to_threshold: Option<usize>,
}

/// Index where the tail starts: the last `tail_fraction` of the log, at
/// least 20 entries (or the whole log when shorter).
pub fn tail_start(len: usize, tail_fraction: f64) -> usize {
    let frac = tail_fraction.clamp(0.0, 1.0);
    let tail = ((len as f64) * frac).ceil() as usize;
    len - tail.max(20).min(len)
}

/// Tail maxima of `|ℓ − ℓ_s|` and `Δ` over the last `tail_fraction` of the log.
pub fn quasi_steady<T: Scalar>(
    log: &ClosedLoopLog<T>,
    steady: &SteadyPair<T>,
    tail_fraction: f64,
    thresholds: Thresholds<T>,
) -> Result<QuasiSteadyReport<T>> {
    if log.is_empty() {
        return Err(EmpcError::InvalidArgument("quasi-steady report needs a non-empty log".into()));
    }
    let start = tail_start(log.len(), tail_fraction);
    let tail = &log.entries[start..];
    let eps_ell = tail.iter().map(|e| (e.ell - steady.ell_s).abs()).fold(T::zero(), T::max);
    let eps_delta = tail.iter().map(|e| e.delta).fold(T::zero(), T::max);
    let tail_distance = tail.iter().map(|e| steady.distance(&e.x, &e.u)).fold(T::zero(), T::max);
    let within = |e: &crate::controller::LogEntry<T>| {
        (e.ell - steady.ell_s).abs() <= thresholds.eps_ell && e.delta <= thresholds.eps_delta
    };
    let settled_from = log.entries.iter().rposition(|e| !within(e)).map_or(0, |i| i + 1);
    Ok(QuasiSteadyReport {
        eps_ell,
        eps_delta,
        tail_distance,
        tail_start: start,
        tail_len: tail.len(),
        stationary: eps_ell <= thresholds.eps_ell && eps_delta <= thresholds.eps_delta,
        steps_to_threshold: (settled_from < log.len()).then_some(settled_from),
    })
}

/// One open-loop solve of a terminal-bound sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalBoundPoint<T> {
    pub alpha: T,
    pub gamma: T,
    /// `Δ*_N`
    pub delta_n: T,
    /// `|ℓ*_N − ℓ_s|`
    pub ell_n: T,
    pub j_star: T,
    /// `J` re-evaluated from the returned sequence.
    pub j_reevaluated: T,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

/// Least-squares envelopes `Δ*_N ≈ c₃/γ` and `|ℓ*_N| ≈ c₄/γ` at one `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeFit<T> {
    pub alpha: T,
    pub c3: T,
    pub c4: T,
    /// RMS residuals of the two fits.
    pub residual3: T,
    pub residual4: T,
    /// `max/min` of `γ Δ*_N` across the sweep.
    pub delta_ratio: T,
    /// `max/min` of `γ |ℓ*_N − ℓ_s|` across the sweep.
    pub ell_ratio: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerminalBoundReport<T> {
    pub x: Vec<T>,
    pub points: Vec<TerminalBoundPoint<T>>,
    pub fits: Vec<EnvelopeFit<T>>,
}

/// Fits `y ≈ c / γ` by least squares; returns `(c, rms residual)`.
pub fn fit_inverse<T: Scalar>(gammas: &[T], values: &[T]) -> (T, T) {
    let num: T = gammas.iter().zip(values).map(|(&g, &y)| y / g).sum();
    let den: T = gammas.iter().map(|&g| T::one() / (g * g)).sum();
    let c = num / den;
    let sq: T = gammas.iter().zip(values).map(|(&g, &y)| (y - c / g) * (y - c / g)).sum();
    let rms = (sq / lit(values.len().max(1) as f64)).sqrt();
    (c, rms)
}

fn spread<T: Scalar>(values: impl Iterator<Item = T>) -> T {
    let (lo, hi) = values.fold((T::infinity(), T::zero()), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi / lo
}

/// Solves `P(x)` once per `(α, γ)` from the box midpoint and fits the
/// `1/γ` envelopes of the terminal increment and terminal stage cost.
#[allow(clippy::too_many_arguments)]
pub fn terminal_bound_sweep<T: Scalar>(
    predictor: &DiscreteDynamics<T>,
    base: &EconomicObjective<T>,
    bounds: &ControlBounds<T>,
    horizon: usize,
    x: &[T],
    alphas: &[T],
    gammas: &[T],
    settings: &SolverSettings<T>,
    steady: &SteadyPair<T>,
) -> Result<TerminalBoundReport<T>> {
    check_dim("sweep state", predictor.state_dim(), x.len())?;
    let mut distinct: Vec<T> = gammas.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < 3 || distinct.iter().any(|&g| !(g > T::zero())) {
        return Err(EmpcError::InvalidArgument("terminal-bound sweep needs >= 3 distinct positive gammas".into()));
    }
    let warm = ControlSequence::midpoint(horizon, bounds.clone());
    let mut points = Vec::new();
    let mut fits = Vec::new();
    for &alpha in alphas {
        let mut ok = Vec::new();
        for &gamma in gammas {
            let objective = base.clone().with_ell_shift(T::zero()).with_weights(alpha, gamma)?;
            let point = match solve(predictor, &objective, x, &warm, settings) {
                Ok(r) => {
                    let j = objective.total_cost(predictor, x, &r.useq)?.total;
                    TerminalBoundPoint {
                        alpha,
                        gamma,
                        delta_n: r.cost.terminal_delta,
                        ell_n: (r.cost.terminal_ell - steady.ell_s).abs(),
                        j_star: r.cost.total,
                        j_reevaluated: j,
                        iterations: r.iterations,
                        converged: r.converged,
                        error: None,
                    }
                }
                Err(e) => TerminalBoundPoint {
                    alpha,
                    gamma,
                    delta_n: T::nan(),
                    ell_n: T::nan(),
                    j_star: T::nan(),
                    j_reevaluated: T::nan(),
                    iterations: 0,
                    converged: false,
                    error: Some(e.to_string()),
                },
            };
            if point.error.is_none() {
                ok.push(point.clone());
            }
            points.push(point);
        }
        if ok.len() >= 2 {
            let gs: Vec<T> = ok.iter().map(|p| p.gamma).collect();
            let d: Vec<T> = ok.iter().map(|p| p.delta_n).collect();
            let l: Vec<T> = ok.iter().map(|p| p.ell_n).collect();
            let (c3, residual3) = fit_inverse(&gs, &d);
            let (c4, residual4) = fit_inverse(&gs, &l);
            fits.push(EnvelopeFit {
                alpha,
                c3,
                c4,
                residual3,
                residual4,
                delta_ratio: spread(ok.iter().map(|p| p.gamma * p.delta_n)),
                ell_ratio: spread(ok.iter().map(|p| p.gamma * p.ell_n)),
            });
        }
    }
    Ok(TerminalBoundReport { x: x.to_vec(), points, fits })
}

/// Box over `(x, u)` from which pairs are drawn uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBox<T> {
    pub x_lower: Vec<T>,
    pub x_upper: Vec<T>,
    pub u_lower: Vec<T>,
    pub u_upper: Vec<T>,
}

impl<T: Scalar> SampleBox<T> {
    /// Box of half-widths `x_radius`, `u_radius` around the steady pair,
    /// with the input part clipped to `bounds`.
    pub fn around(steady: &SteadyPair<T>, x_radius: T, u_radius: T, bounds: &ControlBounds<T>) -> Self {
        Self {
            x_lower: steady.x_s.iter().map(|&v| v - x_radius).collect(),
            x_upper: steady.x_s.iter().map(|&v| v + x_radius).collect(),
            u_lower: steady.u_s.iter().zip(bounds.lower()).map(|(&v, &l)| (v - u_radius).max(l)).collect(),
            u_upper: steady.u_s.iter().zip(bounds.upper()).map(|(&v, &h)| (v + u_radius).min(h)).collect(),
        }
    }
}

/// Pairs `(x_e(u) + r w, u)` with `u` uniform in the box, `w` a uniform
/// random direction and `r` log-uniform in `[radius_min, radius_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumBand<T> {
    pub u_lower: Vec<T>,
    pub u_upper: Vec<T>,
    pub radius_min: T,
    pub radius_max: T,
}

impl<T: Scalar> EquilibriumBand<T> {
    pub fn over(bounds: &ControlBounds<T>, radius_min: T, radius_max: T) -> Self {
        Self {
            u_lower: bounds.lower().to_vec(),
            u_upper: bounds.upper().to_vec(),
            radius_min,
            radius_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleRegion<T> {
    Box(SampleBox<T>),
    NearEquilibria(EquilibriumBand<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaOneSample<T> {
    pub x: Vec<T>,
    pub u: Vec<T>,
    /// `ℓ(z) − ℓ_s + α Δ(z)`
    pub ell_alpha_delta: T,
    pub delta: T,
    /// `ℓ(z) − ℓ_s`
    pub ell: T,
    pub dist_to_zs: T,
}

/// Qualifier-set maxima at one `ε`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSummary<T> {
    pub eps: T,
    pub count: usize,
    pub max_delta: T,
    pub max_dist: T,
    pub max_abs_ell: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaOneReport<T> {
    pub alpha: T,
    pub samples: Vec<LemmaOneSample<T>>,
    /// One entry per `ε`, in decreasing `ε`.
    pub levels: Vec<LevelSummary<T>>,
    /// Every qualifier set is contained in the one of the next larger `ε`.
    pub nested: bool,
    /// `max_delta` and `max_dist` never increase as `ε` shrinks.
    pub monotone: bool,
    /// `max_dist` at the smallest `ε` is strictly below the one at the largest.
    pub dist_decreasing: bool,
    /// `max (ℓ_s − ℓ)/Δ` over samples with `Δ > 0`, a sampled lower estimate
    /// of the Lipschitz constant the implication needs `α` to exceed.
    pub l_psi_estimate: T,
}

/// Draws `n_samples` pairs from `region` (plus `z_s` itself) and, for each
/// `ε`, summarizes the pairs with `ℓ − ℓ_s + αΔ ≤ ε`.
#[allow(clippy::too_many_arguments)]
pub fn lemma_one_scan<T: Scalar>(
    dynamics: &DiscreteDynamics<T>,
    objective: &EconomicObjective<T>,
    steady: &SteadyPair<T>,
    alpha: T,
    n_samples: usize,
    eps_levels: &[T],
    region: &SampleRegion<T>,
    seed: u64,
) -> Result<LemmaOneReport<T>> {
    if !(alpha > T::zero()) {
        return Err(EmpcError::InvalidArgument(format!("lemma scan needs alpha > 0, got {alpha}")));
    }
    let n = dynamics.state_dim();
    let m = dynamics.control_dim();
    match region {
        SampleRegion::Box(b) => {
            check_dim("sample box (x)", n, b.x_lower.len())?;
            check_dim("sample box (x)", n, b.x_upper.len())?;
            check_dim("sample box (u)", m, b.u_lower.len())?;
            check_dim("sample box (u)", m, b.u_upper.len())?;
        }
        SampleRegion::NearEquilibria(b) => {
            check_dim("sample band (u)", m, b.u_lower.len())?;
            check_dim("sample band (u)", m, b.u_upper.len())?;
            if !(b.radius_min > T::zero() && b.radius_max >= b.radius_min) {
                return Err(EmpcError::InvalidArgument("sample band needs 0 < radius_min <= radius_max".into()));
            }
        }
    }
    let objective = objective.clone().with_ell_shift(T::zero());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha8Rng, lo: &[T], hi: &[T]| -> Vec<T> {
        lo.iter()
            .zip(hi)
            .map(|(&l, &h)| l + (h - l) * lit::<T>(rng.gen::<f64>()))
            .collect()
    };
    let make = |x: Vec<T>, u: Vec<T>| -> Option<LemmaOneSample<T>> {
        let delta = dynamics.delta(&x, &u).ok()?;
        let ell = objective.effective_stage(&x, &u) - steady.ell_s;
        let dist = steady.distance(&x, &u);
        Some(LemmaOneSample { ell_alpha_delta: ell + alpha * delta, delta, ell, dist_to_zs: dist, x, u })
    };
    let mut samples = Vec::with_capacity(n_samples + 1);
    samples.extend(make(steady.x_s.clone(), steady.u_s.clone()));
    for _ in 0..n_samples {
        let (x, u) = match region {
            SampleRegion::Box(b) => (uniform(&mut rng, &b.x_lower, &b.x_upper), uniform(&mut rng, &b.u_lower, &b.u_upper)),
            SampleRegion::NearEquilibria(b) => {
                let u = uniform(&mut rng, &b.u_lower, &b.u_upper);
                let Ok(xe) = steady_state_for_input(dynamics, &u, &steady.x_s) else {
                    continue;
                };
                let (lo, hi) = (to_f64(b.radius_min).ln(), to_f64(b.radius_max).ln());
                let r = lit::<T>((lo + (hi - lo) * rng.gen::<f64>()).exp());
                let w: Vec<T> = (0..n).map(|_| lit::<T>(rng.gen::<f64>() * 2.0 - 1.0)).collect();
                let len = norm2(&w);
                if !(len > T::zero()) {
                    continue;
                }
                (xe.iter().zip(&w).map(|(&a, &d)| a + r * d / len).collect(), u)
            }
        };
        samples.extend(make(x, u));
    }
    let l_psi_estimate = samples
        .iter()
        .filter(|s| s.delta > T::zero())
        .map(|s| -s.ell / s.delta)
        .fold(T::zero(), T::max);

    let mut eps: Vec<T> = eps_levels.to_vec();
    eps.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let sets: Vec<Vec<usize>> = eps
        .iter()
        .map(|&e| (0..samples.len()).filter(|&i| samples[i].ell_alpha_delta <= e).collect())
        .collect();
    let levels: Vec<LevelSummary<T>> = eps
        .iter()
        .zip(&sets)
        .map(|(&e, set)| LevelSummary {
            eps: e,
            count: set.len(),
            max_delta: set.iter().map(|&i| samples[i].delta).fold(T::zero(), T::max),
            max_dist: set.iter().map(|&i| samples[i].dist_to_zs).fold(T::zero(), T::max),
            max_abs_ell: set.iter().map(|&i| samples[i].ell.abs()).fold(T::zero(), T::max),
        })
        .collect();
    let nested = sets.windows(2).all(|w| w[1].iter().all(|i| w[0].binary_search(i).is_ok()));
    let monotone = levels
        .windows(2)
        .all(|w| w[1].max_delta <= w[0].max_delta && w[1].max_dist <= w[0].max_dist);
    let dist_decreasing = match (levels.first(), levels.last()) {
        (Some(a), Some(b)) if levels.len() >= 2 => b.max_dist < a.max_dist,
        _ => false,
    };
    Ok(LemmaOneReport { alpha, samples, levels, nested, monotone, dist_decreasing, l_psi_estimate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::LogEntry;
    use crate::dynamics::OdeModel;
    use crate::models::Cstr;
    use crate::objective::LinearStateCost;
    use crate::steady::optimal_steady_pair;
    use std::sync::Arc;

    fn cstr() -> DiscreteDynamics<f64> {
        DiscreteDynamics::from_ode(Arc::new(Cstr::default()), 0.1, 20).unwrap()
    }

    fn neg_x2() -> EconomicObjective<f64> {
        EconomicObjective::new(Arc::new(LinearStateCost::negated_component(1, 3)))
    }

    fn steady() -> SteadyPair<f64> {
        optimal_steady_pair(&cstr(), &neg_x2(), &Cstr::bounds(), 201, &[0.1; 3]).unwrap()
    }

    fn entry(step: usize, x: Vec<f64>, u: Vec<f64>, ell: f64, delta: f64) -> LogEntry<f64> {
        LogEntry {
            step,
            time: step as f64 * 0.1,
            x,
            u,
            ell,
            delta,
            j_star: 0.0,
            v_star: 0.0,
            psi_star: 0.0,
            delta_n_star: 0.0,
            ell_n_star: 0.0,
            iterations: 0,
            converged: true,
            wall_ms: 0.0,
            warm: vec![],
            optimizer: vec![],
        }
    }

    fn log_of(entries: Vec<LogEntry<f64>>) -> ClosedLoopLog<f64> {
        ClosedLoopLog { state_dim: 3, control_dim: 1, tau_plant: 0.1, final_state: vec![], entries, aborted: None }
    }

    #[test]
    fn constant_log_at_steady_pair_is_exactly_quasi_steady() {
        let s = steady();
        let log = log_of((0..40).map(|k| entry(k, s.x_s.clone(), s.u_s.clone(), s.ell_s, 0.0)).collect());
        let r = quasi_steady(&log, &s, 0.25, Thresholds::default()).unwrap();
        assert_eq!(r.eps_ell, 0.0);
        assert_eq!(r.eps_delta, 0.0);
        assert_eq!(r.tail_distance, 0.0);
        assert!(r.stationary);
        assert_eq!(r.steps_to_threshold, Some(0));
    }

    #[test]
    fn tail_maxima_are_exact_and_window_has_minimum_length() {
        let s = steady();
        let entries: Vec<_> = (0..100)
            .map(|k| entry(k, s.x_s.clone(), s.u_s.clone(), s.ell_s + 1e-2 / (k + 1) as f64, 0.5 / (k + 1) as f64))
            .collect();
        let log = log_of(entries);
        let r = quasi_steady(&log, &s, 0.25, Thresholds::default()).unwrap();
        assert_eq!(r.tail_start, 75);
        assert_eq!(r.eps_delta, 0.5 / 76.0);
        assert!((r.eps_ell - 1e-2 / 76.0).abs() < 1e-15);
        assert!(!r.stationary);
        assert_eq!(r.steps_to_threshold, None);
        let settling: Vec<_> = (0..100)
            .map(|k| entry(k, s.x_s.clone(), s.u_s.clone(), s.ell_s + 1e-2 / (k + 1) as f64, 0.05 / (k + 1) as f64))
            .collect();
        let r = quasi_steady(&log_of(settling), &s, 0.25, Thresholds::default()).unwrap();
        // Δ_k ≤ 1e-3 from k = 49 on; |ℓ_k − ℓ_s| ≤ 1e-3 from k = 9 on.
        assert_eq!(r.steps_to_threshold, Some(49));
        assert!(r.stationary);
        assert_eq!(tail_start(40, 0.25), 20);
        assert_eq!(tail_start(10, 0.25), 0);
        assert!(quasi_steady(&log_of(vec![]), &s, 0.25, Thresholds::default()).is_err());
    }

    #[test]
    fn steps_to_threshold_is_none_when_last_entry_violates() {
        let s = steady();
        let mut entries: Vec<_> = (0..30).map(|k| entry(k, s.x_s.clone(), s.u_s.clone(), s.ell_s, 0.0)).collect();
        entries[29].delta = 1.0;
        let r = quasi_steady(&log_of(entries), &s, 0.25, Thresholds::default()).unwrap();
        assert_eq!(r.steps_to_threshold, None);
    }

    #[test]
    fn inverse_fit_recovers_exact_envelope() {
        let g = [0.1, 1.0, 10.0];
        let y: Vec<f64> = g.iter().map(|v| 0.3 / v).collect();
        let (c, r) = fit_inverse(&g, &y);
        assert!((c - 0.3).abs() < 1e-14);
        assert!(r < 1e-14);
    }

    #[test]
    fn steady_pair_always_qualifies_and_sets_nest() {
        let s = steady();
        let b = SampleBox::around(&s, 0.05, 0.05, &Cstr::bounds());
        let report = lemma_one_scan(&cstr(), &neg_x2(), &s, 1.0, 500, &[1e-2, 1e-3, 1e-4], &SampleRegion::Box(b), 7).unwrap();
        let z = &report.samples[0];
        assert_eq!(z.delta.max(0.0), z.delta);
        assert!(z.delta < 1e-9 && z.dist_to_zs == 0.0 && z.ell == 0.0);
        assert!(report.levels.iter().all(|l| l.count >= 1));
        assert!(report.nested);
        assert!(report.monotone);
        for w in report.levels.windows(2) {
            assert!(w[1].count <= w[0].count);
        }
    }

    #[test]
    fn scan_is_seed_deterministic_and_rejects_zero_alpha() {
        let s = steady();
        let b = SampleRegion::NearEquilibria(EquilibriumBand::over(&Cstr::bounds(), 1e-6, 1e-2));
        let a = lemma_one_scan(&cstr(), &neg_x2(), &s, 0.5, 50, &[1e-2], &b, 3).unwrap();
        let c = lemma_one_scan(&cstr(), &neg_x2(), &s, 0.5, 50, &[1e-2], &b, 3).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.samples.len(), 51);
        assert!(lemma_one_scan(&cstr(), &neg_x2(), &s, 0.0, 50, &[1e-2], &b, 3).is_err());
    }

    #[test]
    fn band_samples_sit_within_radius_of_an_equilibrium() {
        let s = steady();
        let band = EquilibriumBand::over(&Cstr::bounds(), 1e-5, 1e-3);
        let r = lemma_one_scan(&cstr(), &neg_x2(), &s, 10.0, 200, &[1e-2], &SampleRegion::NearEquilibria(band), 11).unwrap();
        let model = Cstr::<f64>::default();
        for z in &r.samples[1..] {
            let xe = model.equilibrium(&z.u).unwrap();
            let d = crate::linalg::distance(&xe, &z.x);
            assert!((1e-5 * (1.0 - 1e-12)..=1e-3 * (1.0 + 1e-12)).contains(&d), "{d}");
        }
        assert!(r.l_psi_estimate >= 0.0);
    }

    #[test]
    fn sweep_requires_three_distinct_gammas() {
        let s = steady();
        let r = terminal_bound_sweep(
            &cstr(),
            &neg_x2(),
            &Cstr::bounds(),
            5,
            &[0.5, 0.1, 0.2],
            &[0.1],
            &[1.0, 1.0, 2.0],
            &SolverSettings::default(),
            &s,
        );
        assert!(r.is_err());
    }
}
