//! Receding-horizon loop: solve, apply the first move for one plant period,
//! shift the optimizer into the next warm start, repeat.

use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Instant;

use crate::dynamics::{ControlBounds, DiscreteDynamics, OdeModel};
use crate::error::{check_dim, EmpcError, Result};
use crate::linalg::{all_finite, distance};
use crate::objective::EconomicObjective;
use crate::scalar::{from_usize, lit, to_f64, Scalar};
use crate::sequence::ControlSequence;
use crate::solver::{solve, SolveResult, SolverSettings};

/// Closed-loop experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpcConfig<T> {
    /// Prediction horizon `N`.
    pub horizon: usize,
    pub alpha: T,
    pub gamma: T,
    /// Sampling period of the predictor.
    pub tau_pred: T,
    /// Period between two control updates on the plant.
    pub tau_plant: T,
    pub pred_substeps: usize,
    pub plant_substeps: usize,
    pub steps: usize,
    pub x0: Vec<T>,
    pub solver: SolverSettings<T>,
    /// First warm start value; the box midpoint when `None`.
    pub cold_start: Option<Vec<T>>,
}

impl<T: Scalar> EmpcConfig<T> {
    /// Predictor `τ = 0.1`, `N = 20`, RK4 step 0.005 on both predictor and plant.
    pub fn cstr_default(alpha: T, gamma: T, tau_plant: T, steps: usize) -> Self {
        let h = lit::<T>(0.005);
        Self {
            horizon: 20,
            alpha,
            gamma,
            tau_pred: lit(0.1),
            tau_plant,
            pred_substeps: 20,
            plant_substeps: ((tau_plant / h).round().to_usize().unwrap_or(1)).max(1),
            steps,
            x0: vec![lit(0.5), lit(0.1), lit(0.2)],
            solver: SolverSettings::default(),
            cold_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EmpcError::InvalidArgument(msg));
        if self.horizon == 0 {
            return bad("horizon must be >= 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.tau_pred > T::zero() && self.tau_plant > T::zero()) {
            return bad("sampling periods must be > 0".into());
        }
        if self.tau_plant > self.tau_pred {
            let ratio = self.tau_plant / self.tau_pred;
            if (ratio - ratio.round()).abs() > lit::<T>(1e-9) * ratio {
                return bad(format!(
                    "tau_plant = {} must not exceed tau_pred = {} unless it is an integer multiple",
                    self.tau_plant, self.tau_pred
                ));
            }
        }
        if !all_finite(&self.x0) {
            return bad("x0 must be finite".into());
        }
        self.solver.validate()
    }

    /// Predictor map for `model`.
    pub fn predictor(&self, model: Arc<dyn OdeModel<T>>) -> Result<DiscreteDynamics<T>> {
        DiscreteDynamics::from_ode(model, self.tau_pred, self.pred_substeps)
    }

    /// Plant map for `model`.
    pub fn plant(&self, model: Arc<dyn OdeModel<T>>) -> Result<DiscreteDynamics<T>> {
        DiscreteDynamics::from_ode(model, self.tau_plant, self.plant_substeps)
    }

    /// Controller for `model`, with `base` supplying the stage cost and
    /// soft constraints; `(α, γ)` come from this config.
    pub fn controller(
        &self,
        model: Arc<dyn OdeModel<T>>,
        base: &EconomicObjective<T>,
        bounds: ControlBounds<T>,
    ) -> Result<Controller<T>> {
        self.validate()?;
        let objective = base.clone().with_weights(self.alpha, self.gamma)?;
        let cold = self.cold_start.clone().unwrap_or_else(|| bounds.midpoint());
        let cold = ControlSequence::constant(&cold, self.horizon, bounds)?;
        Controller::new(self.predictor(model)?, objective, cold, self.solver.clone())
    }
}

/// `κ_MPC(x) = u*₀(x)` with warm starting.
#[derive(Clone, Debug)]
pub struct Controller<T: Scalar> {
    predictor: DiscreteDynamics<T>,
    objective: EconomicObjective<T>,
    cold_start: ControlSequence<T>,
    settings: SolverSettings<T>,
}

impl<T: Scalar> Controller<T> {
    pub fn new(
        predictor: DiscreteDynamics<T>,
        objective: EconomicObjective<T>,
        cold_start: ControlSequence<T>,
        settings: SolverSettings<T>,
    ) -> Result<Self> {
        check_dim("cold start", predictor.control_dim(), cold_start.control_dim())?;
        settings.validate()?;
        Ok(Self { predictor, objective, cold_start, settings })
    }

    pub fn predictor(&self) -> &DiscreteDynamics<T> {
        &self.predictor
    }

    pub fn objective(&self) -> &EconomicObjective<T> {
        &self.objective
    }

    pub fn horizon(&self) -> usize {
        self.cold_start.horizon()
    }

    pub fn bounds(&self) -> &ControlBounds<T> {
        self.cold_start.bounds()
    }

    /// Shifted previous optimizer, or the cold start.
    pub fn warm_start(&self, previous: Option<&SolveResult<T>>) -> ControlSequence<T> {
        match previous {
            Some(p) => p.useq.warm_start_shift(),
            None => self.cold_start.clone(),
        }
    }

    /// Solves `P(x)` and returns the first optimal move with the solution.
    pub fn mpc_step(&self, x: &[T], previous: Option<&SolveResult<T>>) -> Result<(Vec<T>, SolveResult<T>)> {
        if !all_finite(x) {
            return Err(EmpcError::InvalidArgument(format!("non-finite state {x:?}")));
        }
        let warm = self.warm_start(previous);
        let result = solve(&self.predictor, &self.objective, x, &warm, &self.settings)?;
        Ok((result.useq.get(0).to_vec(), result))
    }
}

/// One closed-loop step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry<T> {
    pub step: usize,
    pub time: T,
    pub x: Vec<T>,
    pub u: Vec<T>,
    /// Stage cost at `(x_k, u_k)`.
    pub ell: T,
    /// Plant increment `‖x_{k+1} − x_k‖ / τ_plant`.
    pub delta: T,
    pub j_star: T,
    pub v_star: T,
    pub psi_star: T,
    pub delta_n_star: T,
    pub ell_n_star: T,
    pub iterations: usize,
    pub converged: bool,
    pub wall_ms: f64,
    /// Warm start handed to the solver (stacked).
    pub warm: Vec<T>,
    /// Optimizer returned by the solver (stacked).
    pub optimizer: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopLog<T> {
    pub state_dim: usize,
    pub control_dim: usize,
    pub tau_plant: T,
    pub entries: Vec<LogEntry<T>>,
    /// State after the last logged step.
    pub final_state: Vec<T>,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
}

/// Runs `config.steps` closed-loop steps from `config.x0`. A failure stops
/// the run and is recorded in [`ClosedLoopLog::aborted`]; the entries up to
/// that point are kept.
pub fn simulate<T: Scalar>(
    config: &EmpcConfig<T>,
    controller: &Controller<T>,
    plant: &DiscreteDynamics<T>,
) -> ClosedLoopLog<T> {
    let mut log = ClosedLoopLog {
        state_dim: plant.state_dim(),
        control_dim: plant.control_dim(),
        tau_plant: plant.tau(),
        entries: Vec::with_capacity(config.steps),
        final_state: config.x0.clone(),
        aborted: None,
    };
    if let Err(e) = config.validate() {
        log.aborted = Some(e.to_string());
        return log;
    }
    let mut x = config.x0.clone();
    let mut previous: Option<SolveResult<T>> = None;
    for k in 0..config.steps {
        let started = Instant::now();
        let warm = controller.warm_start(previous.as_ref());
        let (u, result) = match controller.mpc_step(&x, previous.as_ref()) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("closed loop aborted at step {k}, x = {x:?}: {e}");
                log.aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let next = match plant.step(&x, &u) {
            Ok(v) => v,
            Err(e) => {
                log.aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let c = result.cost;
        log.entries.push(LogEntry {
            step: k,
            time: from_usize::<T>(k) * plant.tau(),
            ell: controller.objective().effective_stage(&x, &u),
            delta: distance(&next, &x) / plant.tau(),
            x: std::mem::replace(&mut x, next),
            u,
            j_star: c.total,
            v_star: c.running,
            psi_star: c.terminal,
            delta_n_star: c.terminal_delta,
            ell_n_star: c.terminal_ell,
            iterations: result.iterations,
            converged: result.converged,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            warm: warm.as_flat().to_vec(),
            optimizer: result.useq.as_flat().to_vec(),
        });
        previous = Some(result);
    }
    log.final_state = x;
    log
}

impl<T: Scalar> ClosedLoopLog<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut cols = vec!["step".to_string(), "time".to_string()];
        cols.extend((0..self.state_dim).map(|i| format!("x{i}")));
        cols.extend((0..self.control_dim).map(|i| format!("u{i}")));
        for c in [
            "ell", "delta", "J_star", "V_star", "Psi_star", "delta_N_star", "ell_N_star", "iters", "wall_ms",
        ] {
            cols.push(c.to_string());
        }
        cols
    }

    /// One row per step under [`csv_header`](Self::csv_header). Reals are
    /// written with round-trip precision. An aborted run ends with a
    /// `# aborted: …` line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.csv_header().join(","))?;
        for e in &self.entries {
            let mut row = vec![e.step.to_string(), fmt(e.time)];
            row.extend(e.x.iter().map(|&v| fmt(v)));
            row.extend(e.u.iter().map(|&v| fmt(v)));
            for v in [e.ell, e.delta, e.j_star, e.v_star, e.psi_star, e.delta_n_star, e.ell_n_star] {
                row.push(fmt(v));
            }
            row.push(e.iterations.to_string());
            row.push(format!("{:.3}", e.wall_ms));
            writeln!(out, "{}", row.join(","))?;
        }
        if let Some(reason) = &self.aborted {
            writeln!(out, "# aborted: {}", reason.replace('\n', " "))?;
        }
        Ok(())
    }

    /// Reads back a log written by [`write_csv`](Self::write_csv). Solver
    /// internals that the CSV does not carry (warm starts, optimizers,
    /// convergence flags) come back empty.
    pub fn read_csv<R: BufRead>(input: R, tau_plant: T) -> Result<Self> {
        let parse_err = |line: usize, msg: &str| EmpcError::InvalidArgument(format!("log line {line}: {msg}"));
        let mut lines = input.lines().enumerate();
        let header = match lines.next() {
            Some((_, Ok(h))) => h,
            _ => return Err(parse_err(1, "missing header")),
        };
        let cols: Vec<&str> = header.split(',').collect();
        let n = cols.iter().filter(|c| c.starts_with('x')).count();
        let m = cols.iter().filter(|c| c.starts_with('u')).count();
        if cols.len() != 2 + n + m + 9 || cols[0] != "step" {
            return Err(parse_err(1, "header does not match the closed-loop column contract"));
        }
        let mut log = ClosedLoopLog {
            state_dim: n,
            control_dim: m,
            tau_plant,
            entries: Vec::new(),
            final_state: Vec::new(),
            aborted: None,
        };
        for (i, line) in lines {
            let line = line.map_err(|e| parse_err(i + 1, &e.to_string()))?;
            if let Some(reason) = line.strip_prefix("# aborted: ") {
                log.aborted = Some(reason.to_string());
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(i + 1, &e.to_string()))?;
            if vals.len() != cols.len() {
                return Err(parse_err(i + 1, "wrong number of fields"));
            }
            let r = |j: usize| lit::<T>(vals[j]);
            let b = 2 + n + m;
            log.entries.push(LogEntry {
                step: vals[0] as usize,
                time: r(1),
                x: (2..2 + n).map(r).collect(),
                u: (2 + n..b).map(r).collect(),
                ell: r(b),
                delta: r(b + 1),
                j_star: r(b + 2),
                v_star: r(b + 3),
                psi_star: r(b + 4),
                delta_n_star: r(b + 5),
                ell_n_star: r(b + 6),
                iterations: vals[b + 7] as usize,
                converged: false,
                wall_ms: vals[b + 8],
                warm: Vec::new(),
                optimizer: Vec::new(),
            });
        }
        Ok(log)
    }
}

fn fmt<T: Scalar>(v: T) -> String {
    // `{:?}` on f64 prints the shortest round-trip representation.
    format!("{:?}", to_f64(v))
}
