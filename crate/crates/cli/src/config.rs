//! Run configuration: a TOML file with `model`, `objective`, `controller`,
//! `analysis`, `sweep`, `check` and `output` sections, every key optional.
//! `--set section.key=value` overrides are applied to the parsed table
//! before it is typed, so they obey the same schema as the file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use empc::checks::{CheckInstance, CheckSettings};
use empc::models::MODEL_NAMES;
use empc::objective::STAGE_COST_NAMES;
use empc::{
    build_model, build_stage_cost, AffineConstraint, ControlBounds, EconomicObjective, EmpcConfig, GradientMode,
    ModelEntry, ModelParams, OdeModel, SolverSettings, Thresholds,
};

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub objective: ObjectiveSection,
    pub controller: ControllerSection,
    pub analysis: AnalysisSection,
    pub sweep: SweepSection,
    pub check: CheckSection,
    pub output: OutputSection,
    /// Provenance written into sidecars; ignored on input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub params: ModelParams,
    /// Initial state; the model's default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { name: "cstr".into(), params: ModelParams::new(), x0: None }
    }
}

/// `x[index] <= upper` and/or `x[index] >= lower`.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StateBound {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub stage_cost: String,
    pub alpha: f64,
    pub gamma: f64,
    pub rho: f64,
    pub constraints: Vec<StateBound>,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        Self { stage_cost: "neg_x2".into(), alpha: 0.01, gamma: 0.001, rho: 0.0, constraints: Vec::new() }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub horizon: usize,
    pub tau_pred: f64,
    pub tau_plant: f64,
    pub pred_substeps: usize,
    /// Derived from the predictor's RK4 step when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plant_substeps: Option<usize>,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cold_start: Option<Vec<f64>>,
    pub solver: SolverSection,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            horizon: 20,
            tau_pred: 0.1,
            tau_plant: 0.1,
            pred_substeps: 20,
            plant_substeps: None,
            steps: 400,
            cold_start: None,
            solver: SolverSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum GradientName {
    Adjoint,
    FiniteDifference,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub fd_step: f64,
    pub gradient: GradientName,
    pub memory: usize,
    pub stall_window: usize,
    pub stall_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverSettings::<f64>::default();
        Self {
            max_iters: s.max_iters,
            grad_tol: s.grad_tol,
            step_tol: s.step_tol,
            fd_step: s.fd_step,
            gradient: GradientName::Adjoint,
            memory: s.memory,
            stall_window: s.stall_window,
            stall_tol: s.stall_tol,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub tail_fraction: f64,
    pub eps_ell: f64,
    pub eps_delta: f64,
    pub steady_grid: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let t = Thresholds::<f64>::default();
        Self { tail_fraction: 0.25, eps_ell: t.eps_ell, eps_delta: t.eps_delta, steady_grid: 201 }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    #[default]
    ClosedLoop,
    TerminalBound,
}

/// Axes left empty fall back to the single value in the other sections.
#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub mode: SweepMode,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub tau_plant: Vec<f64>,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSection {
    pub gradient_probes: usize,
    pub fd_step: f64,
    pub gradient_tol: f64,
    pub grid_tol: f64,
    pub argmin_tol: f64,
    pub lemma_samples: usize,
    pub lemma_alpha: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        let c = CheckSettings::<f64>::default();
        Self {
            gradient_probes: c.gradient_probes,
            fd_step: c.fd_step,
            gradient_tol: c.gradient_tol,
            grid_tol: c.grid_tol,
            argmin_tol: c.argmin_tol,
            lemma_samples: c.lemma_samples,
            lemma_alpha: c.lemma_alpha,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub seed: u64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), seed: 0 }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(default)]
pub struct RunInfo {
    pub command: String,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_point: Option<SweepPoint>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq)]
pub struct SweepPoint {
    pub alpha: f64,
    pub gamma: f64,
    pub tau_plant: f64,
}

/// Reads `path` (or starts from defaults) and applies `overrides`.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse().with_context(|| format!("parsing {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut config: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    config.run = None;
    Ok(config)
}

/// `a.b.c=value`, where `value` is TOML (`0.1`, `[1, 2]`, `"adjoint"`) or a
/// bare word taken as a string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override `{spec}` has an empty key segment");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{spec}`: `{p}` is not a section"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Everything a command needs, built and validated from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Resolved {
    pub model: Arc<dyn OdeModel<f64>>,
    pub bounds: ControlBounds<f64>,
    /// Stage cost and soft constraints; weights are zero.
    pub base: EconomicObjective<f64>,
    pub empc: EmpcConfig<f64>,
    pub thresholds: Thresholds<f64>,
}

impl RunConfig {
    pub fn resolve(&self) -> Result<Resolved> {
        if !MODEL_NAMES.contains(&self.model.name.as_str()) {
            bail!("unknown model `{}` (expected one of {})", self.model.name, MODEL_NAMES.join(", "));
        }
        if !STAGE_COST_NAMES.contains(&self.objective.stage_cost.as_str()) {
            bail!(
                "unknown stage cost `{}` (expected one of {})",
                self.objective.stage_cost,
                STAGE_COST_NAMES.join(", ")
            );
        }
        let ModelEntry { model, bounds, default_x0 } = build_model::<f64>(&self.model.name, &self.model.params)?;
        let (n, m) = (model.state_dim(), model.control_dim());
        let x0 = self.model.x0.clone().unwrap_or(default_x0);
        if x0.len() != n {
            bail!("model.x0 has {} entries, model `{}` has {n} states", x0.len(), self.model.name);
        }

        let o = &self.objective;
        let mut constraints = Vec::new();
        for b in &o.constraints {
            if b.index >= n {
                bail!("constraint index {} out of range for {n} states", b.index);
            }
            if b.lower.is_none() && b.upper.is_none() {
                bail!("constraint on x[{}] has neither lower nor upper", b.index);
            }
            constraints.extend(b.lower.map(|v| AffineConstraint::lower(b.index, n, v)));
            constraints.extend(b.upper.map(|v| AffineConstraint::upper(b.index, n, v)));
        }
        let base = EconomicObjective::new(build_stage_cost(&o.stage_cost, n, m)?)
            .with_soft_constraints(constraints, o.rho)?;
        // Weight checks only; the controller applies them itself.
        base.clone().with_weights(o.alpha, o.gamma)?;

        let c = &self.controller;
        let s = &c.solver;
        let solver = SolverSettings {
            max_iters: s.max_iters,
            grad_tol: s.grad_tol,
            step_tol: s.step_tol,
            fd_step: s.fd_step,
            gradient_mode: match s.gradient {
                GradientName::Adjoint => GradientMode::Adjoint,
                GradientName::FiniteDifference => GradientMode::FiniteDifference,
            },
            memory: s.memory,
            stall_window: s.stall_window,
            stall_tol: s.stall_tol,
        };
        if c.pred_substeps == 0 {
            bail!("controller.pred_substeps must be >= 1");
        }
        if let Some(cold) = &c.cold_start {
            if cold.len() != m || !bounds.contains(cold) {
                bail!("controller.cold_start {cold:?} must be a point of the {m}-dimensional input box");
            }
        }
        let empc = EmpcConfig {
            horizon: c.horizon,
            alpha: o.alpha,
            gamma: o.gamma,
            tau_pred: c.tau_pred,
            tau_plant: c.tau_plant,
            pred_substeps: c.pred_substeps,
            plant_substeps: c.plant_substeps.unwrap_or_else(|| plant_substeps(c.tau_pred, c.pred_substeps, c.tau_plant)),
            steps: c.steps,
            x0,
            solver,
            cold_start: c.cold_start.clone(),
        };
        empc.validate()?;
        if empc.plant_substeps == 0 {
            bail!("controller.plant_substeps must be >= 1");
        }

        let a = &self.analysis;
        if !(a.tail_fraction > 0.0 && a.tail_fraction <= 1.0) {
            bail!("analysis.tail_fraction must lie in (0, 1], got {}", a.tail_fraction);
        }
        if a.steady_grid < 3 {
            bail!("analysis.steady_grid must be >= 3");
        }
        Ok(Resolved {
            model,
            bounds,
            base,
            empc,
            thresholds: Thresholds { eps_ell: a.eps_ell, eps_delta: a.eps_delta },
        })
    }

    pub fn check_settings(&self) -> CheckSettings<f64> {
        let c = &self.check;
        CheckSettings {
            gradient_probes: c.gradient_probes,
            fd_step: c.fd_step,
            gradient_tol: c.gradient_tol,
            grid_tol: c.grid_tol,
            argmin_tol: c.argmin_tol,
            lemma_samples: c.lemma_samples,
            lemma_alpha: c.lemma_alpha,
            seed: self.output.seed,
            ..CheckSettings::default()
        }
    }

    /// Copy with provenance attached, ready to be written as a sidecar.
    pub fn with_run_info(&self, command: &str, sweep_point: Option<SweepPoint>) -> RunConfig {
        let mut c = self.clone();
        c.run = Some(RunInfo { command: command.into(), version: env!("CARGO_PKG_VERSION").into(), sweep_point });
        c
    }
}

impl Resolved {
    pub fn check_instance(&self) -> Result<CheckInstance<f64>> {
        Ok(CheckInstance {
            dynamics: self.empc.predictor(self.model.clone())?,
            objective: self.base.clone().with_weights(self.empc.alpha, self.empc.gamma)?,
            bounds: self.bounds.clone(),
            x0: self.empc.x0.clone(),
            horizon: self.empc.horizon,
            solver: self.empc.solver.clone(),
        })
    }
}

/// Plant RK4 substeps giving the predictor's step length.
pub fn plant_substeps(tau_pred: f64, pred_substeps: usize, tau_plant: f64) -> usize {
    let h = tau_pred / pred_substeps.max(1) as f64;
    ((tau_plant / h).round() as usize).max(1)
}
