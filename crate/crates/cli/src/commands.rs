use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rayon::prelude::*;
use serde::Serialize;

use empc::checks::run_suite;
use empc::{
    optimal_steady_pair, quasi_steady, simulate, solve_with_observer, terminal_bound_sweep, ClosedLoopLog,
    ControlSequence, IterationRecord, QuasiSteadyReport, SteadyPair,
};

use crate::config::{Resolved, RunConfig, SweepMode, SweepPoint};

/// Why a command failed; each variant maps to a stable exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Checks,
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Checks => 3,
        }
    }
}

pub type Outcome = Result<(), Failure>;

trait OrRuntime<T> {
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrRuntime<T> for Result<T, E> {
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
        .map_err(Failure::Config)
}

/// `foo.csv` → `foo.meta.toml`
fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.toml")
}

fn write_sidecar(csv: &Path, config: &RunConfig) -> anyhow::Result<()> {
    let text = toml::to_string(config)?;
    fs::write(sidecar_path(csv), text).with_context(|| format!("writing sidecar for {}", csv.display()))
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn steady_pair(config: &RunConfig, r: &Resolved) -> anyhow::Result<SteadyPair<f64>> {
    let predictor = r.empc.predictor(r.model.clone())?;
    Ok(optimal_steady_pair(&predictor, &r.base, &r.bounds, config.analysis.steady_grid, &r.empc.x0)?)
}

#[derive(Serialize)]
struct SteadyFile<'a> {
    model: &'a str,
    u_s: &'a [f64],
    x_s: &'a [f64],
    ell_s: f64,
    residual: f64,
}

pub fn steady(config: &RunConfig, r: &Resolved) -> Outcome {
    let pair = steady_pair(config, r).runtime()?;
    let dir = &config.output.dir;
    create_dir(dir)?;
    let file = SteadyFile {
        model: &config.model.name,
        u_s: &pair.u_s,
        x_s: &pair.x_s,
        ell_s: pair.ell_s,
        residual: pair.residual,
    };
    let text = toml::to_string(&file).runtime()?;
    let path = dir.join("steady.toml");
    fs::write(&path, text).runtime()?;
    write_sidecar(&path, &config.with_run_info("steady", None)).runtime()?;
    println!("u_s = {:?}", pair.u_s);
    println!("x_s = {:?}", pair.x_s);
    println!("ell_s = {:e}  residual = {:.1e}", pair.ell_s, pair.residual);
    Ok(())
}

#[derive(Serialize)]
struct IterationRow {
    iteration: usize,
    cost: f64,
    projected_grad_norm: f64,
    step: f64,
}

pub fn openloop(config: &RunConfig, r: &Resolved) -> Outcome {
    let predictor = r.empc.predictor(r.model.clone()).runtime()?;
    let objective = r.base.clone().with_weights(r.empc.alpha, r.empc.gamma).runtime()?;
    let cold = r.empc.cold_start.clone().unwrap_or_else(|| r.bounds.midpoint());
    let warm = ControlSequence::constant(&cold, r.empc.horizon, r.bounds.clone()).runtime()?;
    let mut records = Vec::new();
    let x0 = &r.empc.x0;
    let result = solve_with_observer(&predictor, &objective, x0, &warm, &r.empc.solver, &mut |rec: &IterationRecord<f64>| {
        records.push(IterationRow {
            iteration: rec.iteration,
            cost: rec.cost,
            projected_grad_norm: rec.projected_grad_norm,
            step: rec.step,
        })
    })
    .runtime()?;

    let dir = &config.output.dir;
    create_dir(dir)?;
    let meta = config.with_run_info("openloop", None);
    let iter_path = dir.join("openloop_iterations.csv");
    write_rows(&iter_path, &records).runtime()?;
    write_sidecar(&iter_path, &meta).runtime()?;

    // One row per predicted stage; the last row is the terminal pair.
    let traj = predictor.rollout(x0, &result.useq).runtime()?;
    let (n, m) = (predictor.state_dim(), predictor.control_dim());
    let mut header = vec!["k".to_string(), "time".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.extend(["ell".to_string(), "delta".to_string()]);
    let sol_path = dir.join("openloop_solution.csv");
    let mut w = csv::Writer::from_path(&sol_path).runtime()?;
    w.write_record(&header).runtime()?;
    for k in 0..result.useq.len() {
        let (x, u) = (&traj.states[k], result.useq.get(k));
        let (ell, delta) = objective.stage(&predictor, x, u).runtime()?;
        let mut row = vec![k.to_string(), format!("{:?}", k as f64 * predictor.tau())];
        row.extend(x.iter().chain(u).map(|v| format!("{v:?}")));
        row.extend([format!("{ell:?}"), format!("{delta:?}")]);
        w.write_record(&row).runtime()?;
    }
    w.flush().runtime()?;
    write_sidecar(&sol_path, &meta).runtime()?;

    let c = &result.cost;
    println!(
        "J* = {:e}  (V = {:e}, Psi_N = {:e}, delta_N = {:e}, ell_N = {:e})",
        c.total, c.running, c.terminal, c.terminal_delta, c.terminal_ell
    );
    println!(
        "{:?} after {} iterations, projected gradient {:.2e}; u*_0 = {:?}",
        result.termination,
        result.iterations,
        result.projected_grad_norm,
        result.useq.get(0)
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportFile {
    eps_ell: f64,
    eps_delta: f64,
    tail_distance: f64,
    tail_start: usize,
    tail_len: usize,
    stationary: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps_to_threshold: Option<usize>,
    ell_s: f64,
}

struct ClosedLoopRun {
    log: ClosedLoopLog<f64>,
    report: Option<QuasiSteadyReport<f64>>,
}

/// Simulates, then writes `closedloop.csv`, its sidecar and
/// `quasi_steady.toml` into `dir`. The CSV is written even if the run
/// aborted.
fn closed_loop_into(
    config: &RunConfig,
    r: &Resolved,
    steady: Option<&SteadyPair<f64>>,
    dir: &Path,
    meta: &RunConfig,
) -> anyhow::Result<ClosedLoopRun> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let controller = r.empc.controller(r.model.clone(), &r.base, r.bounds.clone())?;
    let plant = r.empc.plant(r.model.clone())?;
    let log = simulate(&r.empc, &controller, &plant);
    let csv_path = dir.join("closedloop.csv");
    log.write_csv(BufWriter::new(File::create(&csv_path)?))?;
    write_sidecar(&csv_path, meta)?;
    let report = match (steady, log.is_empty()) {
        (Some(s), false) => {
            let q = quasi_steady(&log, s, config.analysis.tail_fraction, r.thresholds)?;
            let file = ReportFile {
                eps_ell: q.eps_ell,
                eps_delta: q.eps_delta,
                tail_distance: q.tail_distance,
                tail_start: q.tail_start,
                tail_len: q.tail_len,
                stationary: q.stationary,
                steps_to_threshold: q.steps_to_threshold,
                ell_s: s.ell_s,
            };
            fs::write(dir.join("quasi_steady.toml"), toml::to_string(&file)?)?;
            Some(q)
        }
        _ => None,
    };
    Ok(ClosedLoopRun { log, report })
}

fn steady_or_warn(config: &RunConfig, r: &Resolved) -> Option<SteadyPair<f64>> {
    match steady_pair(config, r) {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("no steady pair, skipping the quasi-steady report: {e:#}");
            None
        }
    }
}

fn describe(report: &Option<QuasiSteadyReport<f64>>) -> String {
    match report {
        Some(q) => format!(
            "eps_ell = {:.3e}, eps_delta = {:.3e}, tail distance = {:.3e}, stationary = {}",
            q.eps_ell, q.eps_delta, q.tail_distance, q.stationary
        ),
        None => "no quasi-steady report".into(),
    }
}

pub fn closedloop(config: &RunConfig, r: &Resolved) -> Outcome {
    create_dir(&config.output.dir)?;
    let steady = steady_or_warn(config, r);
    let meta = config.with_run_info("closedloop", None);
    let run = closed_loop_into(config, r, steady.as_ref(), &config.output.dir, &meta).runtime()?;
    println!("{} steps written to {}", run.log.len(), config.output.dir.join("closedloop.csv").display());
    println!("{}", describe(&run.report));
    if let Some(reason) = run.log.aborted {
        return Err(Failure::Runtime(anyhow!("closed loop aborted: {reason}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    run: String,
    alpha: f64,
    gamma: f64,
    tau_plant: f64,
    steps: usize,
    eps_ell: Option<f64>,
    eps_delta: Option<f64>,
    tail_distance: Option<f64>,
    stationary: Option<bool>,
    steps_to_threshold: Option<usize>,
    error: Option<String>,
}

fn axis(values: &[f64], fallback: f64) -> Vec<f64> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

pub fn sweep(config: &RunConfig, r: &Resolved) -> Outcome {
    match config.sweep.mode {
        SweepMode::ClosedLoop => sweep_closed_loop(config, r),
        SweepMode::TerminalBound => sweep_terminal_bound(config, r),
    }
}

fn sweep_closed_loop(config: &RunConfig, r: &Resolved) -> Outcome {
    let s = &config.sweep;
    let mut points = Vec::new();
    for &alpha in &axis(&s.alpha, config.objective.alpha) {
        for &gamma in &axis(&s.gamma, config.objective.gamma) {
            for &tau_plant in &axis(&s.tau_plant, config.controller.tau_plant) {
                points.push(SweepPoint { alpha, gamma, tau_plant });
            }
        }
    }
    // Resolve every point before any run starts.
    let mut jobs = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut c = config.clone();
        c.objective.alpha = p.alpha;
        c.objective.gamma = p.gamma;
        c.controller.tau_plant = p.tau_plant;
        if !s.tau_plant.is_empty() {
            c.controller.plant_substeps = None;
        }
        let resolved = c.resolve().map_err(|e| Failure::Config(e.context(format!("sweep point {p:?}"))))?;
        jobs.push((format!("run_{i:03}"), c, resolved, *p));
    }
    let root = &config.output.dir;
    create_dir(&root.join("runs"))?;
    let steady = steady_or_warn(config, r);

    let pool = rayon::ThreadPoolBuilder::new().num_threads(s.workers).build().runtime()?;
    let rows: Vec<SweepRow> = pool.install(|| {
        jobs.par_iter()
            .map(|(name, c, resolved, p)| {
                let dir = root.join("runs").join(name);
                let meta = c.with_run_info("sweep", Some(*p));
                let outcome = closed_loop_into(c, resolved, steady.as_ref(), &dir, &meta);
                let (report, error) = match outcome {
                    Ok(run) => (run.report, run.log.aborted),
                    Err(e) => (None, Some(format!("{e:#}"))),
                };
                log::info!("{name} {p:?}: {}", describe(&report));
                SweepRow {
                    run: name.clone(),
                    alpha: p.alpha,
                    gamma: p.gamma,
                    tau_plant: p.tau_plant,
                    steps: c.controller.steps,
                    eps_ell: report.as_ref().map(|q| q.eps_ell),
                    eps_delta: report.as_ref().map(|q| q.eps_delta),
                    tail_distance: report.as_ref().map(|q| q.tail_distance),
                    stationary: report.as_ref().map(|q| q.stationary),
                    steps_to_threshold: report.as_ref().and_then(|q| q.steps_to_threshold),
                    error,
                }
            })
            .collect()
    });

    let summary = root.join("sweep_summary.csv");
    write_rows(&summary, &rows).runtime()?;
    write_sidecar(&summary, &config.with_run_info("sweep", None)).runtime()?;
    for row in &rows {
        let status = match (&row.error, row.eps_delta) {
            (Some(e), _) => format!("failed: {e}"),
            (None, Some(d)) => format!("eps_delta = {d:.3e}, stationary = {}", row.stationary == Some(true)),
            (None, None) => "no report".into(),
        };
        println!("{} alpha={} gamma={} tau_plant={}: {status}", row.run, row.alpha, row.gamma, row.tau_plant);
    }
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(Failure::Runtime(anyhow!("every sweep run failed")));
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundRow {
    alpha: f64,
    gamma: f64,
    delta_n: f64,
    ell_n: f64,
    j_star: f64,
    j_reevaluated: f64,
    iterations: usize,
    converged: bool,
    error: Option<String>,
}

#[derive(Serialize)]
struct FitRow {
    alpha: f64,
    c3: f64,
    c4: f64,
    residual3: f64,
    residual4: f64,
    delta_ratio: f64,
    ell_ratio: f64,
}

fn sweep_terminal_bound(config: &RunConfig, r: &Resolved) -> Outcome {
    let alphas = axis(&config.sweep.alpha, config.objective.alpha);
    let gammas = &config.sweep.gamma;
    if gammas.len() < 3 {
        return Err(Failure::Config(anyhow!("terminal-bound sweeps need at least 3 values in sweep.gamma")));
    }
    let steady = steady_pair(config, r).runtime()?;
    let predictor = r.empc.predictor(r.model.clone()).runtime()?;
    let report = terminal_bound_sweep(
        &predictor,
        &r.base,
        &r.bounds,
        r.empc.horizon,
        &r.empc.x0,
        &alphas,
        gammas,
        &r.empc.solver,
        &steady,
    )
    .runtime()?;
    let root = &config.output.dir;
    create_dir(root)?;
    let meta = config.with_run_info("sweep", None);
    let rows: Vec<BoundRow> = report
        .points
        .iter()
        .map(|p| BoundRow {
            alpha: p.alpha,
            gamma: p.gamma,
            delta_n: p.delta_n,
            ell_n: p.ell_n,
            j_star: p.j_star,
            j_reevaluated: p.j_reevaluated,
            iterations: p.iterations,
            converged: p.converged,
            error: p.error.clone(),
        })
        .collect();
    let points_path = root.join("terminal_bound.csv");
    write_rows(&points_path, &rows).runtime()?;
    write_sidecar(&points_path, &meta).runtime()?;
    let fits: Vec<FitRow> = report
        .fits
        .iter()
        .map(|f| FitRow {
            alpha: f.alpha,
            c3: f.c3,
            c4: f.c4,
            residual3: f.residual3,
            residual4: f.residual4,
            delta_ratio: f.delta_ratio,
            ell_ratio: f.ell_ratio,
        })
        .collect();
    let fits_path = root.join("terminal_bound_fits.csv");
    write_rows(&fits_path, &fits).runtime()?;
    write_sidecar(&fits_path, &meta).runtime()?;
    for f in &fits {
        println!(
            "alpha={}: delta_N ~ {:.3e}/gamma, |ell_N - ell_s| ~ {:.3e}/gamma; max/min gamma*value {:.2} and {:.2}",
            f.alpha, f.c3, f.c4, f.delta_ratio, f.ell_ratio
        );
    }
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(Failure::Runtime(anyhow!("every terminal-bound solve failed")));
    }
    Ok(())
}

pub fn check(config: &RunConfig, r: &Resolved) -> Outcome {
    let instance = r.check_instance().runtime()?;
    let report = run_suite(&instance, &config.check_settings()).runtime()?;
    print!("{report}");
    if report.passed() {
        println!("all {} checks passed", report.items.len());
        Ok(())
    } else {
        let failed = report.items.iter().filter(|i| !i.passed).count();
        println!("{failed} of {} checks failed", report.items.len());
        Err(Failure::Checks)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    Trajectory,
    Tail,
    Overlay,
    BoundScaling,
}

#[derive(Debug, Serialize)]
pub struct PlotSpec {
    pub inputs: Vec<PathBuf>,
    pub kind: PlotKind,
    pub tail_fraction: f64,
    pub output: PathBuf,
}

const BOUND_COLUMNS: [&str; 4] = ["alpha", "gamma", "delta_n", "ell_n"];

fn validate_input(kind: PlotKind, path: &Path) -> anyhow::Result<()> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    match kind {
        PlotKind::BoundScaling => {
            let mut reader = csv::Reader::from_reader(file);
            let header = reader.headers()?.clone();
            if let Some(missing) = BOUND_COLUMNS.iter().find(|c| !header.iter().any(|h| h == **c)) {
                bail!("{} lacks column `{missing}`", path.display());
            }
        }
        _ => {
            let log = ClosedLoopLog::<f64>::read_csv(BufReader::new(file), 1.0)
                .with_context(|| format!("{} is not a closed-loop log", path.display()))?;
            if log.is_empty() {
                bail!("{} has no rows", path.display());
            }
        }
    }
    Ok(())
}

/// Validates the inputs and writes the spec the plotting script reads.
pub fn plot_export(spec: PlotSpec, spec_path: &Path) -> Outcome {
    let inputs_ok = match spec.kind {
        PlotKind::Overlay => spec.inputs.len() >= 2,
        _ => spec.inputs.len() == 1,
    };
    if !inputs_ok {
        return Err(Failure::Config(anyhow!(
            "{:?} plots take {} input CSV(s), got {}",
            spec.kind,
            if spec.kind == PlotKind::Overlay { "two or more" } else { "exactly one" },
            spec.inputs.len()
        )));
    }
    if !(spec.tail_fraction > 0.0 && spec.tail_fraction <= 1.0) {
        return Err(Failure::Config(anyhow!("tail fraction must lie in (0, 1]")));
    }
    for input in &spec.inputs {
        validate_input(spec.kind, input).map_err(Failure::Config)?;
    }
    if let Some(parent) = spec_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut out = BufWriter::new(File::create(spec_path).runtime()?);
    serde_json::to_writer_pretty(&mut out, &spec).runtime()?;
    writeln!(out).runtime()?;
    println!("wrote {}", spec_path.display());
    Ok(())
}
