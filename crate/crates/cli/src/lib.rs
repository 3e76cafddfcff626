//! Batch front end: run configuration, subcommand execution and on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use mfgweak::bsde::{
    energy_self_check, monotone_decreasing, stability_run, Driver, DriverSpec, StabilityTable,
};
use mfgweak::fixedpoint::{
    iterate, model_bounds, model_driver, solution_map, truncated_solve, verify_equilibrium, FixedPointConfig,
    FixedPointState, FixedPointStatus, IterateOutcome, TruncationStatus, VerifyConfig,
};
use mfgweak::io::{
    write_array_file, write_flow_summary_csv, write_iterations_csv, write_json_file, write_table_csv,
};
use mfgweak::measure::{cutoff_activity, MeasureFlow};
use mfgweak::model::{check_maximizer, ActionGrid, MaximizerSample};
use mfgweak::paths::{simulate_brownian, simulate_state, PathEnsemble, PathPrefix, TimeGrid};
use mfgweak::regression::RegressionConfig;
use mfgweak::{GameModel, ModelRegistry};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    SolveBsde,
    SolveMfg,
    Verify,
    Stability,
    Diagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: "additive".into(),
            params: Value::Null,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Must agree with the model horizon when given.
    pub horizon: Option<f64>,
    pub n_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: None,
            n_steps: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    pub schedule: Vec<f64>,
    #[serde(default = "default_truncation_tol")]
    pub tol: f64,
}

fn default_truncation_tol() -> f64 {
    2e-2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilitySequence {
    /// `|Z|` clipped at each level.
    Truncation,
    /// Terminal reward shifted by `sin(x_T)/n`.
    Terminal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub sequence: StabilitySequence,
    pub levels: Vec<f64>,
    pub slack: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            sequence: StabilitySequence::Terminal,
            levels: vec![1.0, 2.0, 4.0, 8.0],
            slack: 0.1,
        }
    }
}

/// Complete description of one run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub monte_carlo: MonteCarloConfig,
    pub regression: RegressionConfig,
    pub fixedpoint: FixedPointConfig,
    pub truncation: Option<TruncationConfig>,
    pub verify: VerifyConfig,
    pub stability: StabilityConfig,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Parses JSON, reporting the dotted path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("invalid config at `{path}`: {}", e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.n_steps == 0 {
            bail!("invalid config at `grid.n_steps`: must be >= 1");
        }
        if let Some(h) = self.grid.horizon {
            if !(h.is_finite() && h > 0.0) {
                bail!("invalid config at `grid.horizon`: must be > 0");
            }
        }
        if self.monte_carlo.n_paths < self.regression.min_paths.max(2) {
            bail!(
                "invalid config at `monte_carlo.n_paths`: must be >= {} (regression.min_paths), got {}",
                self.regression.min_paths.max(2),
                self.monte_carlo.n_paths
            );
        }
        self.regression
            .validate()
            .map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        let fp = FixedPointConfig {
            regression: self.regression.clone(),
            ..self.fixedpoint.clone()
        };
        fp.validate().map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        if let Some(t) = &self.truncation {
            if t.schedule.is_empty() || t.schedule.iter().any(|v| !(*v > 0.0)) {
                bail!("invalid config at `truncation.schedule`: levels must be positive and non-empty");
            }
            if !(t.tol >= 0.0) {
                bail!("invalid config at `truncation.tol`: must be >= 0");
            }
        }
        if !(self.verify.epsilon > 0.0) {
            bail!("invalid config at `verify.epsilon`: must be > 0");
        }
        if self.stability.levels.is_empty() || self.stability.levels.iter().any(|v| !(*v > 0.0)) {
            bail!("invalid config at `stability.levels`: levels must be positive and non-empty");
        }
        Ok(())
    }

    /// The fixed-point configuration with the shared regression settings applied.
    pub fn fixedpoint(&self) -> FixedPointConfig {
        FixedPointConfig {
            regression: self.regression.clone(),
            ..self.fixedpoint.clone()
        }
    }
}

/// How a run ended, mapped onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Verified,
    NotVerified,
}

impl RunStatus {
    pub fn from_flag(ok: bool) -> Self {
        if ok {
            RunStatus::Verified
        } else {
            RunStatus::NotVerified
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Verified => 0,
            RunStatus::NotVerified => 2,
        }
    }
}

/// Options supplied on the command line.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub command: Command,
    pub config_path: PathBuf,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

struct RunContext<'a> {
    config: &'a RunConfig,
    model: Arc<dyn GameModel>,
    ensemble: PathEnsemble,
    out: &'a Path,
    files: Vec<PathBuf>,
}

impl RunContext<'_> {
    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.files.push(PathBuf::from(name));
        Ok(p)
    }

    fn array(&mut self, name: &str, array: &Array3<f64>) -> Result<()> {
        let p = self.path(name)?;
        write_array_file(&p, array)?;
        Ok(())
    }

    fn csv<F>(&mut self, name: &str, write: F) -> Result<()>
    where
        F: FnOnce(&mut fs::File) -> mfgweak::Result<()>,
    {
        let p = self.path(name)?;
        let mut f = fs::File::create(&p)?;
        write(&mut f)?;
        Ok(())
    }

    fn flow(&mut self, prefix: &str, flow: &MeasureFlow) -> Result<()> {
        let (m, n1) = flow.weights().dim();
        let w = flow.weights().clone().into_shape_with_order((m, n1, 1))?;
        self.array(&format!("flows/{prefix}_weights.bin"), &w)?;
        if flow.dim_values() > 0 {
            self.array(&format!("flows/{prefix}_values.bin"), flow.values())?;
        }
        self.csv(&format!("{prefix}_summary.csv"), |f| write_flow_summary_csv(f, flow))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads the configuration, runs the subcommand, writes the report and the manifest.
pub fn run(opts: &RunOptions) -> Result<RunStatus> {
    let raw = fs::read(&opts.config_path).with_context(|| format!("reading {}", opts.config_path.display()))?;
    let text = String::from_utf8(raw.clone()).context("config is not UTF-8")?;
    let mut config = RunConfig::from_json(&text)?;
    if let Some(seed) = opts.seed {
        config.monte_carlo.seed = seed;
    }
    let out = opts
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let execute = || execute(opts.command, &config, &out);
    let result = match opts.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .context("building the worker pool")?
            .install(execute),
        None => execute(),
    };

    let (status, report, mut files) = match result {
        Ok(v) => v,
        Err(e) => {
            let module = e
                .downcast_ref::<mfgweak::Error>()
                .map_or("cli", mfgweak::Error::module);
            let report = json!({ "status": "error", "module": module, "error": format!("{e:#}") });
            write_json_file(&out.join("report.json"), &report)?;
            return Err(e);
        }
    };
    write_json_file(&out.join("report.json"), &report)?;
    files.push(PathBuf::from("report.json"));

    let mut hashes = BTreeMap::new();
    for f in &files {
        let bytes = fs::read(out.join(f))?;
        hashes.insert(f.to_string_lossy().into_owned(), sha256_hex(&bytes));
    }
    let manifest = json!({
        "command": opts.command,
        "config_path": opts.config_path,
        "config_sha256": sha256_hex(&raw),
        "seed": config.monte_carlo.seed,
        "effective_config": config,
        "status": status,
        "files": hashes,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json_file(&out.join("manifest.json"), &manifest)?;
    Ok(status)
}

fn build_model(config: &RunConfig) -> Result<Arc<dyn GameModel>> {
    let registry = ModelRegistry::with_builtins();
    let model = registry.build(&config.model.name, &config.model.params)?;
    if let Some(h) = config.grid.horizon {
        if (h - model.horizon()).abs() > 1e-12 {
            bail!(
                "invalid config at `grid.horizon`: {h} differs from the model horizon {}",
                model.horizon()
            );
        }
    }
    Ok(model)
}

fn build_ensemble(model: &dyn GameModel, config: &RunConfig) -> Result<PathEnsemble> {
    let grid = TimeGrid::uniform(model.horizon(), config.grid.n_steps)?;
    let dw = simulate_brownian(&grid, config.monte_carlo.n_paths, model.dim_state(), config.monte_carlo.seed)?;
    Ok(simulate_state(model, &dw)?)
}

fn execute(command: Command, config: &RunConfig, out: &Path) -> Result<(RunStatus, Value, Vec<PathBuf>)> {
    let model = build_model(config)?;
    let ensemble = build_ensemble(model.as_ref(), config)?;
    let mut ctx = RunContext {
        config,
        model,
        ensemble,
        out,
        files: Vec::new(),
    };
    let (status, report) = match command {
        Command::Simulate => simulate(&mut ctx)?,
        Command::SolveBsde => solve_bsde(&mut ctx)?,
        Command::SolveMfg => {
            let (status, report, _) = solve_mfg(&mut ctx)?;
            (status, report)
        }
        Command::Verify => verify(&mut ctx)?,
        Command::Stability => stability(&mut ctx)?,
        Command::Diagnostics => diagnostics(&mut ctx)?,
    };
    let report = json!({
        "command": command,
        "model": ctx.model.name(),
        "status": status,
        "result": report,
    });
    Ok((status, report, ctx.files))
}

fn simulate(ctx: &mut RunContext<'_>) -> Result<(RunStatus, Value)> {
    let ens = ctx.ensemble.clone();
    ctx.array("flows/states.bin", &ens.states)?;
    ctx.array("flows/increments.bin", &ens.increments)?;
    ctx.flow("reference", &MeasureFlow::reference(&ens))?;
    let report = json!({
        "n_paths": ens.n_paths(),
        "n_steps": ens.n_steps(),
        "dim": ens.dim(),
        "seed": ens.seed,
        "near_singular_sigma": ens.near_singular_sigma,
    });
    Ok((RunStatus::Verified, report))
}

/// One application of the solution map from the reference laws.
fn solve_bsde(ctx: &mut RunContext<'_>) -> Result<(RunStatus, Value)> {
    let cfg = ctx.config.fixedpoint();
    let state = FixedPointState::initial(ctx.model.as_ref(), &ctx.ensemble, cfg.cutoff)?;
    let out = solution_map(&ctx.model, &ctx.ensemble, &state, &cfg)?;
    let energy = energy_self_check(&out.solution, &ctx.ensemble, &cfg.regression)?;
    let (m, n1) = out.solution.y.dim();
    ctx.array("flows/y.bin", &out.solution.y.clone().into_shape_with_order((m, n1, 1))?)?;
    ctx.array("flows/z.bin", &out.solution.z)?;
    ctx.flow("nu", &out.nu)?;
    let report = json!({
        "y0": out.solution.y0(),
        "diagnostics": out.diagnostics,
        "energy": energy,
    });
    Ok((RunStatus::from_flag(energy.holds), report))
}

fn solve_mfg(ctx: &mut RunContext<'_>) -> Result<(RunStatus, Value, IterateOutcome)> {
    let cfg = ctx.config.fixedpoint();
    let (outcome, truncation) = match &ctx.config.truncation {
        Some(t) => {
            let (report, outcome) = truncated_solve(&ctx.model, &ctx.ensemble, &t.schedule, &cfg, t.tol)?;
            (outcome, Some(report))
        }
        None => (iterate(&ctx.model, &ctx.ensemble, &cfg)?, None),
    };
    let rows = outcome.report.rows.clone();
    ctx.csv("iterations.csv", |f| write_iterations_csv(f, &rows))?;
    ctx.flow("mu", &outcome.state.mu)?;
    ctx.flow("nu", &outcome.check.nu)?;
    ctx.array("flows/z.bin", &outcome.check.solution.z)?;
    if let Some(t) = &truncation {
        let rows: Vec<Vec<f64>> = t
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.level,
                    r.iterations as f64,
                    r.y0,
                    r.distance_to_previous.unwrap_or(f64::NAN),
                    r.cutoff_activity,
                ]
            })
            .collect();
        ctx.csv("truncation.csv", |f| {
            write_table_csv(f, &["level", "iterations", "Y0", "distance_to_previous", "cutoff_activity"], &rows)
        })?;
    }
    let converged =
        outcome.report.status == FixedPointStatus::Converged && outcome.report.recheck_residual <= cfg.tol;
    let stabilized = truncation.as_ref().map_or(true, |t| t.status == TruncationStatus::Stabilized);
    let report = json!({
        "y0": outcome.check.solution.y0(),
        "fixedpoint": outcome.report,
        "truncation": truncation,
        "diagnostics": outcome.check.diagnostics,
    });
    Ok((RunStatus::from_flag(converged && stabilized), report, outcome))
}

fn verify(ctx: &mut RunContext<'_>) -> Result<(RunStatus, Value)> {
    let (status, mut report, outcome) = solve_mfg(ctx)?;
    let cfg = ctx.config.fixedpoint();
    let eq = verify_equilibrium(ctx.model.as_ref(), &ctx.ensemble, &outcome, &cfg, &ctx.config.verify)?;
    let rows: Vec<Vec<f64>> = eq.deviations.iter().map(|d| vec![d.epsilon, d.gain, d.se]).collect();
    ctx.csv("deviations.csv", |f| write_table_csv(f, &["epsilon", "gain", "se"], &rows))?;
    let ok = status == RunStatus::Verified && eq.verified;
    report["equilibrium"] = serde_json::to_value(&eq)?;
    Ok((RunStatus::from_flag(ok), report))
}

/// Shifts the terminal reward of a driver by `sin(x_T[0]) · scale`.
struct PerturbedTerminal {
    inner: Arc<dyn Driver>,
    scale: f64,
}

impl Driver for PerturbedTerminal {
    fn generator(&self, n: usize, i: usize, path: PathPrefix<'_>, z: &[f64]) -> f64 {
        self.inner.generator(n, i, path, z)
    }

    fn terminal(&self, i: usize, path: PathPrefix<'_>) -> f64 {
        self.inner.terminal(i, path) + self.scale * path.current()[0].sin()
    }

    fn measure_drift(&self, n: usize, i: usize, path: PathPrefix<'_>, z: &[f64], out: &mut [f64]) {
        self.inner.measure_drift(n, i, path, z, out);
    }
}

fn stability(ctx: &mut RunContext<'_>) -> Result<(RunStatus, Value)> {
    let cfg = ctx.config.fixedpoint();
    let sc = &ctx.config.stability;
    let state = FixedPointState::initial(ctx.model.as_ref(), &ctx.ensemble, cfg.cutoff)?;
    let base: Arc<dyn Driver> = Arc::new(model_driver(ctx.model.clone(), &state)?);
    let mut specs: Vec<DriverSpec> = sc
        .levels
        .iter()
        .map(|&level| match sc.sequence {
            StabilitySequence::Truncation => DriverSpec::new(base.clone()).with_clip(Some(level)),
            StabilitySequence::Terminal => DriverSpec::new(Arc::new(PerturbedTerminal {
                inner: base.clone(),
                scale: 1.0 / level,
            })),
        })
        .collect();
    specs.push(DriverSpec::new(base));
    let table: StabilityTable = stability_run(&specs, &ctx.ensemble, &cfg.regression)?;
    let n = sc.levels.len();
    let z_gap: Vec<f64> = table.rows[..n].iter().map(|r| r.z_gap).collect();
    let tv: Vec<f64> = table.rows[..n].iter().map(|r| r.tv_bound).collect();
    let ok = monotone_decreasing(&z_gap, sc.slack) && monotone_decreasing(&tv, sc.slack);
    let rows: Vec<Vec<f64>> = table
        .rows
        .iter()
        .zip(sc.levels.iter().copied().chain([f64::INFINITY]))
        .map(|(r, level)| vec![level, r.y0, r.y0_gap, r.z_gap, r.kl, r.tv_bound, r.flow_distance])
        .collect();
    ctx.csv("stability.csv", |f| {
        write_table_csv(f, &["level", "Y0", "y0_gap", "z_gap", "kl", "tv_bound", "flow_distance"], &rows)
    })?;
    Ok((RunStatus::from_flag(ok), json!({ "table": table, "monotone": ok })))
}

fn diagnostics(ctx: &mut RunContext<'_>) -> Result<(RunStatus, Value)> {
    let cfg = ctx.config.fixedpoint();
    let model = ctx.model.clone();
    let ens = ctx.ensemble.clone();
    let bounds = model_bounds(model.as_ref());
    let state = FixedPointState::initial(model.as_ref(), &ens, cfg.cutoff)?;
    let out = solution_map(&model, &ens, &state, &cfg)?;

    // Maximizer check on a handful of prefixes and Z values from the run.
    let law = out.mu.marginal(0)?;
    let d = model.dim_state();
    let stride = (ens.n_paths() / 16).max(1);
    let samples: Vec<MaximizerSample> = (0..ens.n_paths())
        .step_by(stride)
        .take(16)
        .flat_map(|i| {
            let n = ens.n_steps() / 2;
            let p = ens.prefix(i, n);
            let z: Vec<f64> = (0..d).map(|j| out.solution.z[[i, n, j]]).collect();
            let law = law.clone();
            let times = p.times().to_vec();
            let states = p.states().to_vec();
            [0.0, 1.0].into_iter().map(move |shift| MaximizerSample {
                times: times.clone(),
                states: states.clone(),
                z: z.iter().map(|v| v + shift).collect(),
                law: law.clone(),
            })
        })
        .collect();
    let maximizer = check_maximizer(model.as_ref(), &samples, &ActionGrid::default(), 1e-9);
    let maximizer_ok = maximizer.is_ok();
    let activity = cfg.cutoff.map(|c| cutoff_activity(&out.nu, c));
    let tightness_ok = out.diagnostics.tightness.as_ref().and_then(|t| t.passed).unwrap_or(true);
    ctx.flow("nu", &out.nu)?;
    let report = json!({
        "apriori_bounds": bounds.as_ref().ok(),
        "apriori_bounds_error": bounds.as_ref().err().map(|e| e.to_string()),
        "phi": out.diagnostics,
        "maximizer": match &maximizer { Ok(r) => serde_json::to_value(r)?, Err(e) => json!({ "error": e.to_string() }) },
        "cutoff_activity": activity,
    });
    let ok = maximizer_ok && tightness_ok && !out.diagnostics.reverse_holder_blow_up;
    Ok((RunStatus::from_flag(ok), report))
}
