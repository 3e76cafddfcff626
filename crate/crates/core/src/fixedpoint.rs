//! The solution map over (state law, Young mixture) pairs, its damped iteration, the
//! cut-off truncation loop, a-priori bounds and equilibrium verification.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{induced_drift, solve_backward, BsdeSolution, Driver, DriverSpec};
use crate::error::{param, Error, Result};
use crate::girsanov::{
    bmo_norm_estimate, kl_estimate, reverse_holder_diagnostic, stochastic_exponential, weighted_estimate,
    DensityWeights, Estimate,
};
use crate::measure::{apply_cutoff, cutoff_activity, flow_distance, mix, tightness_report, MeasureFlow, TightnessReport, YoungMixture};
use crate::model::{dot, GameModel, GrowthConstants, MeasureSummary, QuadSign};
use crate::paths::{norm, PathEnsemble, PathPrefix};
use crate::regression::RegressionConfig;

/// How the BSDE solver clips `|Z|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZClip {
    Off,
    /// Clip at the a-priori level `L̄_z` when the model admits one.
    #[default]
    Apriori,
    Level(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointConfig {
    /// Mixing weight `λ` of the new iterate.
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Mixture components lighter than this are dropped.
    pub prune_threshold: f64,
    /// Divergence is declared once the residual exceeds this multiple of its running minimum.
    pub divergence_factor: f64,
    pub z_clip: ZClip,
    /// Radial cut-off level applied to every measure argument.
    pub cutoff: Option<f64>,
    /// Exponent of the reverse-Hölder diagnostic.
    pub rh_p: f64,
    pub regression: RegressionConfig,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-2,
            max_iter: 50,
            prune_threshold: 1e-6,
            divergence_factor: 5.0,
            z_clip: ZClip::Apriori,
            cutoff: None,
            rh_p: 2.0,
            regression: RegressionConfig::default(),
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(param("fixedpoint.damping", format!("must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.tol >= 0.0) {
            return Err(param("fixedpoint.tol", "must be >= 0"));
        }
        if self.max_iter == 0 {
            return Err(param("fixedpoint.max_iter", "must be >= 1"));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(param("fixedpoint.divergence_factor", "must be > 1"));
        }
        if let Some(c) = self.cutoff {
            if !(c > 0.0) {
                return Err(param("fixedpoint.cutoff", "must be > 0"));
            }
        }
        if let ZClip::Level(l) = self.z_clip {
            if !(l > 0.0) {
                return Err(param("fixedpoint.z_clip", "must be > 0"));
            }
        }
        if !(self.rh_p > 1.0) {
            return Err(param("fixedpoint.rh_p", "must be > 1"));
        }
        self.regression.validate()
    }
}

/// Explicit constants of the a-priori estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriBounds {
    pub lx_bar: f64,
    pub ly_bar: f64,
    pub lz_bar: f64,
}

/// Composes the Gronwall, quadratic-growth and bootstrap steps of the a-priori estimate.
///
/// Young-inequality parameters are `ε = 1` in the state estimate and `ε = ¼` in the
/// closing step, which makes the bootstrap a contraction with factor ½.
pub fn apriori_bounds(c: &GrowthConstants, x0_norm: f64, horizon: f64) -> Result<AprioriBounds> {
    if !(c.gamma_tilde > 0.0) {
        return Err(Error::BoundsUnavailable(format!("gamma_tilde must be > 0, got {}", c.gamma_tilde)));
    }
    if c.strong_quad_sign == QuadSign::None {
        return Err(Error::BoundsUnavailable("no strictly quadratic growth sign declared".into()));
    }
    if [c.gamma, c.lip_k, c.bound_l, c.sigma_lip].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::BoundsUnavailable("growth constants must be finite and nonnegative".into()));
    }
    if !(horizon > 0.0 && x0_norm.is_finite()) {
        return Err(Error::BoundsUnavailable("horizon must be > 0 and x0 finite".into()));
    }
    let (g, gt, k, l, ks, t) = (c.gamma, c.gamma_tilde, c.lip_k, c.bound_l, c.sigma_lip, horizon);

    // Gronwall on E[sup|X|²]: L1 (1 + ∫E|Z|²).
    let a_x = 3.0 * x0_norm * x0_norm + 9.0 * t * t * g * g + 24.0 * t * ks * ks;
    let b_x = 9.0 * t * g * g + 24.0 * ks * ks;
    let l1 = a_x.max(9.0 * t * g * g) * (b_x * t).exp();

    // Y and Z in terms of the state moment.
    let c_y = (l + g * t) * (8.0 * k * k * t).exp();
    let a_y = 2.0 * (c_y + 0.25 * (t * g * g / (2.0 * gt) + t * g) + 2.0 * t * g * g / gt);
    let b_y = 2.0 * (c_y + 0.25 * t * g);
    let a_z = (2.0 / gt) * (2.0 * a_y + t * g * g / (2.0 * gt) + t * g);
    let b_z = (2.0 / gt) * (2.0 * b_y + t * g);

    // Bootstrap: x² <= P + Q x.
    let p = l1 * (1.0 + a_z);
    let q = l1 * b_z;
    let lx_bar = (2.0 * p + q * q).sqrt();
    let ly_bar = a_y + b_y * lx_bar;
    let lz_sq = (1.0 / gt)
        * (2.0 * ly_bar + t * g * g / (2.0 * gt) + t * g * (1.0 + lx_bar) + 0.5 * gt * (a_z + b_z * lx_bar));
    let lz_bar = lz_sq.sqrt();
    if ![lx_bar, ly_bar, lz_bar].iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(Error::BoundsUnavailable("composed bounds overflow".into()));
    }
    Ok(AprioriBounds { lx_bar, ly_bar, lz_bar })
}

/// A-priori bounds of a model from its declared constants.
pub fn model_bounds(model: &dyn GameModel) -> Result<AprioriBounds> {
    apriori_bounds(&model.constants(), norm(model.x0()), model.horizon())
}

/// Per-time law of one mixture component: the joint (state, action) summary and its
/// state marginal.
#[derive(Debug, Clone)]
struct ComponentLaw {
    joint: MeasureSummary,
    state: MeasureSummary,
}

fn state_only(s: &MeasureSummary) -> MeasureSummary {
    MeasureSummary {
        state_mean: s.state_mean.clone(),
        action_mean: Vec::new(),
        first_moment: s.first_moment,
        quantiles: s.quantiles.clone(),
        particles: None,
    }
}

/// State-law summaries of `mu` (after the cut-off, if any) at every grid time.
fn state_laws(mu: &MeasureFlow, cutoff: Option<f64>) -> Result<Vec<MeasureSummary>> {
    let cut = match cutoff {
        Some(level) => apply_cutoff(mu, level)?,
        None => mu.clone(),
    };
    (0..=cut.grid().n_steps()).map(|n| cut.marginal(n).map(|s| state_only(&s))).collect()
}

/// Laws `q_t` of `(X, Λ(X, Z, q^x))` for a `(state, Z)` flow.
fn component_laws(model: &dyn GameModel, flow: &MeasureFlow, cutoff: Option<f64>) -> Result<Vec<ComponentLaw>> {
    let cut = match cutoff {
        Some(level) => apply_cutoff(flow, level)?,
        None => flow.clone(),
    };
    let m = cut.n_paths();
    let k = model.dim_action();
    let r = cut.dim_values();
    (0..=cut.grid().n_steps())
        .map(|n| {
            let marginal = cut.marginal(n)?;
            let state_law = state_only(&marginal);
            let t = cut.grid().time(n);
            let rows: Vec<(Vec<f64>, f64)> = (0..m)
                .into_par_iter()
                .map(|i| {
                    let mut buf = Vec::new();
                    let prefix = cut.prefix(i, n, &mut buf);
                    let z: Vec<f64> = (0..r).map(|j| cut.value(i, n, j)).collect();
                    let mut a = vec![0.0; k];
                    model.maximizer(t, prefix, &z, &state_law, &mut a);
                    let w = cut.weight(i, n);
                    let x_norm = cut.particle_norm(i, n) - norm(&z);
                    (a.iter().map(|v| w * v).collect(), w * (x_norm + norm(&a)))
                })
                .collect();
            let mut action_mean = vec![0.0; k];
            let mut first = 0.0;
            for (a, f) in &rows {
                for (s, v) in action_mean.iter_mut().zip(a) {
                    *s += v;
                }
                first += f;
            }
            action_mean.iter_mut().for_each(|v| *v /= m as f64);
            let joint = MeasureSummary {
                state_mean: marginal.state_mean.clone(),
                action_mean,
                first_moment: first / m as f64,
                quantiles: marginal.quantiles.clone(),
                particles: None,
            };
            Ok(ComponentLaw { joint, state: state_law })
        })
        .collect()
}

/// `H̄ = Σ_k λ_k F(x, z, q^k) + z·B(x, z, μ)` with frozen laws, terminal `G(x, μ_T)`.
pub struct ModelDriver {
    model: Arc<dyn GameModel>,
    mu: Vec<MeasureSummary>,
    components: Vec<(f64, Arc<Vec<ComponentLaw>>)>,
}

impl ModelDriver {
    fn lambda(&self, path: PathPrefix<'_>, z: &[f64], law: &MeasureSummary) -> Vec<f64> {
        let mut a = vec![0.0; self.model.dim_action()];
        self.model.maximizer(path.time(), path, z, law, &mut a);
        a
    }
}

impl Driver for ModelDriver {
    fn generator(&self, n: usize, _i: usize, path: PathPrefix<'_>, z: &[f64]) -> f64 {
        let t = path.time();
        let mut f = 0.0;
        for (lambda, laws) in &self.components {
            let law = &laws[n];
            let a = self.lambda(path, z, &law.state);
            f += lambda * self.model.running_cost(t, path, &law.joint, &a);
        }
        let mut b = vec![0.0; self.model.dim_state()];
        self.measure_drift(n, 0, path, z, &mut b);
        f + dot(z, &b)
    }

    fn terminal(&self, _i: usize, path: PathPrefix<'_>) -> f64 {
        self.model.terminal_cost(path, &self.mu[self.mu.len() - 1])
    }

    fn measure_drift(&self, n: usize, _i: usize, path: PathPrefix<'_>, z: &[f64], out: &mut [f64]) {
        let law = &self.mu[n];
        let a = self.lambda(path, z, law);
        self.model.drift_ratio(path.time(), path, law, &a, out);
    }
}

/// Current iterate: the state law `μ` and the Young mixture `ν` over `(X, Z)` flows.
#[derive(Debug, Clone)]
pub struct FixedPointState {
    pub mu: MeasureFlow,
    pub nu: YoungMixture,
    laws: Vec<Arc<Vec<ComponentLaw>>>,
    /// Girsanov kernel of the latest Dirac component.
    theta: Arc<Array3<f64>>,
    cutoff: Option<f64>,
}

impl FixedPointState {
    /// `μ` = reference law of `X`, `ν` = Dirac flow of `(X, 0)`.
    pub fn initial(model: &dyn GameModel, ensemble: &PathEnsemble, cutoff: Option<f64>) -> Result<Self> {
        let (m, n_steps, d) = ensemble.increments.dim();
        let mu = MeasureFlow::reference(ensemble);
        let zero = MeasureFlow::new(ensemble, Array3::zeros((m, n_steps + 1, d)), Array2::ones((m, n_steps + 1)))?;
        let laws = vec![Arc::new(component_laws(model, &zero, cutoff)?)];
        Ok(Self {
            mu,
            nu: YoungMixture::dirac(zero),
            laws,
            theta: Arc::new(Array3::zeros((m, n_steps, d))),
            cutoff,
        })
    }

    /// The Dirac state emitted by one application of the map.
    pub fn collapse(model: &dyn GameModel, out: &PhiOutput, cutoff: Option<f64>) -> Result<Self> {
        Ok(Self {
            mu: out.mu.clone(),
            nu: YoungMixture::dirac(out.nu.clone()),
            laws: vec![Arc::new(component_laws(model, &out.nu, cutoff)?)],
            theta: Arc::new(out.theta.clone()),
            cutoff,
        })
    }

    /// `(1-λ) self + λ Φ(self)`, pruning negligible mixture components.
    fn damp(&self, model: &dyn GameModel, out: &PhiOutput, lambda: f64, prune: f64) -> Result<Self> {
        if lambda == 1.0 {
            return Self::collapse(model, out, self.cutoff);
        }
        let mu = self.mu.blend_weights(&out.mu, lambda)?;
        let mut flows: Vec<MeasureFlow> = self.nu.components().to_vec();
        let mut weights: Vec<f64> = self.nu.lambdas().iter().map(|l| l * (1.0 - lambda)).collect();
        let mut laws = self.laws.clone();
        flows.push(out.nu.clone());
        weights.push(lambda);
        laws.push(Arc::new(component_laws(model, &out.nu, self.cutoff)?));
        let keep: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] >= prune).collect();
        let total: f64 = keep.iter().map(|&k| weights[k]).sum();
        let nu = mix(
            keep.iter().map(|&k| flows[k].clone()).collect(),
            keep.iter().map(|&k| weights[k] / total).collect(),
        )?;
        Ok(Self {
            mu,
            nu,
            laws: keep.iter().map(|&k| laws[k].clone()).collect(),
            theta: Arc::new(out.theta.clone()),
            cutoff: self.cutoff,
        })
    }

    pub fn cutoff(&self) -> Option<f64> {
        self.cutoff
    }

    /// `d(μ, μ') + d(ν, ν')` in the integrated coordinate-wise W₁ distance.
    pub fn distance(&self, mu: &MeasureFlow, nu: &MeasureFlow) -> Result<f64> {
        Ok(flow_distance(&self.mu, mu)? + flow_distance(&self.nu, nu)?)
    }

    /// Distance between two states.
    pub fn distance_to(&self, other: &FixedPointState) -> Result<f64> {
        Ok(flow_distance(&self.mu, &other.mu)? + flow_distance(&self.nu, &other.nu)?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PhiDiagnostics {
    pub y0: f64,
    pub clip_rate: f64,
    pub max_condition: f64,
    /// Squared BMO norm of `Z` under the reference measure.
    pub bmo_sq: f64,
    pub reverse_holder: f64,
    pub reverse_holder_blow_up: bool,
    pub effective_sample_size: f64,
    pub tightness: Option<TightnessReport>,
    pub warnings: Vec<String>,
}

/// Everything produced by one application of the solution map.
#[derive(Debug, Clone)]
pub struct PhiOutput {
    /// Law of `X` under the new density.
    pub mu: MeasureFlow,
    /// Dirac flow of `(X, Z)` under the new density.
    pub nu: MeasureFlow,
    pub solution: BsdeSolution,
    pub theta: Array3<f64>,
    pub weights: DensityWeights,
    pub diagnostics: PhiDiagnostics,
}

fn clip_level(model: &dyn GameModel, clip: ZClip) -> Option<f64> {
    match clip {
        ZClip::Off => None,
        ZClip::Level(l) => Some(l),
        ZClip::Apriori => model_bounds(model).ok().map(|b| b.lz_bar),
    }
}

/// Builds the frozen-law driver for a state.
pub fn model_driver(model: Arc<dyn GameModel>, state: &FixedPointState) -> Result<ModelDriver> {
    let mu = state_laws(&state.mu, state.cutoff)?;
    let components = state
        .nu
        .lambdas()
        .iter()
        .copied()
        .zip(state.laws.iter().cloned())
        .collect();
    Ok(ModelDriver { model, mu, components })
}

/// One application of `Φ`: solve the BSDE with frozen `(μ, ν)`, then reweight by `E(B·W)`.
pub fn solution_map(
    model: &Arc<dyn GameModel>,
    ensemble: &PathEnsemble,
    state: &FixedPointState,
    config: &FixedPointConfig,
) -> Result<PhiOutput> {
    let driver = Arc::new(model_driver(model.clone(), state)?);
    let spec = DriverSpec::new(driver.clone()).with_clip(clip_level(model.as_ref(), config.z_clip));
    let solution = solve_backward(&spec, ensemble, &config.regression)?;
    let theta = induced_drift(driver.as_ref(), ensemble, &solution.z);
    let weights = stochastic_exponential(&theta, &ensemble.increments, &ensemble.grid, true)?;
    let w = weights.to_array();
    let (m, n_steps, _) = solution.z.dim();
    let mu = MeasureFlow::new(ensemble, Array3::zeros((m, n_steps + 1, 0)), w.clone())?;
    let nu = MeasureFlow::new(ensemble, solution.z_on_grid(), w)?;

    let bmo = bmo_norm_estimate(&solution.z, None, ensemble, &config.regression)?;
    let rh = reverse_holder_diagnostic(&weights, config.rh_p, ensemble, &config.regression)?;
    let tightness = model_bounds(model.as_ref())
        .ok()
        .map(|b| tightness_report(&[&nu], config.rh_p - 1.0, 1.0, Some((rh.value, b.lz_bar * b.lz_bar))));
    let mut warnings = solution.warnings.clone();
    if rh.blow_up {
        warnings.push(format!("reverse-Hölder constant blew up ({})", rh.value));
    }
    let diagnostics = PhiDiagnostics {
        y0: solution.y0(),
        clip_rate: solution.clip_rate,
        max_condition: solution.max_condition(),
        bmo_sq: bmo.value,
        reverse_holder: rh.value,
        reverse_holder_blow_up: rh.blow_up,
        effective_sample_size: weights.effective_sample_size(),
        tightness,
        warnings,
    };
    Ok(PhiOutput {
        mu,
        nu,
        solution,
        theta,
        weights,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointStatus {
    Converged,
    MaxIter,
    Diverged,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRow {
    pub k: usize,
    pub residual: f64,
    pub y0: f64,
    pub bmo_z: f64,
    pub kl_step: f64,
    pub clip_rate: f64,
    pub domain_ok: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub rows: Vec<IterationRow>,
    pub status: FixedPointStatus,
    /// Number of mixing updates performed.
    pub iterations: usize,
    /// Number of applications of the solution map, excluding the final re-check.
    pub map_evaluations: usize,
    pub final_residual: f64,
    /// Residual of the returned state, re-checked by one more application of the map.
    pub recheck_residual: f64,
    pub cutoff: Option<f64>,
}

/// Result of [`iterate`]: the final state, the report and `Φ(state)` from the re-check.
#[derive(Debug, Clone)]
pub struct IterateOutcome {
    pub state: FixedPointState,
    pub report: FixedPointReport,
    pub check: PhiOutput,
}

/// Damped fixed-point iteration from the reference law.
pub fn iterate(model: &Arc<dyn GameModel>, ensemble: &PathEnsemble, config: &FixedPointConfig) -> Result<IterateOutcome> {
    config.validate()?;
    let initial = FixedPointState::initial(model.as_ref(), ensemble, config.cutoff)?;
    iterate_from(model, ensemble, initial, config)
}

/// Damped fixed-point iteration from a given state.
pub fn iterate_from(
    model: &Arc<dyn GameModel>,
    ensemble: &PathEnsemble,
    mut state: FixedPointState,
    config: &FixedPointConfig,
) -> Result<IterateOutcome> {
    config.validate()?;
    let grid = &ensemble.grid;
    let mut rows = Vec::new();
    let mut min_residual = f64::INFINITY;
    let mut updates = 0;
    let status = loop {
        let out = solution_map(model, ensemble, &state, config)?;
        let residual = state.distance(&out.mu, &out.nu)?;
        let kl = kl_estimate(&out.theta, &state.theta, &out.weights, grid)?;
        rows.push(IterationRow {
            k: rows.len(),
            residual,
            y0: out.diagnostics.y0,
            bmo_z: out.diagnostics.bmo_sq,
            kl_step: kl.kl,
            clip_rate: out.diagnostics.clip_rate,
            domain_ok: out.diagnostics.tightness.as_ref().and_then(|t| t.passed),
        });
        if residual <= config.tol {
            state = FixedPointState::collapse(model.as_ref(), &out, config.cutoff)?;
            break FixedPointStatus::Converged;
        }
        min_residual = min_residual.min(residual);
        if residual > config.divergence_factor * min_residual {
            break FixedPointStatus::Diverged;
        }
        if updates == config.max_iter {
            break FixedPointStatus::MaxIter;
        }
        state = state.damp(model.as_ref(), &out, config.damping, config.prune_threshold)?;
        updates += 1;
    };
    let check = solution_map(model, ensemble, &state, config)?;
    let recheck_residual = state.distance(&check.mu, &check.nu)?;
    let report = FixedPointReport {
        final_residual: rows.last().map_or(f64::NAN, |r| r.residual),
        map_evaluations: rows.len(),
        rows,
        status,
        iterations: updates,
        recheck_residual,
        cutoff: config.cutoff,
    };
    Ok(IterateOutcome { state, report, check })
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncationRow {
    pub level: f64,
    pub status: FixedPointStatus,
    pub iterations: usize,
    pub y0: f64,
    /// Distance to the solution at the previous level.
    pub distance_to_previous: Option<f64>,
    /// Fraction of particles whose norm reaches the level at some time.
    pub cutoff_activity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationStatus {
    Stabilized,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncationReport {
    pub rows: Vec<TruncationRow>,
    pub status: TruncationStatus,
    pub tol: f64,
    /// False when the model is bounded in its mean-field arguments, so no cut-off is needed.
    pub model_unbounded: bool,
}

/// Solves the cut-off problem at every level of `schedule` and checks stabilisation.
pub fn truncated_solve(
    model: &Arc<dyn GameModel>,
    ensemble: &PathEnsemble,
    schedule: &[f64],
    config: &FixedPointConfig,
    tol: f64,
) -> Result<(TruncationReport, IterateOutcome)> {
    if schedule.is_empty() {
        return Err(param("truncation.schedule", "must not be empty"));
    }
    if schedule.windows(2).any(|w| !(w[0] < w[1])) || schedule[0] <= 0.0 {
        return Err(param("truncation.schedule", "levels must be positive and strictly increasing"));
    }
    let mut rows = Vec::new();
    let mut previous: Option<IterateOutcome> = None;
    for &level in schedule {
        let cfg = FixedPointConfig {
            cutoff: Some(level),
            ..config.clone()
        };
        let outcome = iterate(model, ensemble, &cfg)?;
        let distance = match &previous {
            Some(p) => Some(p.state.distance_to(&outcome.state)?),
            None => None,
        };
        let activity = outcome
            .state
            .nu
            .components()
            .iter()
            .map(|f| cutoff_activity(f, level))
            .fold(0.0, f64::max);
        rows.push(TruncationRow {
            level,
            status: outcome.report.status,
            iterations: outcome.report.iterations,
            y0: outcome.check.diagnostics.y0,
            distance_to_previous: distance,
            cutoff_activity: activity,
        });
        previous = Some(outcome);
    }
    let last = rows.last().expect("non-empty schedule");
    let stable = match last.distance_to_previous {
        Some(d) => d <= tol,
        None => true,
    };
    let ok = stable && last.cutoff_activity == 0.0 && last.status == FixedPointStatus::Converged;
    Ok((
        TruncationReport {
            status: if ok {
                TruncationStatus::Stabilized
            } else {
                TruncationStatus::Inconclusive
            },
            rows,
            tol,
            model_unbounded: !model.constants().bounded_in_mf,
        },
        previous.expect("non-empty schedule"),
    ))
}

/// A bounded deterministic deviation direction `δ(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ConstUp,
    ConstDown,
    RampUp,
    RampDown,
    SineUp,
    SineDown,
    CosineUp,
    CosineDown,
    StepUp,
    StepDown,
}

impl Direction {
    pub const ALL: [Direction; 10] = [
        Direction::ConstUp,
        Direction::ConstDown,
        Direction::RampUp,
        Direction::RampDown,
        Direction::SineUp,
        Direction::SineDown,
        Direction::CosineUp,
        Direction::CosineDown,
        Direction::StepUp,
        Direction::StepDown,
    ];

    /// `δ` at the fraction `s = t/T` of the horizon.
    pub fn eval(self, s: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            Direction::ConstUp => 1.0,
            Direction::ConstDown => -1.0,
            Direction::RampUp => s,
            Direction::RampDown => -s,
            Direction::SineUp => (2.0 * PI * s).sin(),
            Direction::SineDown => -(2.0 * PI * s).sin(),
            Direction::CosineUp => (PI * s).cos(),
            Direction::CosineDown => -(PI * s).cos(),
            Direction::StepUp => f64::from(u8::from(s < 0.5)),
            Direction::StepDown => -f64::from(u8::from(s < 0.5)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub epsilon: f64,
    pub directions: Vec<Direction>,
    /// Number of standard errors allowed in the payoff and deviation checks.
    pub z_score: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            directions: Direction::ALL.to_vec(),
            z_score: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationRow {
    pub direction: Direction,
    pub epsilon: f64,
    /// `J(α^ε) - J(α̂)`
    pub gain: f64,
    /// Common-random-numbers standard error of the gain.
    pub se: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumReport {
    pub y0: f64,
    pub payoff: Estimate,
    pub payoff_ok: bool,
    pub deviations: Vec<DeviationRow>,
    pub deviations_ok: bool,
    pub residual: f64,
    pub residual_ok: bool,
    pub converged: bool,
    pub verified: bool,
}

/// Candidate equilibrium given by a state law and a control on the ensemble.
pub struct Candidate<'a> {
    pub mu: &'a MeasureFlow,
    pub cutoff: Option<f64>,
    pub y0: f64,
    /// `paths × steps × d`
    pub z: &'a Array3<f64>,
}

/// Per-path payoff terms and terminal weights of a control `α` against frozen laws.
fn payoff_terms(
    model: &dyn GameModel,
    ensemble: &PathEnsemble,
    state_laws: &[MeasureSummary],
    cost_laws: &[MeasureSummary],
    alpha: &Array3<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, n_steps, k) = alpha.dim();
    let d = ensemble.dim();
    let grid = &ensemble.grid;
    let rows: Vec<Result<(f64, Vec<f64>)>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut v = 0.0;
            let mut theta = vec![0.0; n_steps * d];
            let mut a = vec![0.0; k];
            for n in 0..n_steps {
                let p = ensemble.prefix(i, n);
                for j in 0..k {
                    a[j] = alpha[[i, n, j]];
                }
                let t = grid.time(n);
                let f = model.running_cost(t, p, &cost_laws[n], &a);
                if !f.is_finite() {
                    return Err(Error::ModelEvaluation { what: "running cost", t, path: i });
                }
                v += f * grid.dt(n);
                model.drift_ratio(t, p, &state_laws[n], &a, &mut theta[n * d..(n + 1) * d]);
            }
            let g = model.terminal_cost(ensemble.prefix(i, n_steps), &state_laws[n_steps]);
            if !g.is_finite() {
                return Err(Error::ModelEvaluation {
                    what: "terminal cost",
                    t: grid.horizon(),
                    path: i,
                });
            }
            Ok((v + g, theta))
        })
        .collect();
    let mut values = Vec::with_capacity(m);
    let mut theta = Array3::zeros((m, n_steps, d));
    for (i, row) in rows.into_iter().enumerate() {
        let (v, th) = row?;
        values.push(v);
        for n in 0..n_steps {
            for j in 0..d {
                theta[[i, n, j]] = th[n * d + j];
            }
        }
    }
    let w = stochastic_exponential(&theta, &ensemble.increments, grid, true)?;
    Ok((values, w.terminal_weights()))
}

/// Checks the payoff identity and the deviation inequalities for a candidate.
pub fn verify_candidate(
    model: &dyn GameModel,
    ensemble: &PathEnsemble,
    candidate: &Candidate<'_>,
    config: &VerifyConfig,
) -> Result<(Estimate, bool, Vec<DeviationRow>)> {
    let (m, n_steps, _) = candidate.z.dim();
    let k = model.dim_action();
    let d = ensemble.dim();
    let grid = &ensemble.grid;
    let state_laws = state_laws(candidate.mu, candidate.cutoff)?;

    let mut alpha = Array3::zeros((m, n_steps, k));
    for i in 0..m {
        let mut z = vec![0.0; d];
        let mut a = vec![0.0; k];
        for n in 0..n_steps {
            for j in 0..d {
                z[j] = candidate.z[[i, n, j]];
            }
            let p = ensemble.prefix(i, n);
            model.maximizer(grid.time(n), p, &z, &state_laws[n], &mut a);
            for j in 0..k {
                alpha[[i, n, j]] = a[j];
            }
        }
    }
    // The cost law pairs the state law with the equilibrium action law.
    let cost_laws: Vec<MeasureSummary> = (0..=n_steps)
        .map(|n| {
            let nn = n.min(n_steps - 1);
            let mut s = state_laws[n].clone();
            s.action_mean = (0..k)
                .map(|j| (0..m).map(|i| candidate.mu.weight(i, n) * alpha[[i, nn, j]]).sum::<f64>() / m as f64)
                .collect();
            s
        })
        .collect();

    let (v_hat, w_hat) = payoff_terms(model, ensemble, &state_laws, &cost_laws, &alpha)?;
    let payoff = weighted_estimate(&w_hat, &v_hat);
    let payoff_ok = (candidate.y0 - payoff.mean).abs() <= config.z_score * payoff.se + 1e-12;

    let bounds = model.action_box();
    let sw_hat: f64 = w_hat.iter().sum::<f64>() / m as f64;
    let mut rows = Vec::with_capacity(config.directions.len());
    for &dir in &config.directions {
        let mut pert = alpha.clone();
        for i in 0..m {
            for n in 0..n_steps {
                let delta = config.epsilon * dir.eval(grid.time(n) / grid.horizon());
                for j in 0..k {
                    let mut v = alpha[[i, n, j]] + delta;
                    if let Some(b) = &bounds {
                        v = v.clamp(b[j].0, b[j].1);
                    }
                    pert[[i, n, j]] = v;
                }
            }
        }
        let (v, w) = payoff_terms(model, ensemble, &state_laws, &cost_laws, &pert)?;
        let est = weighted_estimate(&w, &v);
        let gain = est.mean - payoff.mean;
        let sw: f64 = w.iter().sum::<f64>() / m as f64;
        let paired: Vec<f64> = (0..m)
            .map(|i| w[i] * (v[i] - est.mean) / sw - w_hat[i] * (v_hat[i] - payoff.mean) / sw_hat)
            .collect();
        let (_, se) = crate::stats::mean_se(&paired);
        rows.push(DeviationRow {
            direction: dir,
            epsilon: config.epsilon,
            gain,
            se,
            ok: gain <= config.z_score * se + 1e-12,
        });
    }
    Ok((payoff, payoff_ok, rows))
}

/// Payoff identity, deviation checks and fixed-point residual of an iteration outcome.
pub fn verify_equilibrium(
    model: &dyn GameModel,
    ensemble: &PathEnsemble,
    outcome: &IterateOutcome,
    fp_config: &FixedPointConfig,
    config: &VerifyConfig,
) -> Result<EquilibriumReport> {
    let candidate = Candidate {
        mu: &outcome.state.mu,
        cutoff: outcome.state.cutoff,
        y0: outcome.check.solution.y0(),
        z: &outcome.check.solution.z,
    };
    let (payoff, payoff_ok, deviations) = verify_candidate(model, ensemble, &candidate, config)?;
    let deviations_ok = deviations.iter().all(|r| r.ok);
    let residual = outcome.report.recheck_residual;
    let residual_ok = residual <= fp_config.tol;
    let converged = outcome.report.status == FixedPointStatus::Converged;
    Ok(EquilibriumReport {
        y0: candidate.y0,
        payoff,
        payoff_ok,
        deviations,
        deviations_ok,
        residual,
        residual_ok,
        converged,
        verified: converged && payoff_ok && deviations_ok && residual_ok,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_additive, builtin_gbm, builtin_null, ExampleParams};
    use crate::paths::{simulate_brownian, simulate_state, TimeGrid};

    fn ensemble(model: &dyn GameModel, m: usize, n: usize, seed: u64) -> PathEnsemble {
        let g = TimeGrid::uniform(model.horizon(), n).unwrap();
        simulate_state(model, &simulate_brownian(&g, m, 1, seed).unwrap()).unwrap()
    }

    fn no_mf(x0: f64) -> Arc<dyn GameModel> {
        builtin_additive(&ExampleParams {
            x0,
            mean_field: false,
            ..ExampleParams::default()
        })
        .unwrap()
    }

    #[test]
    fn apriori_bounds_examples() {
        let base = GrowthConstants {
            gamma: 1.0,
            gamma_tilde: 1.0,
            lip_k: 1.0,
            bound_l: 1.0,
            sigma_lip: 1.0,
            strong_quad_sign: QuadSign::Upper,
            bounded_in_mf: true,
        };
        let b = apriori_bounds(&base, 0.25, 1.0).unwrap();
        assert!(b.lx_bar > 0.0 && b.ly_bar > 0.0 && b.lz_bar > 0.0);
        let longer = apriori_bounds(&base, 0.25, 2.0).unwrap();
        assert!(longer.lx_bar >= b.lx_bar && longer.ly_bar >= b.ly_bar && longer.lz_bar >= b.lz_bar);

        let no_growth = GrowthConstants { gamma: 0.0, ..base };
        let mut prev = apriori_bounds(&no_growth, 0.0, 1.0).unwrap();
        for l in [2.0, 4.0, 8.0] {
            let next = apriori_bounds(&GrowthConstants { bound_l: l, ..no_growth }, 0.0, 1.0).unwrap();
            assert!(next.ly_bar >= prev.ly_bar && next.lz_bar >= prev.lz_bar && next.lx_bar >= prev.lx_bar);
            prev = next;
        }

        assert!(matches!(
            apriori_bounds(&GrowthConstants { gamma_tilde: 0.0, ..base }, 0.0, 1.0),
            Err(Error::BoundsUnavailable(_))
        ));
        assert!(apriori_bounds(&GrowthConstants { strong_quad_sign: QuadSign::None, ..base }, 0.0, 1.0).is_err());
    }

    #[test]
    fn null_model_map_is_trivial() {
        let model = builtin_null(&ExampleParams::default()).unwrap();
        let ens = ensemble(model.as_ref(), 500, 10, 1);
        let cfg = FixedPointConfig::default();
        let state = FixedPointState::initial(model.as_ref(), &ens, None).unwrap();
        let out = solution_map(&model, &ens, &state, &cfg).unwrap();
        assert!(out.weights.to_array().iter().all(|&w| w == 1.0));
        assert!(out.solution.z.iter().all(|&z| z.abs() < 1e-12));
        assert_eq!(flow_distance(&out.mu, &MeasureFlow::reference(&ens)).unwrap(), 0.0);
    }

    #[test]
    fn additive_without_mean_field_is_constant_map() {
        let model = no_mf(0.1);
        let ens = ensemble(model.as_ref(), 10_000, 50, 2);
        let cfg = FixedPointConfig {
            damping: 1.0,
            ..FixedPointConfig::default()
        };
        let state = FixedPointState::initial(model.as_ref(), &ens, None).unwrap();
        let out = solution_map(&model, &ens, &state, &cfg).unwrap();
        let mean_err = out.solution.z.iter().map(|z| (z - 1.0).abs()).sum::<f64>() / out.solution.z.len() as f64;
        assert!(mean_err < 0.05);
        assert!((out.diagnostics.y0 - 0.6).abs() < 0.02);

        let outcome = iterate(&model, &ens, &cfg).unwrap();
        assert_eq!(outcome.report.status, FixedPointStatus::Converged);
        assert_eq!(outcome.report.iterations, 1);
        assert!(outcome.report.recheck_residual <= cfg.tol);
    }

    #[test]
    fn vacuous_tolerance_stops_after_one_map() {
        let model = builtin_gbm(&ExampleParams::default()).unwrap();
        let ens = ensemble(model.as_ref(), 1000, 10, 3);
        let cfg = FixedPointConfig {
            tol: f64::INFINITY,
            ..FixedPointConfig::default()
        };
        let outcome = iterate(&model, &ens, &cfg).unwrap();
        assert_eq!(outcome.report.status, FixedPointStatus::Converged);
        assert_eq!(outcome.report.map_evaluations, 1);
        assert_eq!(outcome.report.iterations, 0);
    }

    #[test]
    fn gbm_map_moves_the_reference_law() {
        let model = builtin_gbm(&ExampleParams::default()).unwrap();
        let ens = ensemble(model.as_ref(), 2000, 10, 4);
        let state = FixedPointState::initial(model.as_ref(), &ens, None).unwrap();
        let out = solution_map(&model, &ens, &state, &FixedPointConfig::default()).unwrap();
        let before = state.mu.marginal(10).unwrap().state_mean[0];
        let after = out.mu.marginal(10).unwrap().state_mean[0];
        assert!((after - before).abs() > 1e-2, "{before} -> {after}");
    }

    #[test]
    fn full_damping_equals_plain_picard() {
        let model = builtin_gbm(&ExampleParams::default()).unwrap();
        let ens = ensemble(model.as_ref(), 1000, 10, 5);
        let cfg = FixedPointConfig {
            damping: 1.0,
            tol: 0.0,
            max_iter: 3,
            ..FixedPointConfig::default()
        };
        let outcome = iterate(&model, &ens, &cfg).unwrap();
        let mut state = FixedPointState::initial(model.as_ref(), &ens, None).unwrap();
        for row in &outcome.report.rows {
            let out = solution_map(&model, &ens, &state, &cfg).unwrap();
            assert_eq!(row.y0, out.diagnostics.y0);
            assert_eq!(row.residual, state.distance(&out.mu, &out.nu).unwrap());
            state = FixedPointState::collapse(model.as_ref(), &out, None).unwrap();
        }
    }

    #[test]
    fn large_cutoff_on_bounded_model_matches_plain_iteration() {
        let model = no_mf(0.1);
        let ens = ensemble(model.as_ref(), 2000, 20, 6);
        let cfg = FixedPointConfig::default();
        let plain = iterate(&model, &ens, &cfg).unwrap();
        let (report, truncated) = truncated_solve(&model, &ens, &[1e6, 2e6], &cfg, 1e-12).unwrap();
        assert_eq!(plain.report.rows.len(), truncated.report.rows.len());
        for (a, b) in plain.report.rows.iter().zip(&truncated.report.rows) {
            assert_eq!(a.residual, b.residual);
            assert_eq!(a.y0, b.y0);
        }
        assert_eq!(report.rows[1].distance_to_previous, Some(0.0));
        assert_eq!(report.status, TruncationStatus::Stabilized);
        assert!(!report.model_unbounded);
    }

    #[test]
    fn single_level_schedule_reports_one_row() {
        let model = builtin_additive(&ExampleParams {
            x0: 0.1,
            ..ExampleParams::default()
        })
        .unwrap();
        let ens = ensemble(model.as_ref(), 1000, 10, 7);
        let (report, _) = truncated_solve(&model, &ens, &[0.5], &FixedPointConfig::default(), 1e-2).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.rows[0].cutoff_activity > 0.0);
        assert_eq!(report.status, TruncationStatus::Inconclusive);
        assert!(truncated_solve(&model, &ens, &[2.0, 1.0], &FixedPointConfig::default(), 1e-2).is_err());
    }

    #[test]
    fn zero_cost_model_verifies_trivially() {
        let model = builtin_null(&ExampleParams::default()).unwrap();
        let ens = ensemble(model.as_ref(), 500, 10, 8);
        let cfg = FixedPointConfig::default();
        let outcome = iterate(&model, &ens, &cfg).unwrap();
        let rep = verify_equilibrium(model.as_ref(), &ens, &outcome, &cfg, &VerifyConfig::default()).unwrap();
        assert_eq!(rep.payoff.mean, 0.0);
        assert!(rep.verified, "{rep:?}");
    }

    #[test]
    fn additive_deviation_loss_is_half_epsilon_squared() {
        let model = no_mf(0.1);
        let ens = ensemble(model.as_ref(), 20_000, 50, 9);
        let cfg = FixedPointConfig::default();
        let outcome = iterate(&model, &ens, &cfg).unwrap();
        let vc = VerifyConfig::default();
        let rep = verify_equilibrium(model.as_ref(), &ens, &outcome, &cfg, &vc).unwrap();
        assert!(rep.verified, "{rep:?}");
        for row in &rep.deviations {
            // Exact loss for this model: -½ ε² ∫ δ² dt on the left-point grid.
            let g = &ens.grid;
            let int: f64 = (0..g.n_steps()).map(|n| row.direction.eval(g.time(n) / g.horizon()).powi(2) * g.dt(n)).sum();
            let expected = -0.5 * vc.epsilon * vc.epsilon * int;
            assert!((row.gain - expected).abs() <= 3.0 * row.se + 1e-9, "{row:?} expected {expected}");
        }
    }

    #[test]
    fn wrong_candidate_fails_payoff_identity() {
        let model = no_mf(0.1);
        let ens = ensemble(model.as_ref(), 5000, 20, 10);
        let cfg = FixedPointConfig::default();
        let outcome = iterate(&model, &ens, &cfg).unwrap();
        // Z of the zero-cost model paired with the additive value.
        let zero = Array3::zeros(outcome.check.solution.z.dim());
        let candidate = Candidate {
            mu: &outcome.state.mu,
            cutoff: None,
            y0: outcome.check.solution.y0(),
            z: &zero,
        };
        let (_, payoff_ok, _) = verify_candidate(model.as_ref(), &ens, &candidate, &VerifyConfig::default()).unwrap();
        assert!(!payoff_ok);
    }
}
