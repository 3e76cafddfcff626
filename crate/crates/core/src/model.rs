//! Game coefficients, growth constants and the built-in example games.
//!
//! A game is any type implementing [`GameModel`]. Models are looked up by name
//! through a [`ModelRegistry`]; the built-in registry knows `gbm`, `additive` and
//! `null`, and user code can register more factories at runtime.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::paths::PathPrefix;

/// Which side of the strictly quadratic growth condition `F` satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadSign {
    /// `F(z) <= -γ̃/2 |z|² + F(0)`
    Upper,
    /// `F(z) >= γ̃/2 |z|² - F(0)`
    Lower,
    None,
}

/// Growth and Lipschitz constants declared by a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthConstants {
    pub gamma: f64,
    pub gamma_tilde: f64,
    pub lip_k: f64,
    pub bound_l: f64,
    /// Lipschitz (and linear-growth) constant of σ in the path.
    pub sigma_lip: f64,
    pub strong_quad_sign: QuadSign,
    /// True when `|G| + |B(0)| + |F(0)|` is bounded uniformly in the measure arguments.
    pub bounded_in_mf: bool,
}

/// Particle-level view of a marginal, for models that need more than moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleMarginal {
    /// `paths × dim_state`, row-major.
    pub states: Vec<f64>,
    /// `paths × flow_dim`, row-major (empty when the flow carries no values).
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Moments of a measure marginal `m_t = (m^x_t, m^a_t)` handed to model coefficients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasureSummary {
    /// `∫ x̄_t m^x(dx̄)`
    pub state_mean: Vec<f64>,
    /// `∫ ā m^a(dā)`
    pub action_mean: Vec<f64>,
    /// `M₁(m_t)`: weighted mean of `‖x_{·∧t}‖_∞ + |ζ_t|`.
    pub first_moment: f64,
    /// Optional per-coordinate quantile table `(level, value)` of the state marginal.
    pub quantiles: Option<Vec<Vec<(f64, f64)>>>,
    pub particles: Option<Arc<ParticleMarginal>>,
}

impl MeasureSummary {
    pub fn new(state_mean: Vec<f64>, action_mean: Vec<f64>) -> Self {
        let first_moment = crate::paths::norm(&state_mean) + crate::paths::norm(&action_mean);
        Self {
            state_mean,
            action_mean,
            first_moment,
            quantiles: None,
            particles: None,
        }
    }

    /// The Dirac mass at the origin.
    pub fn dirac_zero(dim_state: usize, dim_action: usize) -> Self {
        Self::new(vec![0.0; dim_state], vec![0.0; dim_action])
    }

    /// Weighted integral of `f(state, value)` over the particle marginal, if attached.
    pub fn integrate<F: Fn(&[f64], &[f64]) -> f64>(&self, f: F) -> Option<f64> {
        let p = self.particles.as_ref()?;
        let m = p.weights.len();
        let d = p.states.len() / m;
        let r = p.values.len() / m;
        let total: f64 = (0..m)
            .map(|i| p.weights[i] * f(&p.states[i * d..(i + 1) * d], &p.values[i * r..(i + 1) * r]))
            .sum();
        Some(total / m as f64)
    }
}

/// Coefficients of a weak-formulation mean-field game.
///
/// All methods must be pure; they are called concurrently from many workers.
/// Matrices are row-major.
pub trait GameModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim_state(&self) -> usize;
    fn dim_action(&self) -> usize;
    fn x0(&self) -> &[f64];
    fn horizon(&self) -> f64;
    fn constants(&self) -> GrowthConstants;

    /// `σ_t(x)` into `out` (`d × d`).
    fn sigma(&self, t: f64, path: PathPrefix<'_>, out: &mut [f64]);

    /// `(σ⁻¹b)_t(x, m^x, a)` into `out` (`d`). Only the state law is visible here.
    fn drift_ratio(
        &self,
        t: f64,
        path: PathPrefix<'_>,
        state_law: &MeasureSummary,
        action: &[f64],
        out: &mut [f64],
    );

    /// `f_t(x, m, a)`, with `m` the joint state/action law.
    fn running_cost(&self, t: f64, path: PathPrefix<'_>, law: &MeasureSummary, action: &[f64]) -> f64;

    /// `g(x, m^x_T)`.
    fn terminal_cost(&self, path: PathPrefix<'_>, state_law: &MeasureSummary) -> f64;

    /// `Λ_t(x, z, m^x)` into `out` (`k`).
    fn maximizer(
        &self,
        t: f64,
        path: PathPrefix<'_>,
        z: &[f64],
        state_law: &MeasureSummary,
        out: &mut [f64],
    );

    /// Optional box constraint on actions, one `(lo, hi)` per coordinate.
    fn action_box(&self) -> Option<Vec<(f64, f64)>> {
        None
    }
}

/// Reduced Hamiltonian `h = f_t(x, m, a) + (σ⁻¹b)_t(x, m^x, a) · z`.
pub fn reduced_hamiltonian(
    model: &dyn GameModel,
    path_id: usize,
    path: PathPrefix<'_>,
    z: &[f64],
    law: &MeasureSummary,
    action: &[f64],
) -> Result<f64> {
    let t = path.time();
    let mut drift = vec![0.0; model.dim_state()];
    model.drift_ratio(t, path, law, action, &mut drift);
    let f = model.running_cost(t, path, law, action);
    if !f.is_finite() {
        return Err(Error::ModelEvaluation {
            what: "running cost",
            t,
            path: path_id,
        });
    }
    if drift.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelEvaluation {
            what: "drift ratio",
            t,
            path: path_id,
        });
    }
    Ok(f + dot(&drift, z))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One input point for [`check_maximizer`].
#[derive(Debug, Clone)]
pub struct MaximizerSample {
    pub times: Vec<f64>,
    /// `times.len() × dim_state` path prefix.
    pub states: Vec<f64>,
    pub z: Vec<f64>,
    pub law: MeasureSummary,
}

impl MaximizerSample {
    pub fn prefix(&self, dim: usize) -> PathPrefix<'_> {
        PathPrefix::new(&self.times, &self.states, dim)
    }
}

/// Candidate actions compared against `Λ`.
///
/// Each coordinate of the action is moved independently: once to every `absolute`
/// value and once by every `relative` offset from `Λ`.
#[derive(Debug, Clone)]
pub struct ActionGrid {
    pub absolute: Vec<f64>,
    pub relative: Vec<f64>,
}

impl Default for ActionGrid {
    fn default() -> Self {
        let steps: Vec<f64> = (-12..=12).map(|k| k as f64 * 0.25).collect();
        Self {
            absolute: steps.clone(),
            relative: steps,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MaximizerReport {
    pub samples: usize,
    pub worst_violation: f64,
    pub worst_sample: Option<usize>,
}

/// Verifies `h(Λ) >= h(a) - tol` for every sample and every grid action.
pub fn check_maximizer(
    model: &dyn GameModel,
    samples: &[MaximizerSample],
    grid: &ActionGrid,
    tol: f64,
) -> Result<MaximizerReport> {
    let d = model.dim_state();
    let k = model.dim_action();
    let bounds = model.action_box();
    let mut worst = 0.0f64;
    let mut worst_sample = None;
    let mut lambda = vec![0.0; k];
    for (s, sample) in samples.iter().enumerate() {
        let path = sample.prefix(d);
        model.maximizer(path.time(), path, &sample.z, &sample.law, &mut lambda);
        let best = reduced_hamiltonian(model, s, path, &sample.z, &sample.law, &lambda)?;
        let mut candidate = lambda.clone();
        for coord in 0..k {
            let values = grid
                .absolute
                .iter()
                .copied()
                .chain(grid.relative.iter().map(|o| lambda[coord] + o));
            for v in values {
                if let Some(b) = &bounds {
                    if v < b[coord].0 || v > b[coord].1 {
                        continue;
                    }
                }
                candidate[coord] = v;
                let h = reduced_hamiltonian(model, s, path, &sample.z, &sample.law, &candidate)?;
                let gap = h - best;
                if gap > worst {
                    worst = gap;
                    worst_sample = Some(s);
                }
            }
            candidate[coord] = lambda[coord];
        }
    }
    if worst > tol {
        return Err(Error::MaximizerInvalid {
            sample: worst_sample.unwrap_or(0),
            violation: worst,
        });
    }
    Ok(MaximizerReport {
        samples: samples.len(),
        worst_violation: worst,
        worst_sample,
    })
}

/// The bounded continuous `φ` of the example games.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    #[default]
    Tanh,
    Zero,
}

impl Phi {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Phi::Tanh => x.tanh(),
            Phi::Zero => 0.0,
        }
    }
}

/// The bounded measurable `f̄` of the example games.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FBar {
    /// Clamp to `[-1, 1]`.
    #[default]
    Clamp,
    Zero,
}

impl FBar {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            FBar::Clamp => x.clamp(-1.0, 1.0),
            FBar::Zero => 0.0,
        }
    }
}

/// Parameters shared by the built-in example games.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExampleParams {
    pub x0: f64,
    pub horizon: f64,
    pub phi: Phi,
    pub fbar: FBar,
    /// When false every law integral is dropped: the drift ratio is `a`, the
    /// running cost `(-a/2 + φ(0)) a` and the terminal reward the own state `x_T`.
    pub mean_field: bool,
}

impl Default for ExampleParams {
    fn default() -> Self {
        Self {
            x0: 0.25,
            horizon: 1.0,
            phi: Phi::Tanh,
            fbar: FBar::Clamp,
            mean_field: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ExampleKind {
    /// `σ_t(x) = x_t`, `b = x_t (a + ∫x̄_t dm^x)`, cost interacts through `f̄(x_t) ∫ā dm^a`.
    Gbm,
    /// `σ ≡ 1`, `b = a + ∫x̄_t dm^x`, cost interacts through `f̄(x_t) ∫(x̄_t + ā) dm`.
    Additive,
}

/// One-dimensional example game with the maximizer `Λ = z + φ(∫x̄_t dm^x)`.
#[derive(Debug, Clone)]
pub struct ExampleGame {
    kind: ExampleKind,
    params: ExampleParams,
    x0: [f64; 1],
}

impl ExampleGame {
    fn law_mean(&self, law: &MeasureSummary) -> f64 {
        if self.params.mean_field {
            law.state_mean.first().copied().unwrap_or(0.0)
        } else {
            0.0
        }
    }

    pub fn params(&self) -> &ExampleParams {
        &self.params
    }
}

impl GameModel for ExampleGame {
    fn name(&self) -> &str {
        match self.kind {
            ExampleKind::Gbm => "gbm",
            ExampleKind::Additive => "additive",
        }
    }

    fn dim_state(&self) -> usize {
        1
    }

    fn dim_action(&self) -> usize {
        1
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn horizon(&self) -> f64 {
        self.params.horizon
    }

    fn constants(&self) -> GrowthConstants {
        GrowthConstants {
            gamma: 2.0,
            gamma_tilde: 1.0,
            lip_k: 1.0,
            bound_l: 3.0,
            sigma_lip: 1.0,
            strong_quad_sign: QuadSign::Upper,
            bounded_in_mf: !self.params.mean_field,
        }
    }

    fn sigma(&self, _t: f64, path: PathPrefix<'_>, out: &mut [f64]) {
        out[0] = match self.kind {
            ExampleKind::Gbm => path.current()[0],
            ExampleKind::Additive => 1.0,
        };
    }

    fn drift_ratio(
        &self,
        _t: f64,
        _path: PathPrefix<'_>,
        state_law: &MeasureSummary,
        action: &[f64],
        out: &mut [f64],
    ) {
        out[0] = action[0] + self.law_mean(state_law);
    }

    fn running_cost(&self, _t: f64, path: PathPrefix<'_>, law: &MeasureSummary, action: &[f64]) -> f64 {
        let a = action[0];
        let mean = self.law_mean(law);
        let private = (-0.5 * a + self.params.phi.eval(mean)) * a;
        if !self.params.mean_field {
            return private;
        }
        let action_mean = law.action_mean.first().copied().unwrap_or(0.0);
        let interaction = match self.kind {
            ExampleKind::Gbm => action_mean,
            ExampleKind::Additive => mean + action_mean,
        };
        private + self.params.fbar.eval(path.current()[0]) * interaction
    }

    fn terminal_cost(&self, path: PathPrefix<'_>, state_law: &MeasureSummary) -> f64 {
        if self.params.mean_field {
            state_law.state_mean[0]
        } else {
            path.current()[0]
        }
    }

    fn maximizer(
        &self,
        _t: f64,
        _path: PathPrefix<'_>,
        z: &[f64],
        state_law: &MeasureSummary,
        out: &mut [f64],
    ) {
        out[0] = z[0] + self.params.phi.eval(self.law_mean(state_law));
    }
}

fn check_common(params: &ExampleParams) -> Result<()> {
    if !params.x0.is_finite() {
        return Err(param("x0", "must be finite"));
    }
    if !(params.horizon.is_finite() && params.horizon > 0.0) {
        return Err(param("horizon", format!("must be > 0, got {}", params.horizon)));
    }
    Ok(())
}

/// Geometric Brownian motion state with multiplicative drift.
pub fn builtin_gbm(params: &ExampleParams) -> Result<Arc<dyn GameModel>> {
    check_common(params)?;
    if params.x0 <= 0.0 {
        return Err(param("x0", format!("the GBM example needs x0 > 0, got {}", params.x0)));
    }
    Ok(Arc::new(ExampleGame {
        kind: ExampleKind::Gbm,
        params: params.clone(),
        x0: [params.x0],
    }))
}

/// Additive-noise state with running cost unbounded in the law.
pub fn builtin_additive(params: &ExampleParams) -> Result<Arc<dyn GameModel>> {
    check_common(params)?;
    Ok(Arc::new(ExampleGame {
        kind: ExampleKind::Additive,
        params: params.clone(),
        x0: [params.x0],
    }))
}

/// `σ ≡ 1` and every other coefficient zero.
#[derive(Debug, Clone)]
pub struct NullGame {
    x0: [f64; 1],
    horizon: f64,
}

impl GameModel for NullGame {
    fn name(&self) -> &str {
        "null"
    }
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_action(&self) -> usize {
        1
    }
    fn x0(&self) -> &[f64] {
        &self.x0
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn constants(&self) -> GrowthConstants {
        GrowthConstants {
            gamma: 1.0,
            gamma_tilde: 0.0,
            lip_k: 1.0,
            bound_l: 1.0,
            sigma_lip: 1.0,
            strong_quad_sign: QuadSign::None,
            bounded_in_mf: true,
        }
    }
    fn sigma(&self, _t: f64, _path: PathPrefix<'_>, out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn drift_ratio(&self, _: f64, _: PathPrefix<'_>, _: &MeasureSummary, _: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn running_cost(&self, _: f64, _: PathPrefix<'_>, _: &MeasureSummary, _: &[f64]) -> f64 {
        0.0
    }
    fn terminal_cost(&self, _: PathPrefix<'_>, _: &MeasureSummary) -> f64 {
        0.0
    }
    fn maximizer(&self, _: f64, _: PathPrefix<'_>, _: &[f64], _: &MeasureSummary, out: &mut [f64]) {
        out[0] = 0.0;
    }
}

pub fn builtin_null(params: &ExampleParams) -> Result<Arc<dyn GameModel>> {
    check_common(params)?;
    Ok(Arc::new(NullGame {
        x0: [params.x0],
        horizon: params.horizon,
    }))
}

pub type ModelFactory = Box<dyn Fn(&serde_json::Value) -> Result<Arc<dyn GameModel>> + Send + Sync>;

/// Name → factory table for games selectable at runtime.
pub struct ModelRegistry {
    factories: BTreeMap<String, ModelFactory>,
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry preloaded with `gbm`, `additive` and `null`.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register_example("gbm", builtin_gbm);
        reg.register_example("additive", builtin_additive);
        reg.register_example("null", builtin_null);
        reg
    }

    fn register_example(&mut self, name: &str, build: fn(&ExampleParams) -> Result<Arc<dyn GameModel>>) {
        self.register(
            name,
            Box::new(move |value| {
                let params: ExampleParams = if value.is_null() {
                    ExampleParams::default()
                } else {
                    serde_json::from_value(value.clone())
                        .map_err(|e| param("model.params", e.to_string()))?
                };
                build(&params)
            }),
        );
    }

    /// Adds (or replaces) a factory.
    pub fn register(&mut self, name: &str, factory: ModelFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, params: &serde_json::Value) -> Result<Arc<dyn GameModel>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))?;
        factory(params)
    }
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
