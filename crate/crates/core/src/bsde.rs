//! Explicit least-squares Monte-Carlo solver for BSDEs driven by a path-dependent
//! generator, plus the comparison, energy and stability harnesses.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::girsanov::{
    bmo_norm_estimate, energy_inequality, kl_estimate, stochastic_exponential, weighted_estimate, EnergyReport,
};
use crate::measure::{flow_distance, MeasureFlow};
use crate::paths::{PathEnsemble, PathPrefix};
pub use crate::regression::{conditional_expectation, features, LeastSquaresProjector, RegressionConfig};

/// Clip activation rate above which a warning is attached to the solution.
pub const CLIP_WARN_RATE: f64 = 1e-3;

/// The generator `H_t(x, z)` and terminal value `ξ(x)` of a BSDE without `y` dependence.
pub trait Driver: Send + Sync {
    /// Generator at grid index `n` on path `i`.
    fn generator(&self, n: usize, i: usize, path: PathPrefix<'_>, z: &[f64]) -> f64;

    fn terminal(&self, i: usize, path: PathPrefix<'_>) -> f64;

    /// Girsanov kernel `Θ_t(x, z)` of the measure induced by the solution; zero by default.
    fn measure_drift(&self, _n: usize, _i: usize, _path: PathPrefix<'_>, _z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

#[derive(Clone)]
pub struct DriverSpec {
    pub driver: Arc<dyn Driver>,
    /// Radial clip level for `Z`.
    pub z_clip: Option<f64>,
}

impl DriverSpec {
    pub fn new(driver: Arc<dyn Driver>) -> Self {
        Self { driver, z_clip: None }
    }

    pub fn with_clip(mut self, level: Option<f64>) -> Self {
        self.z_clip = level;
        self
    }
}

type GenFn = dyn Fn(f64, PathPrefix<'_>, &[f64]) -> f64 + Send + Sync;
type TermFn = dyn Fn(PathPrefix<'_>) -> f64 + Send + Sync;
type DriftFn = dyn Fn(f64, PathPrefix<'_>, &[f64], &mut [f64]) + Send + Sync;

/// A driver assembled from closures of `(t, path, z)`.
pub struct FnDriver {
    generator: Box<GenFn>,
    terminal: Box<TermFn>,
    drift: Option<Box<DriftFn>>,
}

impl FnDriver {
    pub fn new(
        generator: impl Fn(f64, PathPrefix<'_>, &[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(PathPrefix<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            generator: Box::new(generator),
            terminal: Box::new(terminal),
            drift: None,
        }
    }

    pub fn with_drift(mut self, drift: impl Fn(f64, PathPrefix<'_>, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Box::new(drift));
        self
    }
}

impl Driver for FnDriver {
    fn generator(&self, _n: usize, _i: usize, path: PathPrefix<'_>, z: &[f64]) -> f64 {
        (self.generator)(path.time(), path, z)
    }

    fn terminal(&self, _i: usize, path: PathPrefix<'_>) -> f64 {
        (self.terminal)(path)
    }

    fn measure_drift(&self, _n: usize, _i: usize, path: PathPrefix<'_>, z: &[f64], out: &mut [f64]) {
        match &self.drift {
            Some(f) => f(path.time(), path, z, out),
            None => out.fill(0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// `paths × (steps + 1)`
    pub y: Array2<f64>,
    /// `paths × steps × d`
    pub z: Array3<f64>,
    /// Condition number of the normal equations at each step `0..N`.
    pub condition_numbers: Vec<f64>,
    /// Fraction of `(path, step)` pairs where `|Z|` was clipped.
    pub clip_rate: f64,
    pub warnings: Vec<String>,
}

impl BsdeSolution {
    pub fn y0(&self) -> f64 {
        self.y.column(0).sum() / self.y.nrows() as f64
    }

    /// `Z` padded to all grid times (the last value is repeated at `T`).
    pub fn z_on_grid(&self) -> Array3<f64> {
        let (m, n, d) = self.z.dim();
        Array3::from_shape_fn((m, n + 1, d), |(i, k, j)| self.z[[i, k.min(n - 1), j]])
    }

    pub fn max_condition(&self) -> f64 {
        self.condition_numbers.iter().copied().fold(0.0, f64::max)
    }
}

/// Backward sweep `Y_N = ξ`, then for `n = N-1..0`:
/// `Ŷ = E_n[Y_{n+1}]`, `Z_n = E_n[(Y_{n+1} - Ŷ) ΔW_n] / dt`, `Y_n = Ŷ + H(Z_n) dt`.
pub fn solve_backward(spec: &DriverSpec, ensemble: &PathEnsemble, config: &RegressionConfig) -> Result<BsdeSolution> {
    config.validate()?;
    let m = ensemble.n_paths();
    let n_steps = ensemble.n_steps();
    let d = ensemble.dim();
    let driver = spec.driver.as_ref();

    let mut y = Array2::<f64>::zeros((m, n_steps + 1));
    let terminal: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| driver.terminal(i, ensemble.prefix(i, n_steps)))
        .collect();
    if let Some(i) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDriver { step: n_steps, path: i });
    }
    for (i, v) in terminal.into_iter().enumerate() {
        y[[i, n_steps]] = v;
    }

    let mut z = Array3::<f64>::zeros((m, n_steps, d));
    let mut conditions = vec![0.0; n_steps];
    let mut clipped = 0usize;
    for n in (0..n_steps).rev() {
        let dt = ensemble.grid.dt(n);
        let feats = features(ensemble, n, config);
        let proj = LeastSquaresProjector::new(&feats, config)?;
        conditions[n] = proj.condition();
        let next: Vec<f64> = y.column(n + 1).to_vec();
        let y_hat = proj.project(&next);
        let mut zn = vec![0.0; m * d];
        for j in 0..d {
            let target: Vec<f64> = (0..m)
                .map(|i| (next[i] - y_hat[i]) * ensemble.increment(i, n)[j] / dt)
                .collect();
            for (i, v) in proj.project(&target).into_iter().enumerate() {
                zn[i * d + j] = v;
            }
        }
        if let Some(level) = spec.z_clip {
            for row in zn.chunks_exact_mut(d) {
                let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm > level {
                    clipped += 1;
                    row.iter_mut().for_each(|v| *v *= level / nrm);
                }
            }
        }
        let gens: Vec<f64> = zn
            .par_chunks(d)
            .enumerate()
            .map(|(i, zi)| driver.generator(n, i, ensemble.prefix(i, n), zi))
            .collect();
        if let Some(i) = gens.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDriver { step: n, path: i });
        }
        for i in 0..m {
            y[[i, n]] = y_hat[i] + gens[i] * dt;
            for j in 0..d {
                z[[i, n, j]] = zn[i * d + j];
            }
        }
    }
    let clip_rate = clipped as f64 / (m * n_steps) as f64;
    let mut warnings = Vec::new();
    if clip_rate > CLIP_WARN_RATE {
        warnings.push(format!("Z clip active on {:.3}% of (path, step) pairs", 100.0 * clip_rate));
    }
    Ok(BsdeSolution {
        y,
        z,
        condition_numbers: conditions,
        clip_rate,
        warnings,
    })
}

/// `Θ_n = driver.measure_drift(Z_n)` along every path.
pub fn induced_drift(driver: &dyn Driver, ensemble: &PathEnsemble, z: &Array3<f64>) -> Array3<f64> {
    let (m, n_steps, d) = z.dim();
    let mut out = vec![0.0; m * n_steps * d];
    out.par_chunks_mut(n_steps * d).enumerate().for_each(|(i, row)| {
        let mut zi = vec![0.0; d];
        for n in 0..n_steps {
            for j in 0..d {
                zi[j] = z[[i, n, j]];
            }
            driver.measure_drift(n, i, ensemble.prefix(i, n), &zi, &mut row[n * d..(n + 1) * d]);
        }
    });
    Array3::from_shape_vec((m, n_steps, d), out).expect("shape")
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub points: usize,
    pub violations: usize,
    pub violation_rate: f64,
    pub eps: f64,
    pub passed: bool,
}

/// Maximum tolerated violation rate in [`comparison_check`].
pub const COMPARISON_MAX_RATE: f64 = 0.01;

/// Counts `(path, time)` points with `Y^a < Y^b - eps`.
pub fn comparison_check(a: &BsdeSolution, b: &BsdeSolution, eps: f64) -> Result<ComparisonReport> {
    if a.y.dim() != b.y.dim() {
        return Err(Error::GridMismatch("solutions on different ensembles".into()));
    }
    let violations = a.y.iter().zip(b.y.iter()).filter(|(ya, yb)| **ya < **yb - eps).count();
    let points = a.y.len();
    let rate = violations as f64 / points as f64;
    Ok(ComparisonReport {
        points,
        violations,
        violation_rate: rate,
        eps,
        passed: rate <= COMPARISON_MAX_RATE,
    })
}

/// Energy inequality on a solution under the reference measure.
pub fn energy_inequality_check(sol: &BsdeSolution, ensemble: &PathEnsemble, bmo_sq: f64, n_max: u32) -> EnergyReport {
    energy_inequality(&sol.z, None, &ensemble.grid, bmo_sq, n_max)
}

/// Energy inequality with the BMO estimate computed from the solution itself.
pub fn energy_self_check(sol: &BsdeSolution, ensemble: &PathEnsemble, config: &RegressionConfig) -> Result<EnergyReport> {
    let bmo = bmo_norm_estimate(&sol.z, None, ensemble, config)?;
    Ok(energy_inequality_check(sol, ensemble, bmo.value, 2))
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityRow {
    pub index: usize,
    pub y0: f64,
    pub y0_gap: f64,
    /// `E^∞ ∫ |Z^n - Z^∞|² dt`
    pub z_gap: f64,
    pub kl: f64,
    pub tv_bound: f64,
    pub flow_distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityTable {
    pub rows: Vec<StabilityRow>,
}

/// Absolute floor below which consecutive stability gaps count as equal.
pub const STABILITY_FLOOR: f64 = 1e-12;

/// True when every entry is at most `(1 + slack)` times its predecessor (plus a tiny floor).
pub fn monotone_decreasing(values: &[f64], slack: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] * (1.0 + slack) + STABILITY_FLOOR)
}

impl StabilityTable {
    pub fn column(&self, f: impl Fn(&StabilityRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }
}

/// Solves every spec; the last one is the limit. Row `k` compares spec `k` with the limit.
pub fn stability_run(specs: &[DriverSpec], ensemble: &PathEnsemble, config: &RegressionConfig) -> Result<StabilityTable> {
    let limit_spec = specs
        .last()
        .ok_or_else(|| crate::error::param("specs", "at least one driver spec is required"))?;
    let grid = &ensemble.grid;
    let limit = solve_backward(limit_spec, ensemble, config)?;
    let theta_inf = induced_drift(limit_spec.driver.as_ref(), ensemble, &limit.z);
    let w_inf = stochastic_exponential(&theta_inf, &ensemble.increments, grid, true)?;
    let flow_inf = MeasureFlow::new(ensemble, limit.z_on_grid(), w_inf.to_array())?;
    let w_t = w_inf.terminal_weights();
    let (m, n_steps, d) = limit.z.dim();

    let mut rows = Vec::with_capacity(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        let sol = if k + 1 == specs.len() {
            limit.clone()
        } else {
            solve_backward(spec, ensemble, config)?
        };
        let theta = induced_drift(spec.driver.as_ref(), ensemble, &sol.z);
        let w = stochastic_exponential(&theta, &ensemble.increments, grid, true)?;
        let gap: Vec<f64> = (0..m)
            .map(|i| {
                (0..n_steps)
                    .map(|n| (0..d).map(|j| (sol.z[[i, n, j]] - limit.z[[i, n, j]]).powi(2)).sum::<f64>() * grid.dt(n))
                    .sum()
            })
            .collect();
        let z_gap = weighted_estimate(&w_t, &gap).mean;
        let kl = kl_estimate(&theta_inf, &theta, &w_inf, grid)?;
        let flow = MeasureFlow::new(ensemble, sol.z_on_grid(), w.to_array())?;
        rows.push(StabilityRow {
            index: k,
            y0: sol.y0(),
            y0_gap: (sol.y0() - limit.y0()).abs(),
            z_gap,
            kl: kl.kl,
            tv_bound: kl.tv_bound,
            flow_distance: flow_distance(&flow, &flow_inf)?,
        });
    }
    Ok(StabilityTable { rows })
}
