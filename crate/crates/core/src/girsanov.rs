//! Discrete stochastic exponentials, reweighted expectations and the BMO,
//! reverse-Hölder and relative-entropy diagnostics built on them.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{param, Error, Result};
use crate::paths::{PathEnsemble, TimeGrid};
use crate::regression::{features, LeastSquaresProjector, RegressionConfig};
use crate::stats::{mean_se, quantile};

/// Largest `|log E|` accepted before the weights are declared overflowed.
const LOG_OVERFLOW: f64 = 700.0;
/// Upper quantile standing in for the essential supremum of fitted conditionals.
const SUP_QUANTILE: f64 = 0.995;

/// Per-path log stochastic exponentials on a grid.
#[derive(Debug, Clone)]
pub struct DensityWeights {
    grid: TimeGrid,
    /// `paths × (steps + 1)`; column 0 is zero.
    log_e: Array2<f64>,
    /// Per-time log normalisers subtracted when weights are read (zero when unnormalised).
    log_norm: Vec<f64>,
}

impl DensityWeights {
    pub fn unit(grid: &TimeGrid, n_paths: usize) -> Self {
        Self {
            grid: grid.clone(),
            log_e: Array2::zeros((n_paths, grid.n_steps() + 1)),
            log_norm: vec![0.0; grid.n_steps() + 1],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.log_e.nrows()
    }

    /// Raw `log E_t` per path, before any normalisation.
    pub fn log_e(&self) -> &Array2<f64> {
        &self.log_e
    }

    /// Rescales so that the mean weight is exactly one at every grid time.
    pub fn normalize(&mut self) {
        let m = self.n_paths() as f64;
        for n in 0..self.log_norm.len() {
            let col = self.log_e.column(n);
            let top = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = col.iter().map(|l| (l - top).exp()).sum();
            self.log_norm[n] = top + (s / m).ln();
        }
    }

    /// Normalising factor applied at `T`.
    pub fn terminal_norm(&self) -> f64 {
        self.log_norm[self.log_norm.len() - 1].exp()
    }

    pub fn weight(&self, i: usize, n: usize) -> f64 {
        (self.log_e[[i, n]] - self.log_norm[n]).exp()
    }

    pub fn weights_at(&self, n: usize) -> Vec<f64> {
        (0..self.n_paths()).map(|i| self.weight(i, n)).collect()
    }

    pub fn terminal_weights(&self) -> Vec<f64> {
        self.weights_at(self.grid.n_steps())
    }

    /// All weights, `paths × (steps + 1)`.
    pub fn to_array(&self) -> Array2<f64> {
        let (m, n1) = self.log_e.dim();
        Array2::from_shape_fn((m, n1), |(i, n)| self.weight(i, n))
    }

    pub fn max_abs_log(&self) -> f64 {
        self.log_e.iter().fold(0.0f64, |a, l| a.max(l.abs()))
    }

    /// Kish effective sample size of the terminal weights.
    pub fn effective_sample_size(&self) -> f64 {
        let w = self.terminal_weights();
        let s: f64 = w.iter().sum();
        let s2: f64 = w.iter().map(|x| x * x).sum();
        s * s / s2
    }
}

/// `log E_{n+1} = log E_n + θ_n·ΔW_n - ½|θ_n|² dt`, optionally normalised to mean one.
pub fn stochastic_exponential(
    theta: &Array3<f64>,
    increments: &Array3<f64>,
    grid: &TimeGrid,
    normalize: bool,
) -> Result<DensityWeights> {
    if theta.shape() != increments.shape() {
        return Err(param(
            "theta",
            format!("shape {:?} differs from increments {:?}", theta.shape(), increments.shape()),
        ));
    }
    let (m, n_steps, d) = theta.dim();
    if n_steps != grid.n_steps() {
        return Err(Error::GridMismatch(format!("theta has {n_steps} steps, grid {}", grid.n_steps())));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(param("theta", "must be finite"));
    }
    let th = theta.as_slice().expect("standard layout");
    let dw = increments.as_slice().expect("standard layout");
    let mut data = vec![0.0; m * (n_steps + 1)];
    data.par_chunks_mut(n_steps + 1).enumerate().for_each(|(i, row)| {
        let mut acc = 0.0;
        for n in 0..n_steps {
            let off = (i * n_steps + n) * d;
            let mut lin = 0.0;
            let mut sq = 0.0;
            for j in 0..d {
                lin += th[off + j] * dw[off + j];
                sq += th[off + j] * th[off + j];
            }
            acc += lin - 0.5 * sq * grid.dt(n);
            row[n + 1] = acc;
        }
    });
    let mut out = DensityWeights {
        grid: grid.clone(),
        log_e: Array2::from_shape_vec((m, n_steps + 1), data).expect("shape"),
        log_norm: vec![0.0; n_steps + 1],
    };
    let max_log = out.max_abs_log();
    if !(max_log <= LOG_OVERFLOW) {
        return Err(Error::WeightOverflow { max_log });
    }
    if normalize {
        out.normalize();
    }
    Ok(out)
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

/// Self-normalised weighted mean of `values` with the weights at grid index `n`.
pub fn reweight_expectation(weights: &DensityWeights, values: &[f64], n: usize) -> Result<Estimate> {
    if values.len() != weights.n_paths() {
        return Err(param("values", "one value per path is required"));
    }
    let w = weights.weights_at(n);
    Ok(weighted_estimate(&w, values))
}

pub(crate) fn weighted_estimate(w: &[f64], values: &[f64]) -> Estimate {
    let m = values.len() as f64;
    let sw: f64 = w.iter().sum();
    let mean = w.iter().zip(values).map(|(a, b)| a * b).sum::<f64>() / sw;
    let wbar = sw / m;
    let infl: Vec<f64> = w.iter().zip(values).map(|(a, b)| a * (b - mean) / wbar).collect();
    let (_, se) = mean_se(&infl);
    Estimate { mean, se }
}

/// `Σ_{k>=n} |Z_k|² dt_k` for every path and every `n` (column `N` is zero).
pub fn tail_energy(z: &Array3<f64>, grid: &TimeGrid) -> Array2<f64> {
    let (m, n_steps, d) = z.dim();
    let mut out = Array2::zeros((m, n_steps + 1));
    for i in 0..m {
        let mut acc = 0.0;
        for n in (0..n_steps).rev() {
            let sq: f64 = (0..d).map(|j| z[[i, n, j]].powi(2)).sum();
            acc += sq * grid.dt(n);
            out[[i, n]] = acc;
        }
    }
    out
}

/// Fits `E[target | F_{t_n}]` and returns the upper quantile of the fitted values.
/// Singular fits fall back to the unconditional mean.
fn conditional_sup(
    ensemble: &PathEnsemble,
    n: usize,
    target: &[f64],
    config: &RegressionConfig,
) -> (f64, bool) {
    let feats = features(ensemble, n, config);
    match LeastSquaresProjector::new(&feats, config) {
        Ok(p) => (quantile(&p.project(target), SUP_QUANTILE), false),
        Err(_) => (target.iter().sum::<f64>() / target.len() as f64, true),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BmoEstimate {
    /// `max_t q_{99.5%}(E[∫_t^T |Z|² ds | F_t])`, the squared BMO norm.
    pub value: f64,
    pub per_time: Vec<f64>,
    /// Grid indices where the regression was singular.
    pub fallback_times: Vec<usize>,
}

/// Empirical squared BMO norm of `Z` on the grid, under `P` or under the measure of `weights`.
pub fn bmo_norm_estimate(
    z: &Array3<f64>,
    weights: Option<&DensityWeights>,
    ensemble: &PathEnsemble,
    config: &RegressionConfig,
) -> Result<BmoEstimate> {
    let (m, n_steps, _) = z.dim();
    if m != ensemble.n_paths() || n_steps != ensemble.n_steps() {
        return Err(Error::GridMismatch("Z does not match the ensemble".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(param("z", "must be finite"));
    }
    let tail = tail_energy(z, &ensemble.grid);
    let results: Vec<(f64, bool)> = (0..n_steps)
        .into_par_iter()
        .map(|n| {
            let target: Vec<f64> = match weights {
                None => tail.column(n).to_vec(),
                Some(w) => {
                    let le = w.log_e();
                    (0..m)
                        .map(|i| (le[[i, n_steps]] - le[[i, n]]).exp() * tail[[i, n]])
                        .collect()
                }
            };
            conditional_sup(ensemble, n, &target, config)
        })
        .collect();
    let per_time: Vec<f64> = results.iter().map(|r| r.0).collect();
    let fallback_times = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1)
        .map(|(n, _)| n)
        .collect();
    let value = per_time.iter().copied().fold(0.0, f64::max);
    Ok(BmoEstimate {
        value,
        per_time,
        fallback_times,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReverseHolder {
    pub p: f64,
    /// Empirical `C_p = max_τ q_{99.5%}(E[(E_T/E_τ)^p | F_τ])`.
    pub value: f64,
    pub per_time: Vec<f64>,
    pub blow_up: bool,
}

/// Empirical reverse-Hölder constant of the density process. The `τ = 0` term is the
/// plain moment `mean(w_T^p)` of the normalised terminal weights.
pub fn reverse_holder_diagnostic(
    weights: &DensityWeights,
    p: f64,
    ensemble: &PathEnsemble,
    config: &RegressionConfig,
) -> Result<ReverseHolder> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(param("p", format!("must be > 1, got {p}")));
    }
    let m = weights.n_paths();
    let last = weights.grid().n_steps();
    let le = weights.log_e();
    let first = weights.terminal_weights().iter().map(|w| w.powf(p)).sum::<f64>() / m as f64;
    let rest: Vec<f64> = (1..last)
        .into_par_iter()
        .map(|n| {
            let target: Vec<f64> = (0..m).map(|i| (p * (le[[i, last]] - le[[i, n]])).exp()).collect();
            conditional_sup(ensemble, n, &target, config).0
        })
        .collect();
    let mut per_time = vec![first];
    per_time.extend(rest);
    let value = per_time.iter().copied().fold(0.0, f64::max);
    Ok(ReverseHolder {
        p,
        value,
        per_time,
        blow_up: !value.is_finite() || value > 1e6,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KlEstimate {
    pub kl: f64,
    pub se: f64,
    /// `min(1, sqrt(KL / 2))`
    pub tv_bound: f64,
}

/// `H(P^a | P^b) = ½ E^a ∫_0^T |θ^a - θ^b|² dt`, with `E^a` given by `weights_a`.
pub fn kl_estimate(
    theta_a: &Array3<f64>,
    theta_b: &Array3<f64>,
    weights_a: &DensityWeights,
    grid: &TimeGrid,
) -> Result<KlEstimate> {
    if theta_a.shape() != theta_b.shape() {
        return Err(param("theta_b", "shape differs from theta_a"));
    }
    let (m, n_steps, d) = theta_a.dim();
    if n_steps != grid.n_steps() || weights_a.grid() != grid || weights_a.n_paths() != m {
        return Err(Error::GridMismatch("KL inputs live on different grids".into()));
    }
    let per_path: Vec<f64> = (0..m)
        .map(|i| {
            0.5 * (0..n_steps)
                .map(|n| (0..d).map(|j| (theta_a[[i, n, j]] - theta_b[[i, n, j]]).powi(2)).sum::<f64>() * grid.dt(n))
                .sum::<f64>()
        })
        .collect();
    let est = weighted_estimate(&weights_a.terminal_weights(), &per_path);
    let kl = est.mean.max(0.0);
    Ok(KlEstimate {
        kl,
        se: est.se,
        tv_bound: (kl / 2.0).sqrt().min(1.0),
    })
}

/// Alternative relative-entropy estimator `E^a[log E^a_T - log E^b_T]`.
pub fn kl_log_ratio(weights_a: &DensityWeights, weights_b: &DensityWeights) -> Result<Estimate> {
    if weights_a.n_paths() != weights_b.n_paths() || weights_a.grid() != weights_b.grid() {
        return Err(Error::GridMismatch("log-ratio inputs differ in shape".into()));
    }
    let last = weights_a.grid().n_steps();
    let ratio: Vec<f64> = (0..weights_a.n_paths())
        .map(|i| weights_a.log_e()[[i, last]] - weights_b.log_e()[[i, last]])
        .collect();
    Ok(weighted_estimate(&weights_a.terminal_weights(), &ratio))
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyRow {
    pub n: u32,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    pub holds: bool,
}

/// Relative slack on the right-hand side of the energy inequality.
pub const ENERGY_SLACK: f64 = 0.1;

/// Checks `E[(∫|Z|²)^n] <= n! bmo_sq^n (1 + slack)` for `n = 1..=n_max`.
pub fn energy_inequality(
    z: &Array3<f64>,
    weights: Option<&DensityWeights>,
    grid: &TimeGrid,
    bmo_sq: f64,
    n_max: u32,
) -> EnergyReport {
    let tail = tail_energy(z, grid);
    let m = z.shape()[0];
    let w = weights.map_or_else(|| vec![1.0; m], |w| w.terminal_weights());
    let sw: f64 = w.iter().sum();
    let mut rows = Vec::new();
    let mut factorial = 1.0;
    for n in 1..=n_max {
        factorial *= n as f64;
        let lhs = (0..m).map(|i| w[i] * tail[[i, 0]].powi(n as i32)).sum::<f64>() / sw;
        let rhs = factorial * bmo_sq.powi(n as i32) * (1.0 + ENERGY_SLACK);
        rows.push(EnergyRow {
            n,
            lhs,
            rhs,
            holds: lhs <= rhs,
        });
    }
    let holds = rows.iter().all(|r| r.holds);
    EnergyReport { rows, holds }
}
