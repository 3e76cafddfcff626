//! Brownian carriers and the driftless state ensemble `dX = σ_t(X) dW` under the
//! reference measure.
//!
//! Every path owns a deterministic sub-seed derived from the run seed and the path
//! index, so the ensemble is bit-identical no matter how many worker threads fill it.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::model::GameModel;

/// Uniform time discretisation of `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(param("horizon", format!("must be finite and > 0, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(param("n_steps", "must be >= 1"));
        }
        let mut times: Vec<f64> = (0..=n_steps)
            .map(|n| horizon * n as f64 / n_steps as f64)
            .collect();
        times[0] = 0.0;
        times[n_steps] = horizon;
        Ok(Self { times })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, n: usize) -> f64 {
        self.times[n]
    }

    /// Step length `t_{n+1} - t_n`.
    pub fn dt(&self, n: usize) -> f64 {
        self.times[n + 1] - self.times[n]
    }

    /// Trapezoidal integral of grid values over `[0, T]`.
    pub fn trapezoid(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.times.len());
        (0..self.n_steps())
            .map(|n| 0.5 * (values[n] + values[n + 1]) * self.dt(n))
            .sum()
    }
}

/// A path observed up to (and including) grid index `n`.
///
/// Model coefficients only ever see a prefix, which is how adaptedness is enforced.
#[derive(Debug, Clone, Copy)]
pub struct PathPrefix<'a> {
    times: &'a [f64],
    states: &'a [f64],
    dim: usize,
}

impl<'a> PathPrefix<'a> {
    /// `states` holds `times.len()` consecutive `dim`-vectors.
    pub fn new(times: &'a [f64], states: &'a [f64], dim: usize) -> Self {
        debug_assert_eq!(times.len() * dim, states.len());
        Self { times, states, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Grid index of the last observed point.
    pub fn index(&self) -> usize {
        self.times.len() - 1
    }

    pub fn time(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn at(&self, j: usize) -> &'a [f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    /// Value `x_t` at the last observed time.
    pub fn current(&self) -> &'a [f64] {
        self.at(self.index())
    }

    /// `sup_{s <= t} |x_s|` (Euclidean norm in space).
    pub fn sup_norm(&self) -> f64 {
        self.states
            .chunks_exact(self.dim)
            .map(norm)
            .fold(0.0, f64::max)
    }

    pub fn times(&self) -> &'a [f64] {
        self.times
    }

    pub fn states(&self) -> &'a [f64] {
        self.states
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// SplitMix64 finaliser; used to derive per-path seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic sub-seed of path `index` under run seed `seed`.
pub fn path_sub_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

/// Gaussian increments `ΔW`, shaped `paths × steps × dim`.
#[derive(Debug, Clone)]
pub struct BrownianIncrements {
    pub grid: TimeGrid,
    pub seed: u64,
    pub increments: Array3<f64>,
}

impl BrownianIncrements {
    pub fn n_paths(&self) -> usize {
        self.increments.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.increments.shape()[2]
    }
}

pub fn simulate_brownian(
    grid: &TimeGrid,
    n_paths: usize,
    dim: usize,
    seed: u64,
) -> Result<BrownianIncrements> {
    if n_paths == 0 {
        return Err(param("n_paths", "must be >= 1"));
    }
    if dim == 0 {
        return Err(param("dim_state", "must be >= 1"));
    }
    let n_steps = grid.n_steps();
    let sqrt_dt: Vec<f64> = (0..n_steps).map(|n| grid.dt(n).sqrt()).collect();
    let mut data = vec![0.0; n_paths * n_steps * dim];
    data.par_chunks_mut(n_steps * dim)
        .enumerate()
        .for_each(|(i, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(path_sub_seed(seed, i));
            for n in 0..n_steps {
                for j in 0..dim {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    row[n * dim + j] = g * sqrt_dt[n];
                }
            }
        });
    let increments = Array3::from_shape_vec((n_paths, n_steps, dim), data)
        .expect("shape matches buffer length");
    Ok(BrownianIncrements {
        grid: grid.clone(),
        seed,
        increments,
    })
}

/// Increments together with the Euler states they drive.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub seed: u64,
    /// `paths × steps × dim`
    pub increments: Array3<f64>,
    /// `paths × (steps + 1) × dim`, shared read-only with the measure flows built on top.
    pub states: Arc<Array3<f64>>,
    /// `sup_{s <= t_n} |X_s|` per path and grid time.
    pub prefix_sup: Arc<Array2<f64>>,
    /// Number of (path, step) pairs where σ was numerically singular.
    pub near_singular_sigma: usize,
}

const SINGULAR_SIGMA: f64 = 1e-12;

impl PathEnsemble {
    pub fn n_paths(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn dim(&self) -> usize {
        self.states.shape()[2]
    }

    /// Path `i` observed up to grid index `n`.
    pub fn prefix(&self, i: usize, n: usize) -> PathPrefix<'_> {
        let d = self.dim();
        let stride = (self.n_steps() + 1) * d;
        let data = self.states.as_slice().expect("standard layout");
        PathPrefix::new(
            &self.grid.times()[..=n],
            &data[i * stride..i * stride + (n + 1) * d],
            d,
        )
    }

    pub fn state(&self, i: usize, n: usize) -> &[f64] {
        self.prefix(i, n).current()
    }

    pub fn increment(&self, i: usize, n: usize) -> &[f64] {
        let d = self.dim();
        let data = self.increments.as_slice().expect("standard layout");
        let off = (i * self.n_steps() + n) * d;
        &data[off..off + d]
    }
}

/// Euler–Maruyama for `dX = σ_t(X) dW`, σ evaluated on the discrete prefix.
pub fn simulate_state(model: &dyn GameModel, dw: &BrownianIncrements) -> Result<PathEnsemble> {
    let d = model.dim_state();
    if dw.dim() != d {
        return Err(param(
            "increments",
            format!("dimension {} does not match model state dimension {d}", dw.dim()),
        ));
    }
    let grid = &dw.grid;
    let n_steps = grid.n_steps();
    let m = dw.n_paths();
    let x0 = model.x0();
    let inc = dw.increments.as_slice().expect("standard layout");
    let stride = (n_steps + 1) * d;
    let mut data = vec![0.0; m * stride];

    let outcomes: Vec<std::result::Result<usize, Error>> = data
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(i, row)| {
            row[..d].copy_from_slice(x0);
            let mut sigma = vec![0.0; d * d];
            let mut singular = 0;
            for n in 0..n_steps {
                let (head, tail) = row.split_at_mut((n + 1) * d);
                let prefix = PathPrefix::new(&grid.times()[..=n], head, d);
                model.sigma(grid.time(n), prefix, &mut sigma);
                if is_near_singular(&sigma, d) {
                    singular += 1;
                }
                let dwn = &inc[(i * n_steps + n) * d..(i * n_steps + n + 1) * d];
                let xn = prefix.current();
                for r in 0..d {
                    let mut v = xn[r];
                    for c in 0..d {
                        v += sigma[r * d + c] * dwn[c];
                    }
                    if !v.is_finite() {
                        return Err(Error::Simulation {
                            t: grid.time(n),
                            path: i,
                        });
                    }
                    tail[r] = v;
                }
            }
            Ok(singular)
        })
        .collect();

    let mut near_singular = 0;
    for outcome in outcomes {
        near_singular += outcome?;
    }

    let states = Array3::from_shape_vec((m, n_steps + 1, d), data).expect("shape");
    let prefix_sup = running_sup(&states);
    Ok(PathEnsemble {
        grid: grid.clone(),
        seed: dw.seed,
        increments: dw.increments.clone(),
        states: Arc::new(states),
        prefix_sup: Arc::new(prefix_sup),
        near_singular_sigma: near_singular,
    })
}

fn is_near_singular(sigma: &[f64], d: usize) -> bool {
    if d == 1 {
        return sigma[0].abs() < SINGULAR_SIGMA;
    }
    let mat = nalgebra::DMatrix::from_row_slice(d, d, sigma);
    mat.determinant().abs() < SINGULAR_SIGMA
}

fn running_sup(states: &Array3<f64>) -> Array2<f64> {
    let (m, n1, _) = states.dim();
    let mut out = Array2::zeros((m, n1));
    for i in 0..m {
        let mut best = 0.0f64;
        for n in 0..n1 {
            let v = states.slice(ndarray::s![i, n, ..]);
            best = best.max(v.iter().map(|x| x * x).sum::<f64>().sqrt());
            out[[i, n]] = best;
        }
    }
    out
}

/// Stock prefix-adapted path functionals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathFunctional {
    /// `x_t[j]`
    Coordinate(usize),
    /// `sup_{s<=t} |x_s|`
    SupNorm,
    /// `sup_{s<=t} x_s[j]`
    RunningMax(usize),
    /// Left-point time average of `x[j]` over `[0, t]`; equals `x_0[j]` at `t = 0`.
    TimeAverage(usize),
}

impl PathFunctional {
    pub fn eval(&self, p: PathPrefix<'_>) -> f64 {
        match *self {
            PathFunctional::Coordinate(j) => p.current()[j],
            PathFunctional::SupNorm => p.sup_norm(),
            PathFunctional::RunningMax(j) => (0..=p.index())
                .map(|k| p.at(k)[j])
                .fold(f64::NEG_INFINITY, f64::max),
            PathFunctional::TimeAverage(j) => {
                let n = p.index();
                if n == 0 {
                    return p.at(0)[j];
                }
                let t = p.times();
                let integral: f64 = (0..n).map(|k| p.at(k)[j] * (t[k + 1] - t[k])).sum();
                integral / t[n]
            }
        }
    }
}

/// Applies a prefix-adapted functional at every grid time of every path.
pub fn evaluate_along<F>(functional: F, ensemble: &PathEnsemble) -> Array2<f64>
where
    F: Fn(PathPrefix<'_>) -> f64 + Sync,
{
    let m = ensemble.n_paths();
    let n1 = ensemble.n_steps() + 1;
    let mut out = vec![0.0; m * n1];
    out.par_chunks_mut(n1).enumerate().for_each(|(i, row)| {
        for (n, slot) in row.iter_mut().enumerate() {
            *slot = functional(ensemble.prefix(i, n));
        }
    });
    Array2::from_shape_vec((m, n1), out).expect("shape")
}
