//! Weighted particle measure flows, their convex mixtures (integrable Young
//! measures), Wasserstein-1 distances, radial cut-offs and tightness diagnostics.
//!
//! Every flow is a view on a shared reference ensemble: the particles are the
//! reference paths, the law is carried by per-time weights, and an optional value
//! process `ζ` (a control or `Z`) rides along each particle.

use std::sync::{Arc, OnceLock};

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{param, Error, Result};
use crate::model::{MeasureSummary, ParticleMarginal};
use crate::paths::{norm, PathEnsemble, PathPrefix, TimeGrid};
use crate::stats::weighted_quantile;

const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Weighted particle representation of `t ↦ m_t = law(X_{·∧t}, ζ_t)`.
#[derive(Debug, Clone)]
pub struct MeasureFlow {
    grid: TimeGrid,
    states: Arc<Array3<f64>>,
    prefix_sup: Arc<Array2<f64>>,
    /// Radial scale applied to the whole prefix `X_{·∧t}` of particle `i` at time `t`.
    state_scale: Option<Arc<Array2<f64>>>,
    values: Arc<Array3<f64>>,
    weights: Arc<Array2<f64>>,
    /// Lazily built per-(time, coordinate) ascending order of the value samples.
    value_order: Arc<OnceLock<Vec<u32>>>,
}

fn normalize_columns(weights: &mut Array2<f64>) -> Result<()> {
    let (m, n1) = weights.dim();
    for n in 0..n1 {
        let mut total = 0.0;
        for i in 0..m {
            let w = weights[[i, n]];
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Measure(format!(
                    "weight {w} of particle {i} at grid index {n} is negative or non-finite"
                )));
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::Measure(format!("zero total mass at grid index {n}")));
        }
        let scale = m as f64 / total;
        for i in 0..m {
            weights[[i, n]] *= scale;
        }
    }
    Ok(())
}

impl MeasureFlow {
    /// Builds a flow on `ensemble`. Weights are renormalised to mean one at every grid time.
    pub fn new(ensemble: &PathEnsemble, values: Array3<f64>, mut weights: Array2<f64>) -> Result<Self> {
        let m = ensemble.n_paths();
        let n1 = ensemble.n_steps() + 1;
        if m == 0 {
            return Err(Error::Measure("empty flow".into()));
        }
        if values.shape()[0] != m || values.shape()[1] != n1 {
            return Err(Error::Measure(format!(
                "values shaped {:?}, expected [{m}, {n1}, _]",
                values.shape()
            )));
        }
        if weights.dim() != (m, n1) {
            return Err(Error::Measure(format!(
                "weights shaped {:?}, expected [{m}, {n1}]",
                weights.dim()
            )));
        }
        normalize_columns(&mut weights)?;
        Ok(Self {
            grid: ensemble.grid.clone(),
            states: ensemble.states.clone(),
            prefix_sup: ensemble.prefix_sup.clone(),
            state_scale: None,
            values: Arc::new(values),
            weights: Arc::new(weights),
            value_order: Arc::default(),
        })
    }

    /// The reference law of `X` (unit weights, no value process).
    pub fn reference(ensemble: &PathEnsemble) -> Self {
        let m = ensemble.n_paths();
        let n1 = ensemble.n_steps() + 1;
        Self::new(ensemble, Array3::zeros((m, n1, 0)), Array2::ones((m, n1))).expect("unit weights")
    }

    /// Same particles and law, new value process.
    pub fn with_values(&self, values: Array3<f64>) -> Result<Self> {
        let (m, n1) = self.weights.dim();
        if values.shape()[0] != m || values.shape()[1] != n1 {
            return Err(Error::Measure(format!("values shaped {:?}", values.shape())));
        }
        Ok(Self {
            values: Arc::new(values),
            value_order: Arc::default(),
            ..self.clone()
        })
    }

    /// Same particles and values, new law.
    pub fn with_weights(&self, mut weights: Array2<f64>) -> Result<Self> {
        if weights.dim() != self.weights.dim() {
            return Err(Error::Measure(format!("weights shaped {:?}", weights.dim())));
        }
        normalize_columns(&mut weights)?;
        Ok(Self {
            weights: Arc::new(weights),
            ..self.clone()
        })
    }

    /// `(1-λ) self + λ other` for two laws on the same particles and values.
    pub fn blend_weights(&self, other: &MeasureFlow, lambda: f64) -> Result<Self> {
        if !self.shares_particles(other) || !Arc::ptr_eq(&self.values, &other.values) && self.values != other.values {
            return Err(Error::Measure("blend needs identical particles and values".into()));
        }
        let w = &*self.weights * (1.0 - lambda) + &*other.weights * lambda;
        self.with_weights(w)
    }

    /// Particle indices sorted by value coordinate `j` at grid index `n`.
    fn sorted_values(&self, n: usize, j: usize) -> &[u32] {
        let (m, n1, r) = self.values.dim();
        let order = self.value_order.get_or_init(|| {
            let mut order = Vec::with_capacity(m * n1 * r);
            for n in 0..n1 {
                for j in 0..r {
                    let mut idx: Vec<u32> = (0..m as u32).collect();
                    idx.sort_by(|&a, &b| {
                        self.values[[a as usize, n, j]].total_cmp(&self.values[[b as usize, n, j]])
                    });
                    order.extend(idx);
                }
            }
            order
        });
        let start = (n * r + j) * m;
        &order[start..start + m]
    }

    fn shares_particles(&self, other: &MeasureFlow) -> bool {
        Arc::ptr_eq(&self.states, &other.states)
            && self.state_scale.is_none()
            && other.state_scale.is_none()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn dim_state(&self) -> usize {
        self.states.shape()[2]
    }

    pub fn dim_values(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn weight(&self, i: usize, n: usize) -> f64 {
        self.weights[[i, n]]
    }

    fn scale(&self, i: usize, n: usize) -> f64 {
        self.state_scale.as_ref().map_or(1.0, |s| s[[i, n]])
    }

    pub fn is_scaled(&self) -> bool {
        self.state_scale.is_some()
    }

    /// `x_t[j]` of particle `i`, after any cut-off.
    pub fn state(&self, i: usize, n: usize, j: usize) -> f64 {
        self.scale(i, n) * self.states[[i, n, j]]
    }

    pub fn value(&self, i: usize, n: usize, j: usize) -> f64 {
        self.values[[i, n, j]]
    }

    /// `‖(x_{·∧t}, ζ_t)‖ = ‖x_{·∧t}‖_∞ + |ζ_t|` for particle `i`.
    pub fn particle_norm(&self, i: usize, n: usize) -> f64 {
        let r = self.dim_values();
        let z: f64 = (0..r).map(|j| self.values[[i, n, j]].powi(2)).sum::<f64>().sqrt();
        self.scale(i, n) * self.prefix_sup[[i, n]] + z
    }

    /// Particle `i` observed up to `n`, with the cut-off scale applied when present.
    pub fn prefix<'a>(&'a self, i: usize, n: usize, buf: &'a mut Vec<f64>) -> PathPrefix<'a> {
        let d = self.dim_state();
        let stride = (self.grid.n_steps() + 1) * d;
        let data = self.states.as_slice().expect("standard layout");
        let raw = &data[i * stride..i * stride + (n + 1) * d];
        let times = &self.grid.times()[..=n];
        match &self.state_scale {
            None => PathPrefix::new(times, raw, d),
            Some(s) => {
                let f = s[[i, n]];
                buf.clear();
                buf.extend(raw.iter().map(|x| x * f));
                PathPrefix::new(times, buf, d)
            }
        }
    }

    /// Exact weighted moments of the marginal at grid index `n`.
    pub fn marginal(&self, n: usize) -> Result<MeasureSummary> {
        let m = self.n_paths();
        if m == 0 {
            return Err(Error::Measure("empty flow".into()));
        }
        if n > self.grid.n_steps() {
            return Err(Error::Measure(format!("grid index {n} out of range")));
        }
        let d = self.dim_state();
        let r = self.dim_values();
        let mut state_mean = vec![0.0; d];
        let mut value_mean = vec![0.0; r];
        let mut first = 0.0;
        for i in 0..m {
            let w = self.weights[[i, n]];
            for (j, s) in state_mean.iter_mut().enumerate() {
                *s += w * self.state(i, n, j);
            }
            for (j, v) in value_mean.iter_mut().enumerate() {
                *v += w * self.values[[i, n, j]];
            }
            first += w * self.particle_norm(i, n);
        }
        let mf = m as f64;
        state_mean.iter_mut().for_each(|s| *s /= mf);
        value_mean.iter_mut().for_each(|v| *v /= mf);
        let weights: Vec<f64> = (0..m).map(|i| self.weights[[i, n]]).collect();
        let quantiles = (0..d)
            .map(|j| {
                let xs: Vec<f64> = (0..m).map(|i| self.state(i, n, j)).collect();
                QUANTILE_LEVELS
                    .iter()
                    .map(|&q| (q, weighted_quantile(&xs, &weights, q)))
                    .collect()
            })
            .collect();
        Ok(MeasureSummary {
            state_mean,
            action_mean: value_mean,
            first_moment: first / mf,
            quantiles: Some(quantiles),
            particles: None,
        })
    }

    /// [`marginal`](Self::marginal) with the particle table attached.
    pub fn marginal_with_particles(&self, n: usize) -> Result<MeasureSummary> {
        let mut s = self.marginal(n)?;
        let m = self.n_paths();
        let d = self.dim_state();
        let r = self.dim_values();
        let mut states = Vec::with_capacity(m * d);
        let mut values = Vec::with_capacity(m * r);
        for i in 0..m {
            states.extend((0..d).map(|j| self.state(i, n, j)));
            values.extend((0..r).map(|j| self.values[[i, n, j]]));
        }
        s.particles = Some(Arc::new(ParticleMarginal {
            states,
            values,
            weights: (0..m).map(|i| self.weights[[i, n]]).collect(),
        }));
        Ok(s)
    }

    /// `M₁(m_t)` at every grid time.
    pub fn first_moments(&self) -> Vec<f64> {
        let m = self.n_paths();
        (0..=self.grid.n_steps())
            .map(|n| (0..m).map(|i| self.weights[[i, n]] * self.particle_norm(i, n)).sum::<f64>() / m as f64)
            .collect()
    }
}

/// 1-D Wasserstein-1 distance between two weighted samples (weights need not sum to one).
pub fn wasserstein1_1d(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64]) -> Result<f64> {
    if a.len() != wa.len() || b.len() != wb.len() {
        return Err(Error::Measure("sample and weight lengths differ".into()));
    }
    let total = |w: &[f64]| -> Result<f64> {
        let mut s = 0.0;
        for &x in w {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::Measure(format!("negative or non-finite weight {x}")));
            }
            s += x;
        }
        if s <= 0.0 {
            return Err(Error::Measure("sample has zero mass".into()));
        }
        Ok(s)
    };
    let (ta, tb) = (total(wa)?, total(wb)?);
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Measure("non-finite sample value".into()));
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(a.len() + b.len());
    pts.extend(a.iter().zip(wa).map(|(&v, &w)| (v, w / ta)));
    pts.extend(b.iter().zip(wb).map(|(&v, &w)| (v, -w / tb)));
    // Stable so that already sorted runs are merged; tie order does not change the distance.
    pts.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut cdf_gap = 0.0;
    let mut dist = 0.0;
    for k in 0..pts.len() - 1 {
        cdf_gap += pts[k].1;
        dist += cdf_gap.abs() * (pts[k + 1].0 - pts[k].0);
    }
    Ok(dist)
}

/// A finite convex combination of measure flows.
#[derive(Debug, Clone)]
pub struct YoungMixture {
    components: Vec<MeasureFlow>,
    lambdas: Vec<f64>,
}

/// Convex mixture of flows on a common grid.
pub fn mix(components: Vec<MeasureFlow>, lambdas: Vec<f64>) -> Result<YoungMixture> {
    if components.is_empty() || components.len() != lambdas.len() {
        return Err(Error::Measure("mixture needs one lambda per component".into()));
    }
    if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::Measure(format!("lambdas {lambdas:?} are not nonnegative")));
    }
    let s: f64 = lambdas.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Measure(format!("lambdas sum to {s}, not 1")));
    }
    let first = &components[0];
    for c in &components[1..] {
        if c.grid != first.grid {
            return Err(Error::GridMismatch("mixture components on different grids".into()));
        }
        if c.dim_state() != first.dim_state() || c.dim_values() != first.dim_values() {
            return Err(Error::Measure("mixture components have different dimensions".into()));
        }
        if c.n_paths() != first.n_paths() {
            return Err(Error::Measure("mixture components have different particle counts".into()));
        }
    }
    Ok(YoungMixture { components, lambdas })
}

impl YoungMixture {
    pub fn dirac(flow: MeasureFlow) -> Self {
        Self {
            components: vec![flow],
            lambdas: vec![1.0],
        }
    }

    pub fn components(&self) -> &[MeasureFlow] {
        &self.components
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// `(1-λ) self + λ δ_flow`.
    pub fn damp(&self, flow: MeasureFlow, lambda: f64) -> Result<YoungMixture> {
        let mut components = self.components.clone();
        let mut lambdas: Vec<f64> = self.lambdas.iter().map(|l| l * (1.0 - lambda)).collect();
        components.push(flow);
        lambdas.push(lambda);
        let keep: Vec<usize> = (0..lambdas.len()).filter(|&k| lambdas[k] > 0.0).collect();
        mix(
            keep.iter().map(|&k| components[k].clone()).collect(),
            keep.iter().map(|&k| lambdas[k]).collect(),
        )
    }

    /// Drops components whose weight is below `threshold` and renormalises the rest.
    pub fn pruned(&self, threshold: f64) -> YoungMixture {
        let keep: Vec<usize> = (0..self.lambdas.len())
            .filter(|&k| self.lambdas[k] >= threshold)
            .collect();
        if keep.is_empty() || keep.len() == self.lambdas.len() {
            return self.clone();
        }
        let total: f64 = keep.iter().map(|&k| self.lambdas[k]).sum();
        YoungMixture {
            components: keep.iter().map(|&k| self.components[k].clone()).collect(),
            lambdas: keep.iter().map(|&k| self.lambdas[k] / total).collect(),
        }
    }

    /// `Σ_k λ_k ∫ φ dν^k_t` for a test function of `(state, value)`.
    pub fn integrate<F: Fn(&[f64], &[f64]) -> f64>(&self, n: usize, f: F) -> f64 {
        let mut total = 0.0;
        for (flow, lambda) in self.components.iter().zip(&self.lambdas) {
            let m = flow.n_paths();
            let d = flow.dim_state();
            let r = flow.dim_values();
            let mut x = vec![0.0; d];
            let mut v = vec![0.0; r];
            let mut acc = 0.0;
            for i in 0..m {
                for (j, s) in x.iter_mut().enumerate() {
                    *s = flow.state(i, n, j);
                }
                for (j, s) in v.iter_mut().enumerate() {
                    *s = flow.value(i, n, j);
                }
                acc += flow.weight(i, n) * f(&x, &v);
            }
            total += lambda * acc / m as f64;
        }
        total
    }
}

/// Anything that can be read as a convex combination of flows.
pub trait ParticleSystem {
    fn parts(&self) -> Vec<(f64, &MeasureFlow)>;
}

impl ParticleSystem for MeasureFlow {
    fn parts(&self) -> Vec<(f64, &MeasureFlow)> {
        vec![(1.0, self)]
    }
}

impl ParticleSystem for YoungMixture {
    fn parts(&self) -> Vec<(f64, &MeasureFlow)> {
        self.lambdas.iter().copied().zip(self.components.iter()).collect()
    }
}

/// Gathers the weighted 1-D sample of state coordinate `j` (or value coordinate when
/// `value` is set) at grid index `n`.
fn gather(parts: &[(f64, &MeasureFlow)], n: usize, j: usize, value: bool) -> (Vec<f64>, Vec<f64>) {
    let first = parts[0].1;
    let shared = !value && parts.iter().all(|(_, f)| first.shares_particles(f));
    if shared {
        let m = first.n_paths();
        let xs = (0..m).map(|i| first.states[[i, n, j]]).collect();
        let ws = (0..m)
            .map(|i| parts.iter().map(|(l, f)| l * f.weights[[i, n]]).sum())
            .collect();
        return (xs, ws);
    }
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for (l, f) in parts {
        if value {
            // Pre-sorted runs let the stable sort in `wasserstein1_1d` merge instead of re-sorting.
            for &i in f.sorted_values(n, j) {
                let i = i as usize;
                xs.push(f.values[[i, n, j]]);
                ws.push(l * f.weights[[i, n]]);
            }
        } else {
            for i in 0..f.n_paths() {
                xs.push(f.state(i, n, j));
                ws.push(l * f.weights[[i, n]]);
            }
        }
    }
    (xs, ws)
}

/// `∫_0^T Σ_coords W₁(a_t, b_t) dt` over state and value coordinates (trapezoidal).
pub fn flow_distance<A: ParticleSystem + ?Sized, B: ParticleSystem + ?Sized>(a: &A, b: &B) -> Result<f64> {
    let pa = a.parts();
    let pb = b.parts();
    let (fa, fb) = (pa[0].1, pb[0].1);
    if fa.grid != fb.grid {
        return Err(Error::GridMismatch(format!(
            "{} vs {} steps / horizons {} vs {}",
            fa.grid.n_steps(),
            fb.grid.n_steps(),
            fa.grid.horizon(),
            fb.grid.horizon()
        )));
    }
    if fa.dim_state() != fb.dim_state() || fa.dim_values() != fb.dim_values() {
        return Err(Error::Measure("flows have different dimensions".into()));
    }
    let d = fa.dim_state();
    let r = fa.dim_values();
    let per_time: Vec<Result<f64>> = (0..=fa.grid.n_steps())
        .into_par_iter()
        .map(|n| {
            let mut s = 0.0;
            for (j, value) in (0..d).map(|j| (j, false)).chain((0..r).map(|j| (j, true))) {
                let (xa, wa) = gather(&pa, n, j, value);
                let (xb, wb) = gather(&pb, n, j, value);
                s += wasserstein1_1d(&xa, &wa, &xb, &wb)?;
            }
            Ok(s)
        })
        .collect();
    let per_time = per_time.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(fa.grid.trapezoid(&per_time))
}

/// Radial cut-off `c_N`: particles with `‖(x_{·∧t}, ζ_t)‖ > N` are scaled onto the sphere of radius `N`.
pub fn apply_cutoff(flow: &MeasureFlow, level: f64) -> Result<MeasureFlow> {
    if !(level.is_finite() && level > 0.0) {
        return Err(param("cutoff level", format!("must be > 0, got {level}")));
    }
    let (m, n1) = flow.weights.dim();
    let r = flow.dim_values();
    let mut scale = Array2::<f64>::from_elem((m, n1), 1.0);
    if let Some(s) = &flow.state_scale {
        scale.assign(s);
    }
    let mut values = (*flow.values).clone();
    let mut active = false;
    for i in 0..m {
        for n in 0..n1 {
            let nrm = flow.particle_norm(i, n);
            if nrm > level {
                active = true;
                let f = level / nrm;
                scale[[i, n]] *= f;
                for j in 0..r {
                    values[[i, n, j]] *= f;
                }
            }
        }
    }
    if !active {
        return Ok(flow.clone());
    }
    Ok(MeasureFlow {
        state_scale: Some(Arc::new(scale)),
        values: Arc::new(values),
        value_order: Arc::default(),
        ..flow.clone()
    })
}

/// Fraction of particles whose norm reaches `level` at some grid time.
pub fn cutoff_activity(flow: &MeasureFlow, level: f64) -> f64 {
    let m = flow.n_paths();
    let n1 = flow.grid.n_steps() + 1;
    let active = (0..m)
        .filter(|&i| (0..n1).any(|n| flow.particle_norm(i, n) >= level))
        .count();
    active as f64 / m as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct TightnessReport {
    /// `sup_flows ∫ |dμ/dμ_X|^{1+δ₁} dμ_X`, estimated by the weights at `T`.
    pub density_norm: f64,
    /// `sup_flows ∫_0^T ∫ |w|^{1+δ₂} q_t(dw) dt`
    pub value_moment: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub bound_density: Option<f64>,
    pub bound_moment: Option<f64>,
    pub passed: Option<bool>,
}

/// Tightness diagnostics for a family of flows on a common reference ensemble.
pub fn tightness_report(
    flows: &[&MeasureFlow],
    delta1: f64,
    delta2: f64,
    bounds: Option<(f64, f64)>,
) -> TightnessReport {
    let mut density = 0.0f64;
    let mut moment = 0.0f64;
    for flow in flows {
        let m = flow.n_paths();
        let last = flow.grid.n_steps();
        let dn = (0..m).map(|i| flow.weights[[i, last]].powf(1.0 + delta1)).sum::<f64>() / m as f64;
        let r = flow.dim_values();
        let per_time: Vec<f64> = (0..=last)
            .map(|n| {
                (0..m)
                    .map(|i| {
                        let z = norm(&(0..r).map(|j| flow.values[[i, n, j]]).collect::<Vec<_>>());
                        flow.weights[[i, n]] * z.powf(1.0 + delta2)
                    })
                    .sum::<f64>()
                    / m as f64
            })
            .collect();
        density = density.max(dn);
        moment = moment.max(flow.grid.trapezoid(&per_time));
    }
    let passed = bounds.map(|(c1, c2)| density <= c1 * (1.0 + 1e-12) && moment <= c2);
    TightnessReport {
        density_norm: density,
        value_moment: moment,
        delta1,
        delta2,
        bound_density: bounds.map(|b| b.0),
        bound_moment: bounds.map(|b| b.1),
        passed,
    }
}
