//! Least-squares conditional expectations on polynomial and path-functional bases.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::paths::{PathEnsemble, PathFunctional};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    /// Total polynomial degree in the current state coordinates.
    pub degree: usize,
    /// Extra prefix-adapted regressors.
    pub functionals: Vec<PathFunctional>,
    /// Tikhonov penalty on the standardised non-intercept coefficients.
    pub ridge: f64,
    pub min_paths: usize,
    /// Condition number above which an unpenalised fit is rejected.
    pub max_condition: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            functionals: Vec::new(),
            ridge: 0.0,
            min_paths: 16,
            max_condition: 1e12,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(param("regression.ridge", format!("must be >= 0, got {}", self.ridge)));
        }
        if !(self.max_condition > 1.0) {
            return Err(param("regression.max_condition", "must be > 1"));
        }
        Ok(())
    }
}

/// Exponent vectors of all monomials of total degree `1..=degree` in `d` variables.
fn monomials(d: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d {
            if cur.iter().sum::<usize>() > 0 {
                out.push(cur.clone());
            }
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(d, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|m| m.iter().sum::<usize>());
    out
}

/// Regressors at grid index `n`: polynomial terms in `X_{t_n}` then the configured functionals.
pub fn features(ensemble: &PathEnsemble, n: usize, config: &RegressionConfig) -> Array2<f64> {
    let d = ensemble.dim();
    let monos = monomials(d, config.degree);
    let cols = monos.len() + config.functionals.len();
    let m = ensemble.n_paths();
    let mut out = Array2::zeros((m, cols));
    for i in 0..m {
        let p = ensemble.prefix(i, n);
        let x = p.current();
        for (c, mono) in monos.iter().enumerate() {
            out[[i, c]] = mono.iter().zip(x).map(|(&e, v)| v.powi(e as i32)).product();
        }
        for (c, f) in config.functionals.iter().enumerate() {
            out[[i, monos.len() + c]] = f.eval(p);
        }
    }
    out
}

/// A factored least-squares problem that can project several targets.
#[derive(Debug, Clone)]
pub struct LeastSquaresProjector {
    design: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    condition: f64,
}

impl LeastSquaresProjector {
    /// Standardises the columns of `features`, drops constant ones and adds an intercept.
    pub fn new(features: &Array2<f64>, config: &RegressionConfig) -> Result<Self> {
        let (m, r) = features.dim();
        if m < config.min_paths.max(1) {
            return Err(Error::Regression {
                reason: format!("{m} paths, need at least {}", config.min_paths),
                condition: f64::NAN,
            });
        }
        let mf = m as f64;
        let mut kept: Vec<(usize, f64, f64)> = Vec::new();
        for c in 0..r {
            let col = features.column(c);
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Regression {
                    reason: format!("feature column {c} is not finite"),
                    condition: f64::NAN,
                });
            }
            let mean = col.sum() / mf;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / mf).sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                kept.push((c, mean, sd));
            }
        }
        let k = kept.len() + 1;
        let mut design = DMatrix::<f64>::zeros(m, k);
        for i in 0..m {
            design[(i, 0)] = 1.0;
            for (j, &(c, mean, sd)) in kept.iter().enumerate() {
                design[(i, j + 1)] = (features[[i, c]] - mean) / sd;
            }
        }
        let mut gram = design.tr_mul(&design) / mf;
        for j in 1..k {
            gram[(j, j)] += config.ridge;
        }
        let eig = gram.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if condition > config.max_condition && config.ridge == 0.0 {
            return Err(Error::Regression {
                reason: "rank-deficient design; set a positive ridge".into(),
                condition,
            });
        }
        let chol = gram.cholesky().ok_or(Error::Regression {
            reason: "normal equations are not positive definite".into(),
            condition,
        })?;
        Ok(Self {
            design,
            chol,
            condition,
        })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// In-sample fitted values of the projection of `targets`.
    pub fn project(&self, targets: &[f64]) -> Vec<f64> {
        let m = self.design.nrows();
        let y = DVector::from_column_slice(targets);
        let rhs = self.design.tr_mul(&y) / m as f64;
        let beta = self.chol.solve(&rhs);
        (&self.design * beta).iter().copied().collect()
    }
}

/// One-shot `E[target | features]` by least squares.
pub fn conditional_expectation(
    features: &Array2<f64>,
    targets: &[f64],
    config: &RegressionConfig,
) -> Result<Vec<f64>> {
    if targets.len() != features.nrows() {
        return Err(param("targets", "length differs from the number of feature rows"));
    }
    Ok(LeastSquaresProjector::new(features, config)?.project(targets))
}
