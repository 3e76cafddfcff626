//! Small deterministic statistics helpers.
//!
//! Sums are always taken sequentially in index order so results never depend on the
//! number of worker threads.

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], level: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let pos = level.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

/// Lower weighted quantile: smallest value whose cumulative weight reaches `level`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], level: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let total: f64 = weights.iter().sum();
    let target = level.clamp(0.0, 1.0) * total;
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i];
        if acc >= target {
            return values[i];
        }
    }
    values[idx[idx.len() - 1]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(weighted_quantile(&[0.0, 2.0], &[1.0, 1.0], 0.5), 0.0);
        assert_eq!(weighted_quantile(&[0.0, 2.0], &[1.0, 3.0], 0.5), 2.0);
        let (m, se) = mean_se(&[1.0, 1.0, 1.0]);
        assert_eq!((m, se), (1.0, 0.0));
    }
}
