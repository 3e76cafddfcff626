//! Acceptance gate: runs every criterion at its stated tolerance and prints one
//! PASS/FAIL line per criterion. Run with `cargo test --test acceptance -- --nocapture`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use mfgweak::bsde::{
    comparison_check, energy_self_check, monotone_decreasing, solve_backward, stability_run, BsdeSolution, DriverSpec,
    FnDriver,
};
use mfgweak::fixedpoint::{
    iterate, model_bounds, solution_map, truncated_solve, verify_equilibrium, FixedPointConfig, FixedPointState,
    FixedPointStatus, IterateOutcome, VerifyConfig,
};
use mfgweak::girsanov::stochastic_exponential;
use mfgweak::io::write_iterations_csv;
use mfgweak::model::{builtin_additive, builtin_gbm, ExampleParams};
use mfgweak::paths::{simulate_brownian, simulate_state, PathEnsemble, PathPrefix, TimeGrid};
use mfgweak::regression::RegressionConfig;
use mfgweak::GameModel;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensemble(model: &dyn GameModel, m: usize, n: usize, seed: u64) -> PathEnsemble {
    let g = TimeGrid::uniform(model.horizon(), n).unwrap();
    simulate_state(model, &simulate_brownian(&g, m, model.dim_state(), seed).unwrap()).unwrap()
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn sci(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Collects every BSDE solution and every fixed-point history the suite produces.
#[derive(Default)]
struct Suite {
    solutions: Vec<(String, BsdeSolution, PathEnsemble)>,
    domain_flags: Vec<(String, Option<bool>)>,
    converged: Vec<(String, Arc<dyn GameModel>, PathEnsemble, IterateOutcome, FixedPointConfig)>,
}

impl Suite {
    fn record_iteration(&mut self, name: &str, outcome: &IterateOutcome) {
        for row in &outcome.report.rows {
            self.domain_flags.push((format!("{name}[{}]", row.k), row.domain_ok));
        }
        self.domain_flags
            .push((format!("{name}[check]"), outcome.check.diagnostics.tightness.as_ref().and_then(|t| t.passed)));
    }
}

fn criterion_1(suite: &mut Suite) -> Outcome {
    let x0 = 0.25;
    let model = builtin_additive(&ExampleParams {
        x0,
        mean_field: false,
        ..ExampleParams::default()
    })
    .unwrap();
    let start = Instant::now();
    let (out, ens) = single_threaded(|| {
        let ens = ensemble(model.as_ref(), 50_000, 100, 101);
        let state = FixedPointState::initial(model.as_ref(), &ens, None).unwrap();
        let out = solution_map(&model, &ens, &state, &FixedPointConfig::default()).unwrap();
        (out, ens)
    });
    let elapsed = start.elapsed();
    let y0 = out.solution.y0();
    let z_err = out.solution.z.iter().map(|z| (z - 1.0).abs()).sum::<f64>() / out.solution.z.len() as f64;
    // Itô closed form: Y_t = X_t + (T - t)/2, Z ≡ 1.
    let oracle = x0 + 0.5 * model.horizon();
    suite.solutions.push(("closed-form".into(), out.solution.clone(), ens));
    check(
        (y0 - oracle).abs() <= 0.02 && z_err <= 0.05 && elapsed < Duration::from_secs(60),
        format!("Y0={y0:.5} oracle={oracle} mean|Z-1|={z_err:.4} runtime={elapsed:.1?}"),
    )
}

fn criterion_2() -> Outcome {
    let (m, n, t) = (50_000, 50, 1.0);
    let g = TimeGrid::uniform(t, n).unwrap();
    let dw = simulate_brownian(&g, m, 1, 202).unwrap();
    let zero = stochastic_exponential(&Array3::zeros((m, n, 1)), &dw.increments, &g, false).unwrap();
    let exact_ones = zero.terminal_weights().iter().all(|&w| w == 1.0);

    let c: f64 = 0.5;
    let w = stochastic_exponential(&Array3::from_elem((m, n, 1), c), &dw.increments, &g, false)
        .unwrap()
        .terminal_weights();
    let (mean, se1) = mfgweak::stats::mean_se(&w);
    let sq: Vec<f64> = w.iter().map(|v| v * v).collect();
    let (second, se2) = mfgweak::stats::mean_se(&sq);
    let target = (c * c * t).exp();
    check(
        exact_ones && (mean - 1.0).abs() <= 5.0 * se1 && (second - target).abs() <= 5.0 * se2,
        format!("θ≡0 exact={exact_ones} mean={mean:.5}±{se1:.5} E[w²]={second:.5}±{se2:.5} target={target:.5}"),
    )
}

fn quad(terminal: impl Fn(PathPrefix<'_>) -> f64 + Send + Sync + 'static, extra: f64) -> DriverSpec {
    DriverSpec::new(Arc::new(FnDriver::new(move |_, _, z| 0.5 * z[0] * z[0] + extra * z[0].abs(), terminal)))
}

fn criterion_3(suite: &mut Suite) -> Outcome {
    let model = builtin_additive(&ExampleParams {
        x0: 0.0,
        mean_field: false,
        ..ExampleParams::default()
    })
    .unwrap();
    let ens = ensemble(model.as_ref(), 10_000, 50, 303);
    let cfg = RegressionConfig::default();
    let base = || quad(|p| p.current()[0].tanh(), 0.0);
    let pairs: Vec<(&str, DriverSpec, DriverSpec)> = vec![
        (
            "driver+1",
            DriverSpec::new(Arc::new(FnDriver::new(|_, _, z| 0.5 * z[0] * z[0] + 1.0, |p| p.current()[0].tanh()))),
            base(),
        ),
        ("terminal+1", quad(|p| p.current()[0].tanh() + 1.0, 0.0), base()),
        ("|z|+0.1", quad(|p| p.current()[0].tanh() + 0.1, 1.0), base()),
    ];
    let mut ok = true;
    let mut details = Vec::new();
    for (name, a, b) in pairs {
        let sa = solve_backward(&a, &ens, &cfg).unwrap();
        let sb = solve_backward(&b, &ens, &cfg).unwrap();
        let r = comparison_check(&sa, &sb, 5e-3).unwrap();
        ok &= r.passed;
        details.push(format!("{name}: {:.4}%", 100.0 * r.violation_rate));
        suite.solutions.push((format!("comparison {name} a"), sa, ens.clone()));
        suite.solutions.push((format!("comparison {name} b"), sb, ens.clone()));
    }
    check(ok, format!("violation rates {}", details.join(", ")))
}

fn criterion_4(suite: &Suite) -> Outcome {
    let cfg = RegressionConfig::default();
    let mut failures = Vec::new();
    for (name, sol, ens) in &suite.solutions {
        let r = energy_self_check(sol, ens, &cfg).unwrap();
        if !r.holds {
            failures.push(format!("{name}: {:?}", r.rows));
        }
    }
    check(
        failures.is_empty(),
        format!("{} solutions checked; failures: {failures:?}", suite.solutions.len()),
    )
}

/// Independent brute-force Picard iteration for the GBM game on a coarse grid. Paths
/// are exact lognormals, the BSDE uses its own quadratic least-squares fit, and the
/// consistency pair (state mean, action mean) is damped until it stops moving.
fn coarse_picard_oracle(x0: f64, horizon: f64, m: usize, n: usize, seed: u64) -> Vec<f64> {
    let dt = horizon / n as f64;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dw: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * dt.sqrt()
                })
                .collect()
        })
        .collect();
    let x: Vec<Vec<f64>> = dw
        .iter()
        .map(|inc| {
            let mut w = 0.0;
            let mut row = vec![x0];
            for (k, d) in inc.iter().enumerate() {
                w += d;
                row.push(x0 * (w - 0.5 * (k + 1) as f64 * dt).exp());
            }
            row
        })
        .collect();

    // E[target | 1, x, x²] by normal equations with Gaussian elimination.
    let fit = |xs: &[f64], ys: &[f64]| -> Vec<f64> {
        let mut a = [[0.0f64; 4]; 3];
        for (&xv, &yv) in xs.iter().zip(ys) {
            let b = [1.0, xv, xv * xv];
            for r in 0..3 {
                for c in 0..3 {
                    a[r][c] += b[r] * b[c];
                }
                a[r][3] += b[r] * yv;
            }
        }
        for p in 0..3 {
            for r in (p + 1)..3 {
                let f = a[r][p] / a[p][p];
                for c in p..4 {
                    a[r][c] -= f * a[p][c];
                }
            }
        }
        let mut beta = [0.0; 3];
        for r in (0..3).rev() {
            let s: f64 = ((r + 1)..3).map(|c| a[r][c] * beta[c]).sum();
            beta[r] = (a[r][3] - s) / a[r][r];
        }
        xs.iter().map(|&xv| beta[0] + beta[1] * xv + beta[2] * xv * xv).collect()
    };

    let mut mean = vec![x0; n + 1];
    let mut action = vec![0.0; n + 1];
    for _ in 0..400 {
        // Backward: H = ½(z + tanh m̄)² + z m̄ + clamp(x) ā, Y_T = m̄_T.
        let mut y = vec![mean[n]; m];
        let mut z = vec![vec![0.0; n + 1]; m];
        for k in (0..n).rev() {
            let xs: Vec<f64> = x.iter().map(|r| r[k]).collect();
            let yhat = if k == 0 {
                vec![y.iter().sum::<f64>() / m as f64; m]
            } else {
                fit(&xs, &y)
            };
            let zt: Vec<f64> = (0..m).map(|i| (y[i] - yhat[i]) * dw[i][k] / dt).collect();
            let zk = if k == 0 {
                vec![zt.iter().sum::<f64>() / m as f64; m]
            } else {
                fit(&xs, &zt)
            };
            let phi = mean[k].tanh();
            for i in 0..m {
                z[i][k] = zk[i];
                let h = 0.5 * (zk[i] + phi).powi(2) + zk[i] * mean[k] + xs[i].clamp(-1.0, 1.0) * action[k];
                y[i] = yhat[i] + h * dt;
            }
        }
        for row in &mut z {
            row[n] = row[n - 1];
        }
        // Forward reweighting.
        let mut log_e = vec![0.0; m];
        let mut new_mean = vec![0.0; n + 1];
        let mut new_action = vec![0.0; n + 1];
        for k in 0..=n {
            let w: Vec<f64> = log_e.iter().map(|l: &f64| l.exp()).collect();
            let total: f64 = w.iter().sum();
            let phi = mean[k].tanh();
            new_mean[k] = (0..m).map(|i| w[i] * x[i][k]).sum::<f64>() / total;
            new_action[k] = (0..m).map(|i| w[i] * (z[i][k] + phi)).sum::<f64>() / total;
            if k < n {
                for i in 0..m {
                    let theta = z[i][k] + phi + mean[k];
                    log_e[i] += theta * dw[i][k] - 0.5 * theta * theta * dt;
                }
            }
        }
        let change = (0..=n)
            .map(|k| (new_mean[k] - mean[k]).abs() + (new_action[k] - action[k]).abs())
            .fold(0.0, f64::max);
        for k in 0..=n {
            mean[k] = 0.5 * mean[k] + 0.5 * new_mean[k];
            action[k] = 0.5 * action[k] + 0.5 * new_action[k];
        }
        if change < 1e-8 {
            break;
        }
    }
    mean
}

fn criterion_5(suite: &mut Suite) -> Outcome {
    let params = ExampleParams::default();
    let model = builtin_gbm(&params).unwrap();
    let cfg = FixedPointConfig {
        damping: 0.5,
        tol: 1e-2,
        max_iter: 50,
        ..FixedPointConfig::default()
    };
    let start = Instant::now();
    let ens = ensemble(model.as_ref(), 20_000, 50, 505);
    let outcome = iterate(&model, &ens, &cfg).unwrap();
    let elapsed = start.elapsed();
    let report = &outcome.report;
    suite.record_iteration("gbm", &outcome);
    suite
        .solutions
        .push(("gbm fixed point".into(), outcome.check.solution.clone(), ens.clone()));

    let oracle = coarse_picard_oracle(params.x0, params.horizon, 2000, 10, 5050);
    let mu = &outcome.state.mu;
    let coarse = TimeGrid::uniform(params.horizon, 10).unwrap();
    let gaps: Vec<f64> = (0..=10)
        .map(|k| (mu.marginal(5 * k).unwrap().state_mean[0] - oracle[k]).abs())
        .collect();
    let distance = coarse.trapezoid(&gaps);
    let converged = report.status == FixedPointStatus::Converged;
    let detail = format!(
        "status={:?} updates={} residual={:.3e} recheck={:.3e} ∫|m-m_oracle|={distance:.4} runtime={elapsed:.1?}",
        report.status, report.iterations, report.final_residual, report.recheck_residual
    );
    let ok = converged
        && report.final_residual <= 1e-2
        && report.iterations <= 50
        && distance <= 5e-2
        && elapsed < Duration::from_secs(600);
    if converged {
        suite.converged.push(("gbm".into(), model, ens, outcome, cfg));
    }
    check(ok, detail)
}

fn criterion_6(suite: &mut Suite) -> Outcome {
    let x0 = 0.25;
    let model = builtin_additive(&ExampleParams {
        x0,
        mean_field: false,
        ..ExampleParams::default()
    })
    .unwrap();
    let ens = ensemble(model.as_ref(), 20_000, 50, 606);
    let cfg = FixedPointConfig::default();
    let additive = iterate(&model, &ens, &cfg).unwrap();
    suite.record_iteration("additive-no-mf", &additive);
    suite.converged.push(("additive-no-mf".into(), model, ens, additive, cfg));

    let vc = VerifyConfig::default();
    let mut ok = true;
    let mut details = Vec::new();
    for (name, model, ens, outcome, cfg) in &suite.converged {
        let rep = verify_equilibrium(model.as_ref(), ens, outcome, cfg, &vc).unwrap();
        details.push(format!(
            "{name}: |Y0-J|={:.4} 3SE={:.4} deviations_ok={} residual_ok={}",
            (rep.y0 - rep.payoff.mean).abs(),
            3.0 * rep.payoff.se,
            rep.deviations_ok,
            rep.residual_ok
        ));
        ok &= rep.payoff_ok && rep.deviations_ok;
        if name == "additive-no-mf" {
            let t = ens.grid.horizon();
            for d in rep.deviations.iter().filter(|d| d.direction.eval(0.0).abs() == 1.0 && d.direction.eval(0.7).abs() == 1.0) {
                // Constant directions: exact loss -½ε²T.
                let expected = -0.5 * vc.epsilon * vc.epsilon * t;
                let hit = (d.gain - expected).abs() <= 3.0 * d.se;
                ok &= hit;
                details.push(format!("{:?}: gain={:.4} expected={expected} se={:.4}", d.direction, d.gain, d.se));
            }
        }
    }
    check(ok, details.join("; "))
}

fn criterion_7(suite: &mut Suite) -> Outcome {
    let model = builtin_additive(&ExampleParams {
        x0: 0.1,
        ..ExampleParams::default()
    })
    .unwrap();
    let ens = ensemble(model.as_ref(), 20_000, 50, 707);
    let cfg = FixedPointConfig::default();
    let (report, last) = truncated_solve(&model, &ens, &[2.0, 4.0, 8.0, 16.0], &cfg, 2e-2).unwrap();
    suite.record_iteration("truncation", &last);
    let distances: Vec<f64> = report.rows.iter().filter_map(|r| r.distance_to_previous).collect();
    let decreasing = distances.windows(2).all(|w| w[1] <= w[0]) && distances[0] > *distances.last().unwrap();
    let final_gap = *distances.last().unwrap();
    let activity = report.rows.last().unwrap().cutoff_activity;
    let statuses: Vec<_> = report.rows.iter().map(|r| r.status).collect();
    check(
        decreasing && final_gap <= 2e-2 && activity < 1e-3 && statuses.iter().all(|s| *s == FixedPointStatus::Converged),
        format!("distances={distances:.4?} final activity={activity:.2e} statuses={statuses:?}"),
    )
}

fn criterion_8(suite: &mut Suite) -> Outcome {
    let model = builtin_additive(&ExampleParams {
        x0: 0.0,
        mean_field: false,
        ..ExampleParams::default()
    })
    .unwrap();
    let ens = ensemble(model.as_ref(), 10_000, 50, 808);
    let cfg = RegressionConfig::default();
    let ns = [1.0, 2.0, 4.0, 8.0];
    let clamp = |z: f64, n: f64| z.clamp(-n, n);

    // Truncation of the quadratic driver and of the induced drift at level n/2. The
    // even terminal makes Z depend on the state, so the truncation is visible in Z.
    let truncated = |level: Option<f64>| {
        let gen = move |_: f64, _: PathPrefix<'_>, z: &[f64]| {
            let zc = level.map_or(z[0], |l| clamp(z[0], l));
            0.5 * zc * zc
        };
        let drift = move |_: f64, _: PathPrefix<'_>, z: &[f64], out: &mut [f64]| {
            out[0] = level.map_or(z[0], |l| clamp(z[0], l));
        };
        DriverSpec::new(Arc::new(
            FnDriver::new(gen, |p| 0.4 * p.current()[0].powi(2)).with_drift(drift),
        ))
    };
    let mut trunc_specs: Vec<DriverSpec> = ns.iter().map(|&n| truncated(Some(n / 2.0))).collect();
    trunc_specs.push(truncated(None));

    // Terminal perturbation ξ + sin(x)/n.
    let perturbed = |n: Option<f64>| {
        DriverSpec::new(Arc::new(
            FnDriver::new(
                |_, _, z| 0.5 * z[0] * z[0],
                move |p| {
                    let x = p.current()[0];
                    x.tanh() + n.map_or(0.0, |n| x.sin() / n)
                },
            )
            .with_drift(|_, _, z, out| out[0] = z[0]),
        ))
    };
    let mut pert_specs: Vec<DriverSpec> = ns.iter().map(|&n| perturbed(Some(n))).collect();
    pert_specs.push(perturbed(None));

    let mut ok = true;
    let mut details = Vec::new();
    for (name, specs) in [("truncation", trunc_specs), ("terminal 1/n", pert_specs)] {
        let table = stability_run(&specs, &ens, &cfg).unwrap();
        let rows = &table.rows[..ns.len()];
        let z: Vec<f64> = rows.iter().map(|r| r.z_gap).collect();
        let tv: Vec<f64> = rows.iter().map(|r| r.tv_bound).collect();
        let mono = monotone_decreasing(&z, 0.1) && monotone_decreasing(&tv, 0.1) && z[0] > z[3] && tv[0] > tv[3];
        ok &= mono;
        details.push(format!("{name}: z_gap={} tv={}", sci(&z), sci(&tv)));
        let limit = solve_backward(specs.last().unwrap(), &ens, &cfg).unwrap();
        suite.solutions.push((format!("stability {name} limit"), limit, ens.clone()));
    }
    check(ok, details.join("; "))
}

fn criterion_9(suite: &Suite) -> Outcome {
    let bounded_models = suite.domain_flags.len();
    let failures: Vec<&String> = suite
        .domain_flags
        .iter()
        .filter(|(_, f)| *f != Some(true))
        .map(|(n, _)| n)
        .collect();
    check(
        bounded_models > 0 && failures.is_empty(),
        format!("{bounded_models} Φ outputs checked; failing: {failures:?}"),
    )
}

fn criterion_10() -> Outcome {
    let model = builtin_gbm(&ExampleParams::default()).unwrap();
    let cfg = FixedPointConfig {
        max_iter: 5,
        ..FixedPointConfig::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let ens = ensemble(model.as_ref(), 4000, 20, 1010);
            let outcome = iterate(&model, &ens, &cfg).unwrap();
            let mut csv = Vec::new();
            write_iterations_csv(&mut csv, &outcome.report.rows).unwrap();
            let bits: Vec<u64> = outcome.check.solution.z.iter().map(|v| v.to_bits()).collect();
            (csv, bits)
        })
    };
    let one = run(1);
    let again = run(1);
    let four = run(4);
    check(
        one == again && one == four,
        format!("{} CSV bytes; identical across reruns and worker counts: {}", one.0.len(), one == four),
    )
}

/// Criteria to run, from `ACCEPTANCE_ONLY=3,8`; all of them by default.
fn selected(k: usize) -> bool {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|v| v.trim().parse() == Ok(k)),
        Err(_) => true,
    }
}

// Runs without the libtest harness so the per-criterion report is never captured.
fn main() {
    let bounds = model_bounds(builtin_gbm(&ExampleParams::default()).unwrap().as_ref()).unwrap();
    eprintln!("a-priori bounds: {bounds:?}");
    let mut suite = Suite::default();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut run = |k: usize, f: &mut dyn FnMut(&mut Suite) -> Outcome, suite: &mut Suite| {
        if !selected(k) {
            return;
        }
        let start = Instant::now();
        let r = f(suite);
        eprintln!("criterion {k:>2} finished in {:.1?}: {r:?}", start.elapsed());
        results.push((k, r));
    };
    run(1, &mut criterion_1, &mut suite);
    run(2, &mut |_| criterion_2(), &mut suite);
    run(3, &mut criterion_3, &mut suite);
    run(5, &mut criterion_5, &mut suite);
    run(6, &mut criterion_6, &mut suite);
    run(7, &mut criterion_7, &mut suite);
    run(8, &mut criterion_8, &mut suite);
    run(4, &mut |s| criterion_4(s), &mut suite);
    run(9, &mut |s| criterion_9(s), &mut suite);
    run(10, &mut |_| criterion_10(), &mut suite);
    results.sort_by_key(|(k, _)| *k);

    let mut failed = Vec::new();
    for (k, r) in &results {
        match r {
            Ok(d) => println!("criterion {k:>2}: PASS  {d}"),
            Err(d) => {
                println!("criterion {k:>2}: FAIL  {d}");
                failed.push(*k);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
