//! Fast invariant checks on random instances, run by `bcp selftest` and the
//! acceptance suite. Each check is deterministic under its fixed seed.

use rand::Rng;
use serde::Serialize;

use crate::baselines::lasso_fit;
use crate::conformal::{build_set, LabelSpace};
use crate::datasets::{fit_standardizer, Dataset, TaskKind};
use crate::optimizer::{BcpOptions, BcpProblem};
use crate::conformal::RiskConfig;
use crate::quadrature::{median_pairwise_distance, BqRule};
use crate::rng::rng_from_seed;
use crate::scores::{aoi_predictive, mean_predictive, ScoreKind, ScoreMatrix};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<(), String>) -> CheckResult {
    CheckResult {
        name,
        passed: outcome.is_ok(),
        detail: outcome.err().unwrap_or_default(),
    }
}

fn random_likes(rng: &mut impl Rng) -> Vec<f64> {
    let t = rng.random_range(1..50);
    (0..t).map(|_| rng.random::<f64>() * 10f64.powi(rng.random_range(-3..3))).collect()
}

pub fn aoi_cauchy_schwarz() -> Result<(), String> {
    let mut rng = rng_from_seed(1);
    for _ in 0..500 {
        let f = random_likes(&mut rng);
        let (aoi, mean) = (aoi_predictive(&f).map_err(|e| e.to_string())?, mean_predictive(&f).map_err(|e| e.to_string())?);
        if aoi < mean * (1.0 - 1e-12) {
            return Err(format!("AOI {aoi} below mean {mean}"));
        }
    }
    Ok(())
}

pub fn aoi_scale_covariance() -> Result<(), String> {
    let mut rng = rng_from_seed(2);
    for _ in 0..500 {
        let f = random_likes(&mut rng);
        let c = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = f.iter().map(|v| v * c).collect();
        let (a, b) = (aoi_predictive(&f).unwrap(), aoi_predictive(&scaled).unwrap());
        if (b - c * a).abs() > 1e-9 * (c * a).abs() {
            return Err(format!("p(cf) = {b}, c·p(f) = {}", c * a));
        }
    }
    Ok(())
}

pub fn set_size_monotone_in_lambda() -> Result<(), String> {
    let mut rng = rng_from_seed(3);
    let labels = LabelSpace::Grid((0..40).map(|k| k as f64 * 0.1).collect());
    for _ in 0..200 {
        let row: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..5.0)).collect();
        let mut prev = -1.0;
        for k in 0..60 {
            let size = build_set(&row, &labels, -3.0 + 0.15 * k as f64).size();
            if size < prev {
                return Err(format!("size fell from {prev} to {size}"));
            }
            prev = size;
        }
    }
    Ok(())
}

/// A BCP problem on random scores whose size curve is monotone (all
/// evaluation inputs are BQ nodes).
fn random_problem(seed: u64) -> BcpProblem {
    let mut rng = rng_from_seed(seed);
    let n_cal = 40;
    let n_eval = 30;
    let cal: Vec<f64> = (0..n_cal).map(|_| rng.random_range(0.0..4.0)).collect();
    let rows: Vec<Vec<f64>> = (0..n_eval).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let inputs = Dataset::from_rows(&rows, vec![0.0; n_eval], TaskKind::Regression).unwrap();
    let grid: Vec<f64> = (0..25).map(|k| k as f64 * 0.2).collect();
    let centres: Vec<f64> = (0..n_eval).map(|_| rng.random_range(1.0..4.0)).collect();
    let values = centres
        .iter()
        .flat_map(|&m| grid.iter().map(move |&y| (y - m).abs()))
        .collect();
    let scores = ScoreMatrix::from_values(ScoreKind::AoiNeglog, grid.clone(), n_eval, values).unwrap();
    let opts = BcpOptions { grid_size: 50, ..BcpOptions::default() };
    BcpProblem::from_scores(&cal, &inputs, &scores, &LabelSpace::Grid(grid), 1000, seed, &opts).unwrap()
}

pub fn lambda_star_monotone() -> Result<(), String> {
    for seed in 0..5 {
        let problem = random_problem(100 + seed);
        let solve = |a: f64, b: f64| problem.solve(&RiskConfig { seed, dirichlet_draws: 1000, ..RiskConfig::new(a, b) }).unwrap().lambda_star;
        for (i, &a) in [0.05, 0.1, 0.2, 0.3].iter().enumerate() {
            for &b in &[0.05, 0.2, 0.5, 0.8] {
                let l = solve(a, b);
                if let Some(&a2) = [0.1, 0.2, 0.3, 0.5].get(i) {
                    if solve(a2, b) > l {
                        return Err(format!("λ* grew with α at α={a}, β={b}"));
                    }
                }
                if solve(a, (b + 0.1).min(0.95)) > l {
                    return Err(format!("λ* grew with β at α={a}, β={b}"));
                }
            }
        }
    }
    Ok(())
}

fn random_inputs(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn bq_constant_exact() -> Result<(), String> {
    let rows = random_inputs(5, 80);
    let inputs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let nodes: Vec<usize> = (0..80).step_by(5).collect();
    let rule = BqRule::new(&inputs, &nodes, median_pairwise_distance(&inputs), 1e-8).map_err(|e| e.to_string())?;
    for c in [0.0, 1.0, 3.7, -2.5] {
        let est = rule.integrate(&vec![c; 80], None);
        if (est.mean - c).abs() > 1e-9 * c.abs().max(1.0) {
            return Err(format!("constant {c} integrated to {}", est.mean));
        }
    }
    Ok(())
}

pub fn bq_equals_mc_at_full_nodes() -> Result<(), String> {
    let rows = random_inputs(6, 50);
    let inputs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let nodes: Vec<usize> = (0..50).collect();
    let rule = BqRule::new(&inputs, &nodes, median_pairwise_distance(&inputs), 1e-10).map_err(|e| e.to_string())?;
    let mut rng = rng_from_seed(7);
    for _ in 0..20 {
        let values: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..3.0)).collect();
        let mc = values.iter().sum::<f64>() / 50.0;
        let bq = rule.integrate(&values, None).mean;
        if (bq - mc).abs() > 1e-6 {
            return Err(format!("BQ {bq} vs MC {mc}"));
        }
    }
    Ok(())
}

pub fn lasso_soft_threshold() -> Result<(), String> {
    let x = [-1.5, -0.5, 0.5, 1.5];
    let sd = (x.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
    let rows: Vec<Vec<f64>> = x.iter().map(|v| vec![v / sd]).collect();
    let y: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let data = Dataset::from_rows(&rows, y, TaskKind::Regression).map_err(|e| e.to_string())?;
    let m = lasso_fit(&data, 0.4, 10_000, 1e-8).map_err(|e| e.to_string())?;
    if (m.coefficients[0] - 0.6).abs() > 1e-10 {
        return Err(format!("coefficient {} instead of 0.6", m.coefficients[0]));
    }
    Ok(())
}

pub fn lasso_objective_descent() -> Result<(), String> {
    let mut rng = rng_from_seed(8);
    for trial in 0..10 {
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] - 0.5 * r[1] + rng.random_range(-1.0..1.0)).collect();
        let data = Dataset::from_rows(&rows, y, TaskKind::Regression).map_err(|e| e.to_string())?;
        let m = lasso_fit(&data, 0.01 * trial as f64, 300, 1e-12).map_err(|e| e.to_string())?;
        if m.objective_trace.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            return Err(format!("objective increased in trial {trial}"));
        }
    }
    Ok(())
}

pub fn standardization_no_leakage() -> Result<(), String> {
    let rows = random_inputs(9, 40);
    let labels: Vec<f64> = rows.iter().map(|r| r[0] + r[2]).collect();
    let data = Dataset::from_rows(&rows, labels.clone(), TaskKind::Regression).map_err(|e| e.to_string())?;
    let train: Vec<usize> = (0..25).collect();
    let a = fit_standardizer(&data, &train).map_err(|e| e.to_string())?;
    let mut poisoned = rows.clone();
    for r in &mut poisoned[25..] {
        r.iter_mut().for_each(|v| *v *= 1e3);
    }
    let mut poisoned_labels = labels;
    poisoned_labels[30] = 1e6;
    let b = fit_standardizer(
        &Dataset::from_rows(&poisoned, poisoned_labels, TaskKind::Regression).map_err(|e| e.to_string())?,
        &train,
    )
    .map_err(|e| e.to_string())?;
    if a != b {
        return Err("held-out rows changed the fitted standardizer".into());
    }
    let z = a.apply(&data.subset(&train)).map_err(|e| e.to_string())?;
    for j in 0..z.n_features() {
        let col = z.column(j);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        if mean.abs() > 1e-12 || (var - 1.0).abs() > 1e-12 {
            return Err(format!("column {j}: mean {mean}, variance {var}"));
        }
    }
    Ok(())
}

/// Every invariant check, in a fixed order.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        check("aoi_cauchy_schwarz", aoi_cauchy_schwarz()),
        check("aoi_scale_covariance", aoi_scale_covariance()),
        check("set_size_monotone_in_lambda", set_size_monotone_in_lambda()),
        check("lambda_star_monotone_in_alpha_beta", lambda_star_monotone()),
        check("bq_constant_exactness", bq_constant_exact()),
        check("bq_equals_mc_at_full_nodes", bq_equals_mc_at_full_nodes()),
        check("lasso_soft_threshold", lasso_soft_threshold()),
        check("lasso_objective_descent", lasso_objective_descent()),
        check("standardization_no_leakage", standardization_no_leakage()),
    ]
}
