//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers and returns a JSON string, either the
//! payload or `{"error": "..."}`, so the page needs no generated glue beyond
//! strings and the functions are testable natively.

use bcp_core::conformal::{exact_binary_prob, LabelSpace, LplusSampler, RiskConfig};
use bcp_core::datasets::{fit_standardizer, label_grid, make_split, synthetic_regression, SplitRatios};
use bcp_core::optimizer::{bcp_calibrate, BcpOptions};
use bcp_core::posterior::{sample_blr, McmcConfig, ModelKind, PosteriorDraws, PriorConfigRegression};
use bcp_core::rng::splitmix64;
use bcp_core::scores::{aoi_log_predictive, compute_test_scores, mean_log_predictive};
use bcp_core::conformal::build_set;
use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

type DemoResult<T> = Result<T, String>;

fn to_json<T: Serialize>(r: DemoResult<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| format!(r#"{{"error":"{e}"}}"#)),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[derive(Debug, Serialize)]
pub struct LplusView {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub expected_mean: f64,
    pub prob_below_alpha: f64,
    pub exact_prob: f64,
}

/// Histogram of `L⁺` for `ones` unit losses among `n` calibration points.
pub fn lplus_explorer(n: usize, ones: usize, alpha: f64, draws: usize, seed: u64) -> DemoResult<LplusView> {
    if ones > n || !(alpha > 0.0 && alpha < 1.0) || draws == 0 || draws > 200_000 {
        return Err("need ones ≤ n, alpha in (0, 1) and 1..=200000 draws".into());
    }
    let sampler = LplusSampler::new(n, draws, seed).map_err(|e| e.to_string())?;
    let values = sampler.binary_draws(ones, 1.0);
    let bins = 40;
    let mut counts = vec![0usize; bins];
    for v in &values {
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(LplusView {
        bin_edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
        mean: values.iter().sum::<f64>() / values.len() as f64,
        expected_mean: (ones as f64 + 1.0) / (n as f64 + 1.0),
        prob_below_alpha: sampler.binary_prob_below(ones, 1.0, alpha),
        exact_prob: exact_binary_prob(ones, n, alpha),
    })
}

#[wasm_bindgen]
pub fn lplus_explorer_json(n: usize, ones: usize, alpha: f64, draws: usize, seed: u32) -> String {
    to_json(lplus_explorer(n, ones, alpha, draws, u64::from(seed)))
}

#[derive(Debug, Serialize)]
pub struct PredictiveView {
    pub y: Vec<f64>,
    pub mean_density: Vec<f64>,
    pub aoi_density: Vec<f64>,
    pub posterior_means: Vec<f64>,
}

fn standard_normals(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed;
    let mut uniform = || {
        state = splitmix64(state);
        ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    };
    (0..n)
        .map(|_| {
            let (u, v) = (uniform(), uniform());
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

/// Mean and AOI predictive densities of a location model with
/// `μ_t ~ N(0, posterior_sd²)` and noise sd `tau`.
pub fn predictive_curves(n_draws: usize, posterior_sd: f64, tau: f64, seed: u64) -> DemoResult<PredictiveView> {
    if n_draws == 0 || n_draws > 20_000 || !(posterior_sd >= 0.0) || !(tau > 0.0) {
        return Err("need 1..=20000 draws, posterior_sd ≥ 0 and tau > 0".into());
    }
    let mus: Vec<f64> = standard_normals(n_draws, seed).iter().map(|z| z * posterior_sd).collect();
    let params: Vec<Vec<f64>> = mus.iter().map(|&m| vec![0.0, m, 1.0, tau]).collect();
    let draws = PosteriorDraws::from_parameters(ModelKind::SparseLinear, 1, &params).map_err(|e| e.to_string())?;
    let at = draws.at(&[0.0]).map_err(|e| e.to_string())?;
    let half = 4.0 * (tau * tau + posterior_sd * posterior_sd).sqrt();
    let y: Vec<f64> = (0..=200).map(|i| -half + 2.0 * half * i as f64 / 200.0).collect();
    let (mut mean_density, mut aoi_density) = (Vec::new(), Vec::new());
    for &v in &y {
        let l = at.log_lik(v);
        mean_density.push(mean_log_predictive(&l).exp());
        aoi_density.push(aoi_log_predictive(&l).exp());
    }
    Ok(PredictiveView {
        y,
        mean_density,
        aoi_density,
        posterior_means: mus,
    })
}

#[wasm_bindgen]
pub fn predictive_curves_json(n_draws: usize, posterior_sd: f64, tau: f64, seed: u32) -> String {
    to_json(predictive_curves(n_draws, posterior_sd, tau, u64::from(seed)))
}

#[derive(Debug, Serialize)]
pub struct SizeCurveView {
    pub lambda: Vec<f64>,
    pub size: Vec<f64>,
    pub feasible: Vec<bool>,
    pub prob: Vec<f64>,
    pub lambda_star: Option<f64>,
    pub size_at_star: f64,
    pub fallback: bool,
    pub test_coverage: f64,
    pub test_width: f64,
}

/// BCP on a synthetic one-feature regression: estimated size against λ with
/// the feasibility flag per candidate, plus held-out coverage at `λ*`.
pub fn bcp_size_curve(alpha: f64, beta: f64, c: f64, seed: u64) -> DemoResult<SizeCurveView> {
    let err = |e: bcp_core::Error| e.to_string();
    let data = synthetic_regression(240, &[1.5], 0.8, seed).map_err(err)?;
    let spec = make_split(data.n_rows(), SplitRatios::default(), seed ^ 0x5eed).map_err(err)?;
    let std = fit_standardizer(&data, &spec.train_idx).map_err(err)?;
    let train = std.apply(&data.subset(&spec.train_idx)).map_err(err)?;
    let cal = std.apply(&data.subset(&spec.cal_idx)).map_err(err)?;
    let test = std.apply(&data.subset(&spec.test_idx)).map_err(err)?;
    let mcmc = McmcConfig {
        total_iters: 1500,
        burn_in: 500,
        seed,
        ..McmcConfig::desk()
    };
    let draws = sample_blr(&train, PriorConfigRegression::new(c), mcmc).map_err(err)?;
    let labels = LabelSpace::Grid(label_grid(train.labels(), 60).map_err(err)?);
    let risk = RiskConfig {
        seed,
        ..RiskConfig::new(alpha, beta)
    };
    let opts = BcpOptions {
        grid_size: 80,
        ..BcpOptions::default()
    };
    let sol = bcp_calibrate(&draws, &cal, &labels, &risk, &opts).map_err(err)?;
    let scores = compute_test_scores(&draws, &test, &labels.values(), opts.score_kind).map_err(err)?;
    let (mut covered, mut width) = (0usize, 0.0);
    for (row, &y) in scores.rows().zip(test.labels()) {
        let set = build_set(row, &labels, sol.lambda_star);
        covered += usize::from(set.contains(y));
        width += set.size();
    }
    let n_test = test.n_rows() as f64;
    let finite: Vec<_> = sol.candidate_table.iter().filter(|r| r.lambda.is_finite()).collect();
    Ok(SizeCurveView {
        lambda: finite.iter().map(|r| r.lambda).collect(),
        size: finite.iter().map(|r| r.bq_mean).collect(),
        feasible: finite.iter().map(|r| r.feasible).collect(),
        prob: finite.iter().map(|r| r.prob).collect(),
        lambda_star: sol.lambda_star.is_finite().then_some(sol.lambda_star),
        size_at_star: sol.bq_size_at_star,
        fallback: sol.fallback_used,
        test_coverage: covered as f64 / n_test,
        test_width: width / n_test,
    })
}

#[wasm_bindgen]
pub fn bcp_size_curve_json(alpha: f64, beta: f64, c: f64, seed: u32) -> String {
    to_json(bcp_size_curve(alpha, beta, c, u64::from(seed)))
}
