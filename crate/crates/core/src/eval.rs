//! Multi-split experiment harness, posterior-averaged risk and reports.
//!
//! Every split draws its randomness from `derive_seed(master, split)`, so a
//! single split can be rerun in isolation with [`run_split`] and reproduces
//! its record exactly. Splits run concurrently; aggregation folds the
//! records in split order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::{bci_classification_set, bci_regression_interval, lasso_default, msp_rank, ResidualConformal};
use crate::conformal::{build_set, split_threshold, CbCalibration, LabelSpace, PredictionSet, RiskConfig};
use crate::datasets::{fit_standardizer, label_grid, load_csv, make_split, Dataset, SplitRatios, TaskKind};
use crate::error::{invalid, Error, Result};
use crate::optimizer::{BcpOptions, BcpProblem};
use crate::posterior::{
    sample_blogistic, sample_blr, McmcConfig, ModelKind, PosteriorDraws, PriorConfigLogistic, PriorConfigRegression,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scores::{compute_cal_scores, compute_test_scores, mean_log_predictive, ScoreKind, Scorer};

/// Serialise `f64` with non-finite values as the strings `"inf"`, `"-inf"`
/// and `"nan"` (JSON has no literal for them).
pub mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub(crate) fn encode(v: f64) -> Result<f64, String> {
        if v.is_finite() {
            Ok(v)
        } else if v.is_nan() {
            Err("nan".into())
        } else if v > 0.0 {
            Err("inf".into())
        } else {
            Err("-inf".into())
        }
    }

    fn decode<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("expected a number or inf/-inf/nan, got {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match encode(*v) {
            Ok(x) => Repr::Num(x),
            Err(t) => Repr::Text(t),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(Repr::deserialize(d)?)
    }

    pub(crate) fn deserialize_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(decode).collect()
    }

    pub(crate) fn serialize_many<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let reprs: Vec<Repr> = v
            .iter()
            .map(|&x| match encode(x) {
                Ok(x) => Repr::Num(x),
                Err(t) => Repr::Text(t),
            })
            .collect();
        reprs.serialize(s)
    }
}

/// [`float_or_inf`] for vectors.
pub mod float_vec_or_inf {
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        super::float_or_inf::serialize_many(v, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        super::float_or_inf::deserialize_many(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SplitCp,
    Bci,
    Cb,
    Bcp,
    Msp,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::SplitCp, Method::Bci, Method::Cb, Method::Bcp, Method::Msp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SplitCp => "split_cp",
            Method::Bci => "bci",
            Method::Cb => "cb",
            Method::Bcp => "bcp",
            Method::Msp => "msp",
        }
    }

    /// Whether the method depends on the posterior (and hence on `c`).
    fn is_bayesian(self) -> bool {
        !matches!(self, Method::SplitCp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim().to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| invalid(format!("unknown method {s:?} (expected split_cp, bci, cb, bcp or msp)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 10 splits, 2000 iterations.
    Desk,
    /// 50 splits, 8000 iterations.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(invalid(format!("unknown profile {s:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub task: TaskKind,
    pub methods: Vec<Method>,
    pub n_splits: usize,
    pub ratios: SplitRatios,
    pub alpha: f64,
    /// Confidence levels for BCP; the first is the headline setting.
    pub betas: Vec<f64>,
    /// Half-normal noise scales `c` for the regression prior.
    pub prior_scales: Vec<f64>,
    pub logistic_weight_sd: f64,
    pub mcmc: McmcConfig,
    /// Number of regression label-grid points `K`.
    pub grid_size: usize,
    /// Number of `λ` candidates for BCP.
    pub lambda_grid_size: usize,
    pub dirichlet_draws: usize,
    pub bq_max_nodes: usize,
    pub use_mc: bool,
    pub asymmetric_scores: bool,
    pub hpd: bool,
    pub bci_samples_per_draw: usize,
    /// Posterior draws kept (evenly thinned) for CB, whose cost grows with
    /// `n_cal · T` per candidate label.
    pub cb_max_draws: usize,
    pub lasso_penalty: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data/diabetes.csv"),
            task: TaskKind::Regression,
            methods: vec![Method::SplitCp, Method::Bci, Method::Bcp],
            n_splits: 10,
            ratios: SplitRatios::default(),
            alpha: 0.2,
            betas: vec![0.6],
            prior_scales: vec![1.0, 0.02],
            logistic_weight_sd: 1.0,
            mcmc: McmcConfig::desk(),
            grid_size: 100,
            lambda_grid_size: 200,
            dirichlet_draws: 2000,
            bq_max_nodes: 64,
            use_mc: false,
            asymmetric_scores: false,
            hpd: false,
            bci_samples_per_draw: 1,
            cb_max_draws: 500,
            lasso_penalty: 0.004,
            seed: 20240601,
        }
    }
}

impl ExperimentConfig {
    pub fn with_profile(mut self, profile: Profile) -> Self {
        match profile {
            Profile::Desk => {
                self.n_splits = 10;
                self.mcmc = McmcConfig { seed: self.mcmc.seed, ..McmcConfig::desk() };
            }
            Profile::Paper => {
                self.n_splits = 50;
                self.mcmc = McmcConfig { seed: self.mcmc.seed, ..McmcConfig::default() };
            }
        }
        self
    }

    /// Defaults for the classification experiment.
    pub fn classification(data: impl Into<PathBuf>) -> Self {
        Self {
            data: data.into(),
            task: TaskKind::Classification,
            methods: vec![Method::SplitCp, Method::Bci, Method::Cb, Method::Bcp, Method::Msp],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(invalid("n_splits must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(invalid("at least one method is required"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha must lie in (0, 1)"));
        }
        if self.methods.contains(&Method::Bcp) && self.betas.is_empty() {
            return Err(invalid("BCP needs at least one beta"));
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(invalid("beta values must lie in (0, 1)"));
        }
        if self.task == TaskKind::Regression
            && (self.prior_scales.is_empty() || self.prior_scales.iter().any(|c| !(*c > 0.0)))
        {
            return Err(invalid("prior scales must be a non-empty list of positive values"));
        }
        if self.task == TaskKind::Regression && self.grid_size < 2 {
            return Err(invalid("grid_size must be at least 2"));
        }
        if self.bci_samples_per_draw == 0 || self.cb_max_draws == 0 || self.dirichlet_draws == 0 {
            return Err(invalid("sample budgets must be positive"));
        }
        Ok(())
    }

    /// Seed of split `idx`.
    pub fn split_seed(&self, idx: usize) -> u64 {
        derive_seed(self.seed, idx as u64)
    }
}

/// One method under one setting on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: Method,
    /// Prior scale for Bayesian regression methods.
    pub c: Option<f64>,
    pub beta: Option<f64>,
    pub n_test: usize,
    pub n_covered: usize,
    pub coverage: f64,
    /// Mean interval width or set cardinality over test rows.
    pub size: f64,
    pub empty_sets: usize,
    /// Calibrated threshold (`nan` for methods without one).
    #[serde(with = "float_or_inf")]
    pub lambda: f64,
    pub fallback: bool,
    /// Calibration points outside the set at the chosen threshold.
    pub cal_misses: Option<usize>,
    pub calib_time_s: f64,
    pub pred_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub split: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    /// Sampler acceptance rate per posterior fitted on this split.
    pub acceptance_rates: Vec<f64>,
    pub records: Vec<MethodRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub c: Option<f64>,
    pub beta: Option<f64>,
    pub n_splits: usize,
    pub coverage_mean: f64,
    pub coverage_sd: f64,
    pub coverage_se: f64,
    pub size_mean: f64,
    pub size_sd: f64,
    pub miscoverage: f64,
    /// `α − miscoverage`.
    pub gap: f64,
    pub fallback_count: usize,
    pub calib_time_mean_s: f64,
    pub pred_time_mean_s: f64,
}

/// Full experiment output; also the JSON report layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub config: ExperimentConfig,
    pub per_split: Vec<SplitRecord>,
    pub summary: Vec<SummaryRow>,
    pub versions: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
}

impl MetricsSummary {
    pub fn row(&self, method: Method, c: Option<f64>, beta: Option<f64>) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.c == c && r.beta == beta)
    }

    /// Copy with every wall-clock field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for rec in out.per_split.iter_mut().flat_map(|s| s.records.iter_mut()) {
            rec.calib_time_s = 0.0;
            rec.pred_time_s = 0.0;
        }
        for row in &mut out.summary {
            row.calib_time_mean_s = 0.0;
            row.pred_time_mean_s = 0.0;
        }
        out
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Group records by `(method, c, β)` in first-appearance order.
pub fn aggregate(per_split: &[SplitRecord], alpha: f64) -> Vec<SummaryRow> {
    let mut keys: Vec<(Method, Option<f64>, Option<f64>)> = Vec::new();
    for r in per_split.iter().flat_map(|s| &s.records) {
        let k = (r.method, r.c, r.beta);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, c, beta)| {
            let recs: Vec<&MethodRecord> = per_split
                .iter()
                .flat_map(|s| &s.records)
                .filter(|r| r.method == method && r.c == c && r.beta == beta)
                .collect();
            let cov: Vec<f64> = recs.iter().map(|r| r.coverage).collect();
            let size: Vec<f64> = recs.iter().map(|r| r.size).collect();
            let (coverage_mean, coverage_sd) = mean_sd(&cov);
            let (size_mean, size_sd) = mean_sd(&size);
            let n = recs.len() as f64;
            SummaryRow {
                method,
                c,
                beta,
                n_splits: recs.len(),
                coverage_mean,
                coverage_sd,
                coverage_se: coverage_sd / n.sqrt(),
                size_mean,
                size_sd,
                miscoverage: 1.0 - coverage_mean,
                gap: alpha - (1.0 - coverage_mean),
                fallback_count: recs.iter().filter(|r| r.fallback).count(),
                calib_time_mean_s: recs.iter().map(|r| r.calib_time_s).sum::<f64>() / n,
                pred_time_mean_s: recs.iter().map(|r| r.pred_time_s).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Train/calibration/test parts of one standardised split.
struct SplitData {
    train: Dataset,
    cal: Dataset,
    test: Dataset,
}

fn prepare_split(data: &Dataset, config: &ExperimentConfig, seed: u64) -> Result<SplitData> {
    let spec = make_split(data.n_rows(), config.ratios, derive_seed(seed, 0))?;
    let std = fit_standardizer(data, &spec.train_idx)?;
    Ok(SplitData {
        train: std.apply(&data.subset(&spec.train_idx))?,
        cal: std.apply(&data.subset(&spec.cal_idx))?,
        test: std.apply(&data.subset(&spec.test_idx))?,
    })
}

/// Coverage and size bookkeeping over test rows.
struct Tally {
    covered: usize,
    size: f64,
    empty: usize,
    n: usize,
}

impl Tally {
    fn new() -> Self {
        Self { covered: 0, size: 0.0, empty: 0, n: 0 }
    }

    fn add(&mut self, set: &PredictionSet, y: f64) {
        self.covered += usize::from(set.contains(y));
        self.size += set.size();
        self.empty += usize::from(set.is_empty());
        self.n += 1;
    }

    fn finish(self, method: Method, c: Option<f64>, beta: Option<f64>, lambda: f64, fallback: bool) -> MethodRecord {
        MethodRecord {
            method,
            c,
            beta,
            n_test: self.n,
            n_covered: self.covered,
            coverage: self.covered as f64 / self.n as f64,
            size: self.size / self.n as f64,
            empty_sets: self.empty,
            lambda,
            fallback,
            cal_misses: None,
            calib_time_s: 0.0,
            pred_time_s: 0.0,
        }
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Keep at most `max` draws, evenly spaced.
pub fn thin_draws(draws: &PosteriorDraws, max: usize) -> Result<PosteriorDraws> {
    let t = draws.n_draws();
    if t <= max {
        return Ok(draws.clone());
    }
    let params: Vec<Vec<f64>> = (0..max).map(|i| draws.draw(i * t / max).to_vec()).collect();
    PosteriorDraws::from_parameters(draws.model, draws.n_features(), &params)
}

/// BCP rows (one per β) from a single precomputed problem.
fn bcp_records(
    config: &ExperimentConfig,
    draws: &PosteriorDraws,
    parts: &SplitData,
    labels: &LabelSpace,
    c: Option<f64>,
    seed: u64,
) -> Result<Vec<MethodRecord>> {
    let opts = BcpOptions {
        grid_size: config.lambda_grid_size,
        max_nodes: config.bq_max_nodes,
        use_mc: config.use_mc,
        ..if config.asymmetric_scores { BcpOptions::asymmetric() } else { BcpOptions::default() }
    };
    let (problem, setup_time) = timed(|| {
        let cal_scores = compute_cal_scores(draws, &parts.cal, opts.calibration_kind)?;
        let eval_scores = compute_test_scores(draws, &parts.cal, &labels.values(), opts.score_kind)?;
        BcpProblem::from_scores(&cal_scores, &parts.cal, &eval_scores, labels, config.dirichlet_draws, seed, &opts)
    })?;
    let (test_scores, score_time) = timed(|| compute_test_scores(draws, &parts.test, &labels.values(), opts.score_kind))?;
    config
        .betas
        .iter()
        .map(|&beta| {
            let risk = RiskConfig {
                dirichlet_draws: config.dirichlet_draws,
                seed,
                ..RiskConfig::new(config.alpha, beta)
            };
            let (sol, solve_time) = timed(|| problem.solve(&risk))?;
            let start = Instant::now();
            let mut tally = Tally::new();
            for (row, &y) in test_scores.rows().zip(parts.test.labels()) {
                tally.add(&build_set(row, labels, sol.lambda_star), y);
            }
            let mut rec = tally.finish(Method::Bcp, c, Some(beta), sol.lambda_star, sol.fallback_used);
            rec.cal_misses = sol.candidate_table.iter().find(|r| r.lambda == sol.lambda_star).map(|r| r.losses);
            rec.calib_time_s = setup_time + solve_time;
            rec.pred_time_s = score_time + start.elapsed().as_secs_f64();
            Ok(rec)
        })
        .collect()
}

fn cb_record(
    config: &ExperimentConfig,
    draws: &PosteriorDraws,
    parts: &SplitData,
    labels: &LabelSpace,
    c: Option<f64>,
) -> Result<MethodRecord> {
    let thinned = thin_draws(draws, config.cb_max_draws)?;
    let (cb, calib) = timed(|| CbCalibration::new(&thinned, &parts.cal))?;
    let (tally, pred) = timed(|| {
        let mut tally = Tally::new();
        for (x, &y) in parts.test.rows().zip(parts.test.labels()) {
            tally.add(&cb.predict(x, labels, config.alpha)?.set, y);
        }
        Ok(tally)
    })?;
    let mut rec = tally.finish(Method::Cb, c, None, f64::NAN, false);
    rec.calib_time_s = calib;
    rec.pred_time_s = pred;
    Ok(rec)
}

fn regression_split(config: &ExperimentConfig, data: &Dataset, split: usize) -> Result<SplitRecord> {
    let seed = config.split_seed(split);
    let parts = prepare_split(data, config, seed)?;
    let labels = LabelSpace::Grid(label_grid(parts.train.labels(), config.grid_size)?);
    let mut records = Vec::new();
    let mut acceptance_rates = Vec::new();

    if config.methods.contains(&Method::SplitCp) {
        let (cp, calib) = timed(|| {
            let model = lasso_default(&parts.train, config.lasso_penalty)?;
            let threshold = ResidualConformal::calibrate(&model, &parts.cal, config.alpha)?.threshold;
            Ok((model, threshold))
        })?;
        let (model, threshold) = cp;
        let cp = ResidualConformal { model: &model, threshold };
        let start = Instant::now();
        let mut tally = Tally::new();
        for (x, &y) in parts.test.rows().zip(parts.test.labels()) {
            tally.add(&cp.predict(x), y);
        }
        let mut rec = tally.finish(Method::SplitCp, None, None, threshold.lambda, !threshold.feasible);
        rec.calib_time_s = calib;
        rec.pred_time_s = start.elapsed().as_secs_f64();
        records.push(rec);
    }

    if config.methods.iter().any(|m| m.is_bayesian()) {
        for (ci, &c) in config.prior_scales.iter().enumerate() {
            let chain_seed = derive_seed(seed, 10 + ci as u64);
            let draws = sample_blr(&parts.train, PriorConfigRegression::new(c), config.mcmc.with_seed(chain_seed))?;
            acceptance_rates.push(draws.acceptance_rate);
            for &method in &config.methods {
                match method {
                    Method::SplitCp => {}
                    Method::Bci => {
                        let (tally, pred) = timed(|| {
                            let mut tally = Tally::new();
                            for (i, (x, &y)) in parts.test.rows().zip(parts.test.labels()).enumerate() {
                                let s = derive_seed(derive_seed(seed, 20 + ci as u64), i as u64);
                                let set = bci_regression_interval(
                                    &draws,
                                    x,
                                    config.alpha,
                                    config.bci_samples_per_draw,
                                    s,
                                    config.hpd,
                                )?;
                                tally.add(&set, y);
                            }
                            Ok(tally)
                        })?;
                        let mut rec = tally.finish(Method::Bci, Some(c), None, f64::NAN, false);
                        rec.pred_time_s = pred;
                        records.push(rec);
                    }
                    Method::Cb => records.push(cb_record(config, &draws, &parts, &labels, Some(c))?),
                    Method::Bcp => records.extend(bcp_records(
                        config,
                        &draws,
                        &parts,
                        &labels,
                        Some(c),
                        derive_seed(seed, 30 + ci as u64),
                    )?),
                    Method::Msp => return Err(invalid("msp is a classification method")),
                }
            }
        }
    }
    Ok(SplitRecord {
        split,
        seed,
        n_train: parts.train.n_rows(),
        n_cal: parts.cal.n_rows(),
        n_test: parts.test.n_rows(),
        acceptance_rates,
        records,
    })
}

/// Predictive mean of label 1 at `x`.
fn mean_prob_one(draws: &PosteriorDraws, x: &[f64]) -> Result<f64> {
    Ok(mean_log_predictive(&draws.at(x)?.log_lik(1.0)).exp())
}

fn classification_split(config: &ExperimentConfig, data: &Dataset, split: usize) -> Result<SplitRecord> {
    let seed = config.split_seed(split);
    let parts = prepare_split(data, config, seed)?;
    let labels = LabelSpace::Binary;
    let draws = sample_blogistic(
        &parts.train,
        PriorConfigLogistic { weight_sd: config.logistic_weight_sd },
        config.mcmc.with_seed(derive_seed(seed, 10)),
    )?;
    let mut records = Vec::new();
    for &method in &config.methods {
        match method {
            Method::SplitCp => {
                let (threshold, calib) =
                    timed(|| split_threshold(&compute_cal_scores(&draws, &parts.cal, ScoreKind::MeanNeglog)?, config.alpha))?;
                let (tally, pred) = timed(|| {
                    let scores = compute_test_scores(&draws, &parts.test, &labels.values(), ScoreKind::MeanNeglog)?;
                    let mut tally = Tally::new();
                    for (row, &y) in scores.rows().zip(parts.test.labels()) {
                        tally.add(&build_set(row, &labels, threshold.lambda), y);
                    }
                    Ok(tally)
                })?;
                let mut rec = tally.finish(method, None, None, threshold.lambda, !threshold.feasible);
                rec.calib_time_s = calib;
                rec.pred_time_s = pred;
                records.push(rec);
            }
            Method::Msp => {
                // Score 1 − p̄(y | x); sets keep labels in MSP rank order.
                let cal_p: Vec<f64> = parts
                    .cal
                    .rows()
                    .zip(parts.cal.labels())
                    .map(|(x, &y)| mean_prob_one(&draws, x).map(|p1| if y == 1.0 { p1 } else { 1.0 - p1 }))
                    .collect::<Result<_>>()?;
                let (threshold, calib) =
                    timed(|| split_threshold(&cal_p.iter().map(|p| 1.0 - p).collect::<Vec<_>>(), config.alpha))?;
                let (tally, pred) = timed(|| {
                    let mut tally = Tally::new();
                    for (x, &y) in parts.test.rows().zip(parts.test.labels()) {
                        let p1 = mean_prob_one(&draws, x)?;
                        let mut included: Vec<usize> = msp_rank(&[1.0 - p1, p1])?
                            .into_iter()
                            .take_while(|&(_, p)| 1.0 - p <= threshold.lambda)
                            .map(|(label, _)| label)
                            .collect();
                        included.sort_unstable();
                        tally.add(&labels.set_from_indices(included), y);
                    }
                    Ok(tally)
                })?;
                let mut rec = tally.finish(method, None, None, threshold.lambda, !threshold.feasible);
                rec.calib_time_s = calib;
                rec.pred_time_s = pred;
                records.push(rec);
            }
            Method::Bci => {
                let (tally, pred) = timed(|| {
                    let mut tally = Tally::new();
                    for (x, &y) in parts.test.rows().zip(parts.test.labels()) {
                        tally.add(&bci_classification_set(mean_prob_one(&draws, x)?, config.alpha), y);
                    }
                    Ok(tally)
                })?;
                let mut rec = tally.finish(method, None, None, f64::NAN, false);
                rec.pred_time_s = pred;
                records.push(rec);
            }
            Method::Cb => records.push(cb_record(config, &draws, &parts, &labels, None)?),
            Method::Bcp => {
                records.extend(bcp_records(config, &draws, &parts, &labels, None, derive_seed(seed, 30))?)
            }
        }
    }
    Ok(SplitRecord {
        split,
        seed,
        n_train: parts.train.n_rows(),
        n_cal: parts.cal.n_rows(),
        n_test: parts.test.n_rows(),
        acceptance_rates: vec![draws.acceptance_rate],
        records,
    })
}

/// Run split `split` alone; identical to its record inside a full run.
pub fn run_split(config: &ExperimentConfig, data: &Dataset, split: usize) -> Result<SplitRecord> {
    let out = match data.task {
        TaskKind::Regression => regression_split(config, data, split),
        TaskKind::Classification => classification_split(config, data, split),
    };
    out.map_err(|e| Error::Split {
        split,
        seed: config.split_seed(split),
        source: Box::new(e),
    })
}

/// Run every split of `config` on an already loaded dataset.
pub fn run_on_dataset(config: &ExperimentConfig, data: &Dataset) -> Result<MetricsSummary> {
    config.validate()?;
    if data.task != config.task {
        return Err(invalid("dataset task does not match the configured task"));
    }
    let splits: Vec<usize> = (0..config.n_splits).collect();
    #[cfg(feature = "parallel")]
    let results: Vec<Result<SplitRecord>> = {
        use rayon::prelude::*;
        splits.par_iter().map(|&s| run_split(config, data, s)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<SplitRecord>> = splits.iter().map(|&s| run_split(config, data, s)).collect();
    let per_split = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricsSummary {
        config: config.clone(),
        summary: aggregate(&per_split, config.alpha),
        seeds: per_split.iter().map(|s| s.seed).collect(),
        per_split,
        versions: BTreeMap::from([("bcp_core".to_owned(), env!("CARGO_PKG_VERSION").to_owned())]),
    })
}

pub fn run_regression_experiment(config: &ExperimentConfig) -> Result<MetricsSummary> {
    if config.task != TaskKind::Regression {
        return Err(invalid("regression experiment needs task = regression"));
    }
    run_on_dataset(config, &load_csv(&config.data, TaskKind::Regression)?)
}

pub fn run_classification_experiment(config: &ExperimentConfig) -> Result<MetricsSummary> {
    if config.task != TaskKind::Classification {
        return Err(invalid("classification experiment needs task = classification"));
    }
    run_on_dataset(config, &load_csv(&config.data, TaskKind::Classification)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaScanRow {
    pub beta: f64,
    pub coverage_mean: f64,
    pub coverage_sd: f64,
    pub coverage_se: f64,
    pub width_mean: f64,
    pub width_sd: f64,
    pub miscoverage: f64,
    pub gap: f64,
}

/// BCP rows of a finished run for the first prior scale, one per β.
pub fn beta_table(summary: &MetricsSummary) -> Vec<BetaScanRow> {
    let c = summary.config.prior_scales.first().copied();
    summary
        .config
        .betas
        .iter()
        .filter_map(|&b| summary.row(Method::Bcp, c, Some(b)))
        .map(|r| BetaScanRow {
            beta: r.beta.unwrap_or(f64::NAN),
            coverage_mean: r.coverage_mean,
            coverage_sd: r.coverage_sd,
            coverage_se: r.coverage_se,
            width_mean: r.size_mean,
            width_sd: r.size_sd,
            miscoverage: r.miscoverage,
            gap: r.gap,
        })
        .collect()
}

/// CSV of a β scan, one row per β.
pub fn beta_table_csv(rows: &[BetaScanRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["beta", "coverage_mean", "coverage_sd", "width_mean", "width_sd", "miscoverage", "gap"])?;
    for r in rows {
        w.write_record([
            r.beta.to_string(),
            format!("{:.4}", round_sig(r.coverage_mean, 4)),
            format!("{:.4}", round_sig(r.coverage_sd, 4)),
            format!("{:.3}", round_sig(r.width_mean, 3)),
            format!("{:.3}", round_sig(r.width_sd, 3)),
            format!("{:.4}", round_sig(r.miscoverage, 4)),
            format!("{:.4}", round_sig(r.gap, 4)),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
}

/// BCP on regression data for every β in `config.betas` under the first
/// prior scale. Posteriors, scores and Dirichlet draws are shared across β.
pub fn beta_scan(config: &ExperimentConfig) -> Result<(MetricsSummary, Vec<BetaScanRow>)> {
    let cfg = ExperimentConfig {
        methods: vec![Method::Bcp],
        prior_scales: config.prior_scales.iter().copied().take(1).collect(),
        ..config.clone()
    };
    let summary = run_regression_experiment(&cfg)?;
    let table = beta_table(&summary);
    Ok((summary, table))
}

/// Monte Carlo estimate of the posterior-averaged miscoverage of
/// `{y : s(x, y) ≤ λ}` under AOI scores: `θ` runs over the draws, `x` is
/// resampled from `eval_inputs`, and `y` is drawn from the model at `(x, θ)`.
pub fn posterior_avg_risk(
    draws: &PosteriorDraws,
    lambda: f64,
    eval_inputs: &Dataset,
    samples_per_draw: usize,
    seed: u64,
) -> Result<f64> {
    if eval_inputs.n_rows() == 0 || samples_per_draw == 0 {
        return Err(invalid("need evaluation inputs and at least one sample per draw"));
    }
    let scorer = Scorer::new(draws, ScoreKind::AoiNeglog)?;
    let mut rng = rng_from_seed(seed);
    let mut misses = 0usize;
    let mut total = 0usize;
    for t in 0..draws.n_draws() {
        for _ in 0..samples_per_draw {
            let x = eval_inputs.row(rng.random_range(0..eval_inputs.n_rows()));
            let eta = draws.linear_predictor(t, x);
            let y = match draws.model {
                ModelKind::SparseLinear => eta + draws.tau(t) * rng.sample::<f64, _>(StandardNormal),
                ModelKind::Logistic => f64::from(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()))),
            };
            misses += usize::from(scorer.score(x, y)? > lambda);
            total += 1;
        }
    }
    Ok(misses as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(invalid(format!("unknown report format {s:?} (expected json or csv)"))),
        }
    }
}

/// Round to `digits` significant digits.
pub fn round_sig(v: f64, digits: usize) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", digits.saturating_sub(1), v).parse().unwrap_or(v)
}

fn sig_digits(key: &str) -> Option<usize> {
    if key.starts_with("coverage") || key == "miscoverage" || key == "gap" {
        Some(4)
    } else if key.starts_with("size") || key.starts_with("width") {
        Some(3)
    } else {
        None
    }
}

/// Summary rows with coverage (4 significant digits) and size (3) rounded.
fn rounded_summary(value: &mut serde_json::Value) {
    if let Some(rows) = value.get_mut("summary").and_then(|v| v.as_array_mut()) {
        for row in rows.iter_mut().filter_map(|r| r.as_object_mut()) {
            for (k, v) in row.iter_mut() {
                if let (Some(d), Some(x)) = (sig_digits(k), v.as_f64()) {
                    *v = serde_json::json!(round_sig(x, d));
                }
            }
        }
    }
}

/// JSON report text: keys sorted, summary metrics rounded.
pub fn report_json(summary: &MetricsSummary) -> Result<String> {
    let mut value = serde_json::to_value(summary)?;
    rounded_summary(&mut value);
    Ok(serde_json::to_string_pretty(&value)? + "\n")
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV report text: one row per (method, c, β).
pub fn report_csv(summary: &MetricsSummary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "c",
        "beta",
        "n_splits",
        "coverage_mean",
        "coverage_sd",
        "size_mean",
        "size_sd",
        "miscoverage",
        "gap",
        "fallback_count",
        "calib_time_mean_s",
        "pred_time_mean_s",
    ])?;
    for r in &summary.summary {
        w.write_record([
            r.method.to_string(),
            opt_cell(r.c),
            opt_cell(r.beta),
            r.n_splits.to_string(),
            format!("{:.4}", round_sig(r.coverage_mean, 4)),
            format!("{:.4}", round_sig(r.coverage_sd, 4)),
            format!("{:.3}", round_sig(r.size_mean, 3)),
            format!("{:.3}", round_sig(r.size_sd, 3)),
            format!("{:.4}", round_sig(r.miscoverage, 4)),
            format!("{:.4}", round_sig(r.gap, 4)),
            r.fallback_count.to_string(),
            format!("{:.6}", r.calib_time_mean_s),
            format!("{:.6}", r.pred_time_mean_s),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
}

pub fn emit_report(summary: &MetricsSummary, format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report_json(summary)?,
        ReportFormat::Csv => report_csv(summary)?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_regression;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            n_splits: 2,
            prior_scales: vec![1.0],
            mcmc: McmcConfig {
                total_iters: 600,
                burn_in: 200,
                ..McmcConfig::desk()
            },
            grid_size: 30,
            lambda_grid_size: 40,
            dirichlet_draws: 500,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn inf_serde_roundtrip() {
        #[derive(Serialize, Deserialize)]
        struct W {
            #[serde(with = "float_or_inf")]
            a: f64,
            #[serde(with = "float_vec_or_inf")]
            b: Vec<f64>,
        }
        let s = serde_json::to_string(&W { a: f64::INFINITY, b: vec![1.5, f64::NEG_INFINITY] }).unwrap();
        assert_eq!(s, r#"{"a":"inf","b":[1.5,"-inf"]}"#);
        let w: W = serde_json::from_str(&s).unwrap();
        assert_eq!((w.a, w.b[0], w.b[1]), (f64::INFINITY, 1.5, f64::NEG_INFINITY));
        assert!(serde_json::from_str::<W>(r#"{"a":"big","b":[]}"#).is_err());
    }

    #[test]
    fn methods_parse() {
        assert_eq!("split-cp".parse::<Method>().unwrap(), Method::SplitCp);
        assert_eq!("BCP".parse::<Method>().unwrap(), Method::Bcp);
        assert!("lasso".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        assert!(ExperimentConfig { methods: vec![], ..Default::default() }.validate().is_err());
        assert!(ExperimentConfig { n_splits: 0, ..Default::default() }.validate().is_err());
        let paper = ExperimentConfig::default().with_profile(Profile::Paper);
        assert_eq!((paper.n_splits, paper.mcmc.total_iters), (50, 8000));
    }

    #[test]
    fn two_test_points_give_discrete_coverage() {
        let data = synthetic_regression(10, &[1.0, 0.5], 0.5, 3).unwrap();
        let cfg = ExperimentConfig {
            n_splits: 1,
            ratios: SplitRatios { train: 0.5, cal: 0.3, test: 0.2 },
            ..tiny_config()
        };
        let s = run_on_dataset(&cfg, &data).unwrap();
        for r in &s.per_split[0].records {
            assert_eq!(r.n_test, 2);
            assert!([0.0, 0.5, 1.0].contains(&r.coverage), "{r:?}");
        }
    }

    #[test]
    fn splits_are_reproducible_in_isolation_and_means_recompute() {
        let data = synthetic_regression(120, &[1.0, -0.5, 0.0], 0.7, 9).unwrap();
        let cfg = tiny_config();
        let full = run_on_dataset(&cfg, &data).unwrap();
        let alone = run_split(&cfg, &data, 1).unwrap();
        let strip = |mut r: SplitRecord| {
            for m in &mut r.records {
                m.calib_time_s = 0.0;
                m.pred_time_s = 0.0;
            }
            r
        };
        // Compare serialised records: `nan` thresholds never compare equal.
        assert_eq!(
            serde_json::to_string(&strip(full.per_split[1].clone())).unwrap(),
            serde_json::to_string(&strip(alone)).unwrap()
        );
        for row in &full.summary {
            let cov: Vec<f64> = full
                .per_split
                .iter()
                .flat_map(|s| &s.records)
                .filter(|r| r.method == row.method && r.c == row.c && r.beta == row.beta)
                .map(|r| r.n_covered as f64 / r.n_test as f64)
                .collect();
            assert_eq!(row.coverage_mean, cov.iter().sum::<f64>() / cov.len() as f64);
        }
        let again = run_on_dataset(&cfg, &data).unwrap();
        assert_eq!(
            report_json(&full.without_timing()).unwrap(),
            report_json(&again.without_timing()).unwrap()
        );
    }

    #[test]
    fn reports_are_byte_stable_and_rounded() {
        let data = synthetic_regression(80, &[1.0], 0.5, 1).unwrap();
        let cfg = ExperimentConfig { n_splits: 1, ..tiny_config() };
        let s = run_on_dataset(&cfg, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        emit_report(&s, ReportFormat::Json, &a).unwrap();
        emit_report(&s, ReportFormat::Json, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
        for key in ["config", "per_split", "summary", "versions", "seeds"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let csv_path = dir.path().join("r.csv");
        emit_report(&s, ReportFormat::Csv, &csv_path).unwrap();
        let text = std::fs::read_to_string(csv_path).unwrap();
        assert_eq!(text.lines().count(), 1 + s.summary.len());
        assert_eq!(round_sig(0.812_345, 4), 0.8123);
        assert_eq!(round_sig(1.9249, 3), 1.92);
    }

    fn one_gaussian() -> PosteriorDraws {
        PosteriorDraws::from_parameters(ModelKind::SparseLinear, 1, &[vec![0.0, 0.0, 1.0, 1.0]]).unwrap()
    }

    #[test]
    fn posterior_avg_risk_edge_cases() {
        let draws = one_gaussian();
        let inputs = Dataset::from_rows(&[vec![0.0], vec![1.0]], vec![0.0, 0.0], TaskKind::Regression).unwrap();
        assert_eq!(posterior_avg_risk(&draws, f64::INFINITY, &inputs, 100, 1).unwrap(), 0.0);
        assert_eq!(posterior_avg_risk(&draws, -1e6, &inputs, 100, 1).unwrap(), 1.0);
    }

    #[test]
    fn posterior_avg_risk_matches_gaussian_tail_mass() {
        // One draw, N(0, 1) predictive: the (10%, 90%) interval is the set
        // {s ≤ −log φ(z_0.9)}; its miscoverage is 0.2.
        let draws = one_gaussian();
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.9);
        let lambda = 0.5 * z * z + 0.5 * (2.0 * std::f64::consts::PI).ln();
        let inputs = Dataset::from_rows(&[vec![0.3], vec![-2.0]], vec![0.0, 0.0], TaskKind::Regression).unwrap();
        let m = 100_000;
        let r = posterior_avg_risk(&draws, lambda, &inputs, m, 4).unwrap();
        let se = (0.2f64 * 0.8 / m as f64).sqrt();
        assert!((r - 0.2).abs() < 3.0 * se, "risk {r}");
    }
}
