//! Split conformal calibration, prediction sets and conformal risk control.
//!
//! Risk control uses the Dirichlet upper-bound statistic
//!
//! ```text
//! L⁺ = Σ_{i=1}^{n} U_i ℓ_(i) + U_{n+1} B,   U ~ Dir(1, …, 1)
//! ```
//!
//! over the sorted calibration losses. A threshold `λ` is feasible when
//! `P[L⁺(λ) ≤ α] ≥ 1 − β`. The Dirichlet draws are sampled once per
//! calibration set ([`LplusSampler`]) and reused for every candidate `λ`, so
//! feasibility is monotone in `λ` and reproducible from the seed.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::datasets::Dataset;
use crate::error::{invalid, Result};
use crate::posterior::{PosteriorDraws, LOG_DENSITY_FLOOR};
use crate::rng::rng_from_seed;
use crate::scores::aoi_log_predictive;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub alpha: f64,
    pub beta: f64,
    pub loss_bound: f64,
    pub dirichlet_draws: usize,
    pub seed: u64,
}

impl RiskConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            loss_bound: 1.0,
            dirichlet_draws: 2000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0 && self.beta > 0.0 && self.beta < 1.0) {
            return Err(invalid("alpha and beta must lie in (0, 1)"));
        }
        if !(self.loss_bound > 0.0) || self.dirichlet_draws == 0 {
            return Err(invalid("loss bound and Dirichlet budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    SplitQuantile,
    CrcLplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    /// May be `+∞` when no finite threshold satisfies the constraint.
    pub lambda: f64,
    pub method: ThresholdMethod,
    pub feasible: bool,
}

/// `⌈(n+1)(1−α)⌉`.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil().max(1.0) as usize
}

/// The `⌈(n+1)(1−α)⌉`-th smallest calibration score, or `+∞` (flagged
/// infeasible) when that rank exceeds `n`.
pub fn split_threshold(cal_scores: &[f64], alpha: f64) -> Result<Threshold> {
    if cal_scores.is_empty() {
        return Err(invalid("no calibration scores"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha must lie in (0, 1)"));
    }
    let k = conformal_rank(cal_scores.len(), alpha);
    if k > cal_scores.len() {
        return Ok(Threshold {
            lambda: f64::INFINITY,
            method: ThresholdMethod::SplitQuantile,
            feasible: false,
        });
    }
    let mut sorted = cal_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Threshold {
        lambda: sorted[k - 1],
        method: ThresholdMethod::SplitQuantile,
        feasible: true,
    })
}

/// Candidate labels a score row is evaluated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum LabelSpace {
    /// Evenly spaced regression grid.
    Grid(Vec<f64>),
    /// Labels `{0, 1}`.
    Binary,
}

impl LabelSpace {
    pub fn values(&self) -> Vec<f64> {
        match self {
            LabelSpace::Grid(g) => g.clone(),
            LabelSpace::Binary => vec![0.0, 1.0],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LabelSpace::Grid(g) => g.len(),
            LabelSpace::Binary => 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> f64 {
        match self {
            LabelSpace::Grid(g) if g.len() >= 2 => g[1] - g[0],
            _ => 1.0,
        }
    }

    /// Size of a set containing `count` candidates: the width
    /// `(count − 1)·spacing` for grids, the cardinality for classes.
    pub fn size_of_count(&self, count: usize) -> f64 {
        match self {
            LabelSpace::Grid(_) => count.saturating_sub(1) as f64 * self.spacing(),
            LabelSpace::Binary => count as f64,
        }
    }

    /// Build a set from the indices of included candidates (ascending).
    pub fn set_from_indices(&self, included: Vec<usize>) -> PredictionSet {
        match self {
            LabelSpace::Grid(g) => PredictionSet::Grid {
                lower: included.first().map(|&i| g[i]),
                upper: included.last().map(|&i| g[i]),
                width: self.size_of_count(included.len()),
                included,
            },
            LabelSpace::Binary => PredictionSet::Labels {
                labels: included.iter().map(|&i| i as u8).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PredictionSet {
    /// Included grid candidates; coverage is judged against `[lower, upper]`.
    Grid {
        included: Vec<usize>,
        lower: Option<f64>,
        upper: Option<f64>,
        width: f64,
    },
    Labels { labels: Vec<u8> },
    Interval { lower: f64, upper: f64 },
}

impl PredictionSet {
    /// Width for intervals, cardinality for label sets.
    pub fn size(&self) -> f64 {
        match self {
            PredictionSet::Grid { width, .. } => *width,
            PredictionSet::Labels { labels } => labels.len() as f64,
            PredictionSet::Interval { lower, upper } => upper - lower,
        }
    }

    pub fn contains(&self, y: f64) -> bool {
        match self {
            PredictionSet::Grid {
                lower: Some(lo),
                upper: Some(hi),
                ..
            } => *lo <= y && y <= *hi,
            PredictionSet::Grid { .. } => false,
            PredictionSet::Labels { labels } => labels.iter().any(|&l| f64::from(l) == y),
            PredictionSet::Interval { lower, upper } => *lower <= y && y <= *upper,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            PredictionSet::Grid { included, .. } => included.is_empty(),
            PredictionSet::Labels { labels } => labels.is_empty(),
            PredictionSet::Interval { .. } => false,
        }
    }
}

/// `{y : s(x, y) ≤ λ}` over the candidate labels.
pub fn build_set(test_score_row: &[f64], labels: &LabelSpace, lambda: f64) -> PredictionSet {
    let included = test_score_row
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= lambda)
        .map(|(i, _)| i)
        .collect();
    labels.set_from_indices(included)
}

/// `ℓ_i = 1{s_i > λ}`.
pub fn miscoverage_losses(cal_scores: &[f64], lambda: f64) -> Vec<f64> {
    cal_scores.iter().map(|&s| f64::from(u8::from(s > lambda))).collect()
}

/// Flat-Dirichlet draws on the `(n+1)`-simplex, shared across thresholds.
#[derive(Debug, Clone)]
pub struct LplusSampler {
    n: usize,
    m: usize,
    /// Row-major `m × (n+1)`.
    u: Vec<f64>,
    /// `tail[m][k] = Σ_{i=n−k+1}^{n} U_i`, the weight on the `k` largest losses.
    tail: Vec<f64>,
    pub seed: u64,
}

impl LplusSampler {
    /// Sample `m` points of `Dir(1, …, 1)` on `n + 1` coordinates as the gaps
    /// between `n` sorted uniforms.
    pub fn new(n: usize, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(invalid("need at least one Dirichlet draw"));
        }
        let mut rng = rng_from_seed(seed);
        let mut u = Vec::with_capacity(m * (n + 1));
        let mut tail = Vec::with_capacity(m * (n + 1));
        let mut cuts = vec![0.0; n];
        for _ in 0..m {
            for c in cuts.iter_mut() {
                *c = rng.random::<f64>();
            }
            cuts.sort_by(f64::total_cmp);
            let start = u.len();
            let mut prev = 0.0;
            for &c in &cuts {
                u.push(c - prev);
                prev = c;
            }
            u.push(1.0 - prev);
            let row = &u[start..];
            let mut acc = 0.0;
            tail.push(0.0);
            for k in 1..=n {
                acc += row[n - k];
                tail.push(acc);
            }
        }
        Ok(Self { n, m, u, tail, seed })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_draws(&self) -> usize {
        self.m
    }

    fn check(&self, losses: &[f64], bound: f64) -> Result<()> {
        if losses.len() != self.n {
            return Err(invalid(format!("expected {} losses, got {}", self.n, losses.len())));
        }
        if losses.iter().any(|&l| !(0.0..=bound).contains(&l)) {
            return Err(invalid("losses must lie in [0, B]"));
        }
        Ok(())
    }

    /// One `L⁺` value per Dirichlet draw.
    pub fn draws(&self, losses: &[f64], bound: f64) -> Result<Vec<f64>> {
        self.check(losses, bound)?;
        let mut sorted = losses.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(self
            .u
            .chunks_exact(self.n + 1)
            .map(|row| row[..self.n].iter().zip(&sorted).map(|(a, b)| a * b).sum::<f64>() + row[self.n] * bound)
            .collect())
    }

    /// `L⁺` draws for binary losses with `ones` losses equal to one.
    pub fn binary_draws(&self, ones: usize, bound: f64) -> Vec<f64> {
        assert!(ones <= self.n);
        (0..self.m)
            .map(|r| self.tail[r * (self.n + 1) + ones] + self.u[r * (self.n + 1) + self.n] * bound)
            .collect()
    }

    pub fn prob_below(&self, losses: &[f64], bound: f64, alpha: f64) -> Result<f64> {
        let draws = self.draws(losses, bound)?;
        Ok(frac_at_most(&draws, alpha))
    }

    pub fn binary_prob_below(&self, ones: usize, bound: f64, alpha: f64) -> f64 {
        frac_at_most(&self.binary_draws(ones, bound), alpha)
    }
}

fn frac_at_most(draws: &[f64], alpha: f64) -> f64 {
    draws.iter().filter(|&&v| v <= alpha).count() as f64 / draws.len() as f64
}

/// `M` draws of `L⁺` for the given losses.
pub fn lplus_draws(losses: &[f64], bound: f64, m: usize, seed: u64) -> Result<Vec<f64>> {
    LplusSampler::new(losses.len(), m, seed)?.draws(losses, bound)
}

/// `P[L⁺ ≤ α]` in closed form for binary losses and `B = 1`: the sum of
/// `k + 1` flat-Dirichlet coordinates out of `n + 1` is `Beta(k+1, n−k)`.
pub fn exact_binary_prob(ones: usize, n: usize, alpha: f64) -> f64 {
    if ones >= n {
        return if alpha >= 1.0 { 1.0 } else { 0.0 };
    }
    Beta::new(ones as f64 + 1.0, (n - ones) as f64)
        .expect("Beta shape parameters are positive")
        .cdf(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// Monte Carlo estimate of `P[L⁺ ≤ α]`.
    pub prob: f64,
    /// Closed-form `P[L⁺ ≤ α]` when losses are binary and `B = 1`.
    pub exact_prob: Option<f64>,
    pub dirichlet_draws: usize,
    pub seed: u64,
}

/// Whether a Monte Carlo estimate of `P[L⁺ ≤ α]` reaches `1 − β`.
pub fn meets_confidence(prob: f64, m: usize, beta: f64) -> bool {
    // Compare counts to avoid 0.9 vs 0.8999999 rounding surprises.
    let hits = (prob * m as f64).round();
    hits >= ((1.0 - beta) * m as f64 - 1e-9).ceil()
}

fn binary_ones(losses: &[f64]) -> Option<usize> {
    losses
        .iter()
        .all(|&l| l == 0.0 || l == 1.0)
        .then(|| losses.iter().filter(|&&l| l == 1.0).count())
}

/// Feasibility check using a shared sampler (common random numbers).
pub fn crc_feasible_with(sampler: &LplusSampler, losses: &[f64], risk: &RiskConfig) -> Result<Feasibility> {
    risk.validate()?;
    let prob = sampler.prob_below(losses, risk.loss_bound, risk.alpha)?;
    let exact_prob = match binary_ones(losses) {
        Some(k) if risk.loss_bound == 1.0 => Some(exact_binary_prob(k, losses.len(), risk.alpha)),
        _ => None,
    };
    Ok(Feasibility {
        feasible: meets_confidence(prob, sampler.n_draws(), risk.beta),
        prob,
        exact_prob,
        dirichlet_draws: sampler.n_draws(),
        seed: sampler.seed,
    })
}

pub fn crc_feasible(losses: &[f64], risk: &RiskConfig) -> Result<Feasibility> {
    let sampler = LplusSampler::new(losses.len(), risk.dirichlet_draws, risk.seed)?;
    crc_feasible_with(&sampler, losses, risk)
}

/// Output of [`cb_full_conformal`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbSet {
    pub set: PredictionSet,
    /// Candidates whose reweighting likelihood vanished for every draw.
    pub excluded: Vec<usize>,
}

/// Conformal-Bayes full conformal prediction by importance reweighting.
///
/// Per-draw calibration likelihoods are cached once; each candidate `(x, y)`
/// then reweights the draws by `f_{θ^(t)}(y | x)` and rescoring all
/// calibration points is a single matrix-vector product.
pub struct CbCalibration<'a> {
    draws: &'a PosteriorDraws,
    n_cal: usize,
    /// Per calibration row: max log-likelihood across draws.
    row_max: Vec<f64>,
    /// Row-major `n_cal × T`: `exp(log f_t(Y_i|X_i) − row_max_i)`.
    scaled: Vec<f64>,
}

impl<'a> CbCalibration<'a> {
    pub fn new(draws: &'a PosteriorDraws, cal: &Dataset) -> Result<Self> {
        if cal.n_rows() == 0 {
            return Err(invalid("calibration set is empty"));
        }
        let t = draws.n_draws();
        let mut row_max = Vec::with_capacity(cal.n_rows());
        let mut scaled = Vec::with_capacity(cal.n_rows() * t);
        for (x, &y) in cal.rows().zip(cal.labels()) {
            let l = draws.at(x)?.log_lik(y);
            let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row_max.push(m);
            scaled.extend(l.iter().map(|v| (v - m).exp()));
        }
        Ok(Self {
            draws,
            n_cal: cal.n_rows(),
            row_max,
            scaled,
        })
    }

    pub fn predict(&self, x: &[f64], labels: &LabelSpace, alpha: f64) -> Result<CbSet> {
        let k = conformal_rank(self.n_cal, alpha);
        let at = self.draws.at(x)?;
        let t = self.draws.n_draws();
        let mut logw = vec![0.0; t];
        let mut w = vec![0.0; t];
        let mut included = Vec::new();
        let mut excluded = Vec::new();
        for (c, y) in labels.values().into_iter().enumerate() {
            at.log_lik_into(y, &mut logw);
            if logw.iter().all(|&l| l <= LOG_DENSITY_FLOOR) {
                excluded.push(c);
                continue;
            }
            if k > self.n_cal {
                included.push(c);
                continue;
            }
            let s_test = -aoi_log_predictive(&logw).max(LOG_DENSITY_FLOOR);
            let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (wi, &l) in w.iter_mut().zip(&logw) {
                *wi = (l - m).exp();
                total += *wi;
            }
            for wi in w.iter_mut() {
                *wi /= total;
            }
            let mut below = 0usize;
            for (row, &rm) in self.scaled.chunks_exact(t).zip(&self.row_max) {
                let p: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
                let s_i = -(rm + p.ln()).max(LOG_DENSITY_FLOOR);
                below += usize::from(s_i < s_test);
            }
            if below < k {
                included.push(c);
            }
        }
        Ok(CbSet {
            set: labels.set_from_indices(included),
            excluded,
        })
    }
}

/// Full-conformal CB set at one test input: candidate `y` is included iff
/// its score ranks within the first `⌈(n+1)(1−α)⌉` of the `n + 1` scores.
pub fn cb_full_conformal(
    draws: &PosteriorDraws,
    cal: &Dataset,
    test_input: &[f64],
    labels: &LabelSpace,
    alpha: f64,
) -> Result<CbSet> {
    CbCalibration::new(draws, cal)?.predict(test_input, labels, alpha)
}
