//! Risk-constrained threshold selection.
//!
//! `λ*` minimises the estimated expected set size over a candidate grid,
//! subject to `P[L⁺(λ) ≤ α] ≥ 1 − β`. Everything that does not depend on
//! `(α, β)` is computed once in [`BcpProblem`], so scanning `β` only re-runs
//! the feasibility checks against the same Dirichlet draws.

use serde::{Deserialize, Serialize};

use crate::conformal::{exact_binary_prob, meets_confidence, LabelSpace, LplusSampler, RiskConfig};
use crate::datasets::Dataset;
use crate::error::{invalid, Result};
use crate::posterior::PosteriorDraws;
use crate::quadrature::{
    candidate_grid, farthest_point_nodes, mc_expected_size, median_pairwise_distance, set_size_per_input,
    BqEstimate, BqRule, GridStrategy, KernelConfig,
};
use crate::scores::{compute_cal_scores, compute_test_scores, ScoreKind, ScoreMatrix};

/// Relative tolerance for size ties and the monotonicity diagnostic.
const SIZE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    #[serde(with = "crate::eval::float_or_inf")]
    pub lambda: f64,
    pub bq_mean: f64,
    pub bq_var: f64,
    pub feasible: bool,
    /// Monte Carlo `P[L⁺ ≤ α]`.
    pub prob: f64,
    pub exact_prob: Option<f64>,
    /// Calibration points with `s_i > λ`.
    pub losses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcpSolution {
    #[serde(with = "crate::eval::float_or_inf")]
    pub lambda_star: f64,
    pub bq_size_at_star: f64,
    pub feasibility_prob: f64,
    pub candidate_table: Vec<CandidateRow>,
    pub fallback_used: bool,
    /// Estimated sizes decrease somewhere along the grid.
    pub nonmonotone_sizes: bool,
    /// `λ*` equals the smallest feasible candidate (always expected when the
    /// sizes are monotone).
    pub agrees_with_scan: bool,
}

fn same_size(a: f64, b: f64) -> bool {
    (a - b).abs() <= SIZE_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Choose `λ*` from a filled candidate table (sorted by `λ`, ending in the
/// `+∞` sentinel).
pub fn select_from_table(candidate_table: Vec<CandidateRow>) -> Result<BcpSolution> {
    let Some(last) = candidate_table.last() else {
        return Err(invalid("empty candidate grid"));
    };
    if last.lambda != f64::INFINITY {
        return Err(invalid("candidate grid must end with the +inf sentinel"));
    }
    if candidate_table.windows(2).any(|w| w[0].lambda > w[1].lambda) {
        return Err(invalid("candidate grid must be sorted"));
    }
    let nonmonotone_sizes = candidate_table
        .windows(2)
        .any(|w| w[1].bq_mean < w[0].bq_mean && !same_size(w[0].bq_mean, w[1].bq_mean));

    let mut best: Option<usize> = None;
    for (i, row) in candidate_table.iter().enumerate() {
        if !row.feasible {
            continue;
        }
        match best {
            Some(b) if row.bq_mean >= candidate_table[b].bq_mean || same_size(row.bq_mean, candidate_table[b].bq_mean) => {}
            _ => best = Some(i),
        }
    }
    let first_feasible = candidate_table.iter().position(|r| r.feasible);
    let (star, fallback_used) = match best {
        Some(i) => (i, false),
        None => (candidate_table.len() - 1, true),
    };
    let row = candidate_table[star];
    Ok(BcpSolution {
        lambda_star: row.lambda,
        bq_size_at_star: row.bq_mean,
        feasibility_prob: row.prob,
        agrees_with_scan: first_feasible.is_none_or(|f| f == star),
        candidate_table,
        fallback_used,
        nonmonotone_sizes,
    })
}

/// Build the candidate table from per-`λ` size estimates and losses, using
/// one set of Dirichlet draws for every candidate.
pub fn select_lambda(
    lambda_grid: &[f64],
    bq: &[BqEstimate],
    losses_per_lambda: &[Vec<f64>],
    risk: &RiskConfig,
) -> Result<BcpSolution> {
    risk.validate()?;
    if lambda_grid.len() != bq.len() || lambda_grid.len() != losses_per_lambda.len() {
        return Err(invalid("candidate grid, estimates and losses must align"));
    }
    let n = losses_per_lambda.first().map_or(0, Vec::len);
    let sampler = LplusSampler::new(n, risk.dirichlet_draws, risk.seed)?;
    let rows = lambda_grid
        .iter()
        .zip(bq)
        .zip(losses_per_lambda)
        .map(|((&lambda, est), losses)| {
            let f = crate::conformal::crc_feasible_with(&sampler, losses, risk)?;
            Ok(CandidateRow {
                lambda,
                bq_mean: est.mean,
                bq_var: est.variance,
                feasible: f.feasible,
                prob: f.prob,
                exact_prob: f.exact_prob,
                losses: losses.iter().filter(|&&l| l > 0.0).count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    select_from_table(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcpOptions {
    /// Score used for test points and for the size curve.
    pub score_kind: ScoreKind,
    /// Score used for calibration points; differs from `score_kind` only in
    /// the asymmetric variant.
    pub calibration_kind: ScoreKind,
    pub grid_strategy: GridStrategy,
    pub grid_size: usize,
    pub max_nodes: usize,
    /// Overrides the median-heuristic lengthscale and jitter when set.
    pub kernel: Option<KernelConfig>,
    /// Replace BQ by the plain Monte Carlo mean over all evaluation inputs.
    pub use_mc: bool,
}

impl Default for BcpOptions {
    fn default() -> Self {
        Self {
            score_kind: ScoreKind::AoiNeglog,
            calibration_kind: ScoreKind::AoiNeglog,
            grid_strategy: GridStrategy::ScoreQuantiles,
            grid_size: 200,
            max_nodes: 64,
            kernel: None,
            use_mc: false,
        }
    }
}

impl BcpOptions {
    pub fn asymmetric() -> Self {
        Self {
            calibration_kind: ScoreKind::MeanNeglog,
            ..Self::default()
        }
    }
}

/// The `(α, β)`-independent part of BCP calibration.
#[derive(Debug, Clone)]
pub struct BcpProblem {
    pub lambda_grid: Vec<f64>,
    pub estimates: Vec<BqEstimate>,
    /// Number of calibration losses equal to one, per candidate.
    pub ones: Vec<usize>,
    pub n_cal: usize,
    sampler: LplusSampler,
}

impl BcpProblem {
    /// From calibration scores and the score matrix of the evaluation inputs
    /// (whose empirical distribution defines the expectation over `X`).
    pub fn from_scores(
        cal_scores: &[f64],
        eval_inputs: &Dataset,
        eval_scores: &ScoreMatrix,
        labels: &LabelSpace,
        dirichlet_draws: usize,
        seed: u64,
        opts: &BcpOptions,
    ) -> Result<Self> {
        if eval_scores.n_rows() != eval_inputs.n_rows() {
            return Err(invalid("score matrix rows must match the evaluation inputs"));
        }
        let lambda_grid = candidate_grid(cal_scores, opts.grid_strategy, opts.grid_size)?;
        let curve = set_size_per_input(eval_scores, labels, &lambda_grid)?;
        let estimates = if opts.use_mc {
            (0..lambda_grid.len())
                .map(|j| {
                    Ok(BqEstimate {
                        mean: mc_expected_size(&curve.column(j))?,
                        variance: 0.0,
                        n_nodes: curve.n_inputs(),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            let inputs: Vec<&[f64]> = eval_inputs.rows().collect();
            let nodes = farthest_point_nodes(&inputs, opts.max_nodes.min(inputs.len()));
            let (lengthscale, jitter) = match opts.kernel {
                Some(k) => (k.lengthscale, k.jitter),
                None => (median_pairwise_distance(&inputs), 1e-8),
            };
            let rule = BqRule::new(&inputs, &nodes, lengthscale, jitter)?;
            let fixed_var = opts.kernel.map(|k| k.signal_var);
            (0..lambda_grid.len())
                .map(|j| rule.integrate(&curve.column(j), fixed_var))
                .collect()
        };
        let mut sorted = cal_scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let ones = lambda_grid
            .iter()
            .map(|&l| sorted.len() - sorted.partition_point(|&s| s <= l))
            .collect();
        Ok(Self {
            lambda_grid,
            estimates,
            ones,
            n_cal: cal_scores.len(),
            sampler: LplusSampler::new(cal_scores.len(), dirichlet_draws, seed)?,
        })
    }

    pub fn solve(&self, risk: &RiskConfig) -> Result<BcpSolution> {
        risk.validate()?;
        let rows = self
            .lambda_grid
            .iter()
            .zip(&self.estimates)
            .zip(&self.ones)
            .map(|((&lambda, est), &ones)| {
                let prob = self.sampler.binary_prob_below(ones, risk.loss_bound, risk.alpha);
                CandidateRow {
                    lambda,
                    bq_mean: est.mean,
                    bq_var: est.variance,
                    feasible: meets_confidence(prob, self.sampler.n_draws(), risk.beta),
                    prob,
                    exact_prob: (risk.loss_bound == 1.0).then(|| exact_binary_prob(ones, self.n_cal, risk.alpha)),
                    losses: ones,
                }
            })
            .collect();
        select_from_table(rows)
    }
}

/// End-to-end BCP calibration: scores, candidate grid, BQ set-size curve,
/// `L⁺` feasibility and selection. The expectation over inputs uses the
/// calibration inputs.
pub fn bcp_calibrate(
    draws: &PosteriorDraws,
    cal: &Dataset,
    labels: &LabelSpace,
    risk: &RiskConfig,
    opts: &BcpOptions,
) -> Result<BcpSolution> {
    risk.validate()?;
    let cal_scores = compute_cal_scores(draws, cal, opts.calibration_kind)?;
    let eval_scores = compute_test_scores(draws, cal, &labels.values(), opts.score_kind)?;
    BcpProblem::from_scores(&cal_scores, cal, &eval_scores, labels, risk.dirichlet_draws, risk.seed, opts)?.solve(risk)
}
