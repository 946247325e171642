//! Posterior-predictive non-conformity scores.
//!
//! For a candidate `(x, y)` with per-draw likelihoods `f_t = f_{θ^(t)}(y | x)`,
//! add-one-in (AOI) reweighting gives weights `w_t = f_t / Σ f` and the
//! predictive density `Σ w_t f_t = Σ f² / Σ f`. The score is its negative
//! log. Everything is evaluated in log space with log-sum-exp.
//!
//! Calibration and test scores go through the same [`Scorer::score`] call,
//! so the score function is applied identically to both.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{invalid, Error, Result};
use crate::posterior::{PointPredictive, PosteriorDraws, DENSITY_FLOOR, LOG_DENSITY_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoiWeights {
    pub weights: Vec<f64>,
}

fn check_likes(likes: &[f64]) -> Result<f64> {
    if likes.iter().any(|&f| !(f >= 0.0) || !f.is_finite()) {
        return Err(invalid("likelihoods must be finite and non-negative"));
    }
    let total: f64 = likes.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroLikelihood);
    }
    Ok(total)
}

pub fn aoi_weights(likes: &[f64]) -> Result<AoiWeights> {
    let total = check_likes(likes)?;
    Ok(AoiWeights {
        weights: likes.iter().map(|f| f / total).collect(),
    })
}

/// `Σ f² / Σ f`.
pub fn aoi_predictive(likes: &[f64]) -> Result<f64> {
    let total = check_likes(likes)?;
    Ok(likes.iter().map(|f| f * f).sum::<f64>() / total)
}

pub fn mean_predictive(likes: &[f64]) -> Result<f64> {
    if likes.is_empty() {
        return Err(invalid("empty likelihood vector"));
    }
    Ok(likes.iter().sum::<f64>() / likes.len() as f64)
}

/// `-ln(max(density, DENSITY_FLOOR))`.
pub fn neglog_score(density: f64) -> f64 {
    -density.max(DENSITY_FLOOR).ln()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(Σ f² / Σ f)` from log-likelihoods.
pub fn aoi_log_predictive(log_likes: &[f64]) -> f64 {
    // One pass with a shared maximum: ln Σ e^{2l} - ln Σ e^{l}.
    let m = log_likes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut s1, mut s2) = (0.0, 0.0);
    for &l in log_likes {
        let e = (l - m).exp();
        s1 += e;
        s2 += e * e;
    }
    m + s2.ln() - s1.ln()
}

pub fn mean_log_predictive(log_likes: &[f64]) -> f64 {
    log_sum_exp(log_likes) - (log_likes.len() as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `-ln(Σ f² / Σ f)`.
    AoiNeglog,
    /// `-ln(mean f)`.
    MeanNeglog,
    /// `|y - ŷ(x)|` from a point predictor.
    Residual,
}

/// Scores candidate labels under a fixed posterior.
pub struct Scorer<'a> {
    draws: &'a PosteriorDraws,
    kind: ScoreKind,
}

impl<'a> Scorer<'a> {
    pub fn new(draws: &'a PosteriorDraws, kind: ScoreKind) -> Result<Self> {
        if kind == ScoreKind::Residual {
            return Err(invalid("residual scores come from a point predictor, not posterior draws"));
        }
        Ok(Self { draws, kind })
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    /// Prepare per-draw state at `x`.
    pub fn at(&self, x: &[f64]) -> Result<ScoringPoint<'a>> {
        Ok(ScoringPoint {
            predictive: self.draws.at(x)?,
            kind: self.kind,
            buf: vec![0.0; self.draws.n_draws()],
        })
    }

    pub fn score(&self, x: &[f64], y: f64) -> Result<f64> {
        Ok(self.at(x)?.score(y))
    }
}

/// Scorer state at one input; cheap to evaluate for many labels.
pub struct ScoringPoint<'a> {
    predictive: PointPredictive<'a>,
    kind: ScoreKind,
    buf: Vec<f64>,
}

impl ScoringPoint<'_> {
    pub fn score(&mut self, y: f64) -> f64 {
        self.predictive.log_lik_into(y, &mut self.buf);
        let log_p = match self.kind {
            ScoreKind::AoiNeglog => aoi_log_predictive(&self.buf),
            _ => mean_log_predictive(&self.buf),
        };
        -log_p.max(LOG_DENSITY_FLOOR)
    }
}

/// `s_i = s(X_i, Y_i)` for every calibration row.
pub fn compute_cal_scores(draws: &PosteriorDraws, cal: &Dataset, kind: ScoreKind) -> Result<Vec<f64>> {
    let scorer = Scorer::new(draws, kind)?;
    cal.rows()
        .zip(cal.labels())
        .map(|(x, &y)| scorer.score(x, y))
        .collect()
}

/// Scores of a set of inputs against every candidate label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub kind: ScoreKind,
    pub candidate_grid: Vec<f64>,
    /// Calibration scores, when computed alongside the matrix.
    pub cal_scores: Vec<f64>,
    n_rows: usize,
    values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn from_values(kind: ScoreKind, candidate_grid: Vec<f64>, n_rows: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_rows * candidate_grid.len() {
            return Err(Error::DimensionMismatch {
                expected: n_rows * candidate_grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("scores must be finite"));
        }
        Ok(Self {
            kind,
            candidate_grid,
            cal_scores: Vec::new(),
            n_rows,
            values,
        })
    }

    pub fn with_cal_scores(mut self, cal_scores: Vec<f64>) -> Self {
        self.cal_scores = cal_scores;
        self
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_candidates(&self) -> usize {
        self.candidate_grid.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.n_candidates();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.n_candidates().max(1))
    }

    /// Write `<stem>.csv` (one row per input, one column per candidate) and a
    /// `<stem>.json` header with the score kind, grid and calibration scores.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(stem.with_extension("csv"))?;
        w.write_record(self.candidate_grid.iter().map(|y| format!("{y:e}")))?;
        for row in self.rows() {
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        let header = serde_json::json!({
            "score_kind": self.kind,
            "grid": self.candidate_grid,
            "cal_scores": self.cal_scores,
            "n_rows": self.n_rows,
        });
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }
}

/// Score every test input against every candidate label.
pub fn compute_test_scores(
    draws: &PosteriorDraws,
    test_inputs: &Dataset,
    candidate_grid: &[f64],
    kind: ScoreKind,
) -> Result<ScoreMatrix> {
    let scorer = Scorer::new(draws, kind)?;
    let score_row = |x: &[f64]| -> Result<Vec<f64>> {
        let mut point = scorer.at(x)?;
        Ok(candidate_grid.iter().map(|&y| point.score(y)).collect())
    };
    let rows: Vec<&[f64]> = test_inputs.rows().collect();
    #[cfg(feature = "parallel")]
    let per_row: Vec<Result<Vec<f64>>> = {
        use rayon::prelude::*;
        rows.par_iter().map(|x| score_row(x)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_row: Vec<Result<Vec<f64>>> = rows.iter().map(|x| score_row(x)).collect();
    let values = per_row.into_iter().collect::<Result<Vec<_>>>()?.concat();
    ScoreMatrix::from_values(kind, candidate_grid.to_vec(), test_inputs.n_rows(), values)
}
