//! Comparison methods: Lasso-residual split CP, Bayesian credible
//! intervals and sets, and MSP ranking.

use serde::{Deserialize, Serialize};

use crate::conformal::{split_threshold, PredictionSet, Threshold};
use crate::datasets::Dataset;
use crate::error::{invalid, Result};
use crate::posterior::{predictive_samples, PosteriorDraws};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub penalty: f64,
    pub converged: bool,
    pub sweeps: usize,
    /// Objective after each sweep.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl LassoModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.intercept
    }

    /// `(1/2n)‖y − Xθ − θ_0‖² + penalty·‖θ‖₁`.
    pub fn objective(&self, data: &Dataset) -> f64 {
        let n = data.n_rows() as f64;
        let rss: f64 = data.rows().zip(data.labels()).map(|(x, y)| (y - self.predict(x)).powi(2)).sum();
        rss / (2.0 * n) + self.penalty * self.coefficients.iter().map(|c| c.abs()).sum::<f64>()
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent with an unpenalised intercept. Stops when the
/// largest coefficient change in a sweep is below `tol`; hitting
/// `max_sweeps` leaves `converged = false`.
pub fn lasso_fit(train: &Dataset, penalty: f64, max_sweeps: usize, tol: f64) -> Result<LassoModel> {
    if !(penalty >= 0.0) {
        return Err(invalid("penalty must be non-negative"));
    }
    let n = train.n_rows();
    if n == 0 {
        return Err(invalid("no training rows"));
    }
    let d = train.n_features();
    let nf = n as f64;
    let col_sq: Vec<f64> = (0..d).map(|j| train.rows().map(|r| r[j] * r[j]).sum::<f64>() / nf).collect();
    let mut model = LassoModel {
        coefficients: vec![0.0; d],
        intercept: train.labels().iter().sum::<f64>() / nf,
        penalty,
        converged: false,
        sweeps: 0,
        objective_trace: Vec::new(),
    };
    let mut resid: Vec<f64> = train.labels().iter().map(|y| y - model.intercept).collect();
    for sweep in 1..=max_sweeps {
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            if col_sq[j] == 0.0 {
                continue;
            }
            let old = model.coefficients[j];
            let rho = train.rows().zip(&resid).map(|(x, r)| x[j] * r).sum::<f64>() / nf + col_sq[j] * old;
            let new = soft_threshold(rho, penalty) / col_sq[j];
            if new != old {
                let delta = new - old;
                for (r, x) in resid.iter_mut().zip(train.rows()) {
                    *r -= delta * x[j];
                }
                model.coefficients[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        let shift = resid.iter().sum::<f64>() / nf;
        model.intercept += shift;
        for r in &mut resid {
            *r -= shift;
        }
        max_change = max_change.max(shift.abs());
        model.sweeps = sweep;
        model.objective_trace.push(model.objective(train));
        if max_change < tol {
            model.converged = true;
            break;
        }
    }
    Ok(model)
}

/// Lasso fit with the settings used in the experiments: tol `1e-8`,
/// at most 10 000 sweeps.
pub fn lasso_default(train: &Dataset, penalty: f64) -> Result<LassoModel> {
    lasso_fit(train, penalty, 10_000, 1e-8)
}

/// Split CP on absolute residuals of a fixed point predictor.
#[derive(Debug, Clone)]
pub struct ResidualConformal<'a> {
    pub model: &'a LassoModel,
    pub threshold: Threshold,
}

impl<'a> ResidualConformal<'a> {
    pub fn calibrate(model: &'a LassoModel, cal: &Dataset, alpha: f64) -> Result<Self> {
        let scores: Vec<f64> = cal.rows().zip(cal.labels()).map(|(x, y)| (y - model.predict(x)).abs()).collect();
        Ok(Self {
            model,
            threshold: split_threshold(&scores, alpha)?,
        })
    }

    pub fn predict(&self, x: &[f64]) -> PredictionSet {
        let centre = self.model.predict(x);
        PredictionSet::Interval {
            lower: centre - self.threshold.lambda,
            upper: centre + self.threshold.lambda,
        }
    }
}

/// `ŷ(x) ± λ_cp` with `λ_cp` the split-CP quantile of `|y − ŷ(x)|`.
pub fn split_cp_residual(lasso: &LassoModel, cal: &Dataset, test_input: &[f64], alpha: f64) -> Result<PredictionSet> {
    Ok(ResidualConformal::calibrate(lasso, cal, alpha)?.predict(test_input))
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Shortest window of sorted samples containing `⌈(1−α)N⌉` of them.
pub fn hpd_interval(sorted: &[f64], alpha: f64) -> (f64, f64) {
    let n = sorted.len();
    let k = (((1.0 - alpha) * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let start = (0..=n - k)
        .min_by(|&a, &b| (sorted[a + k - 1] - sorted[a]).total_cmp(&(sorted[b + k - 1] - sorted[b])))
        .unwrap();
    (sorted[start], sorted[start + k - 1])
}

/// Bayesian credible interval from posterior predictive samples:
/// equal-tailed `(α/2, 1 − α/2)` quantiles, or the HPD window.
pub fn bci_regression_interval(
    draws: &PosteriorDraws,
    x: &[f64],
    alpha: f64,
    m_per_draw: usize,
    seed: u64,
    hpd: bool,
) -> Result<PredictionSet> {
    if !(alpha > 0.0 && alpha < 1.0) || m_per_draw == 0 {
        return Err(invalid("need alpha in (0, 1) and at least one sample per draw"));
    }
    let mut s = predictive_samples(draws, x, m_per_draw, seed)?;
    s.sort_by(f64::total_cmp);
    let (lower, upper) = if hpd {
        hpd_interval(&s, alpha)
    } else {
        (quantile_sorted(&s, alpha / 2.0), quantile_sorted(&s, 1.0 - alpha / 2.0))
    };
    Ok(PredictionSet::Interval { lower, upper })
}

/// Smallest label set reaching predictive mass `1 − α`, labels taken in
/// decreasing probability (label 1 first on ties).
pub fn bci_classification_set(p1: f64, alpha: f64) -> PredictionSet {
    let ranked = if p1 >= 0.5 { [(1u8, p1), (0, 1.0 - p1)] } else { [(0, 1.0 - p1), (1, p1)] };
    let mut labels = Vec::with_capacity(2);
    let mut mass = 0.0;
    for (label, p) in ranked {
        labels.push(label);
        mass += p;
        if mass >= 1.0 - alpha - 1e-12 {
            break;
        }
    }
    labels.sort_unstable();
    PredictionSet::Labels { labels }
}

/// Labels ordered by decreasing predictive mean, ties by label index.
pub fn msp_rank(means: &[f64]) -> Result<Vec<(usize, f64)>> {
    if means.iter().any(|p| !p.is_finite()) {
        return Err(invalid("probabilities must be finite"));
    }
    let mut ranked: Vec<(usize, f64)> = means.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synthetic_regression, TaskKind};
    use crate::posterior::ModelKind;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn unpenalised_orthonormal_design_gives_ols() {
        // Columns orthogonal with mean zero and unit population variance.
        let rows = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
        let y = vec![3.0, 1.0, -1.0, -2.0];
        let data = Dataset::from_rows(&rows, y.clone(), TaskKind::Regression).unwrap();
        let m = lasso_default(&data, 0.0).unwrap();
        let ols0 = rows.iter().zip(&y).map(|(r, v)| r[0] * v).sum::<f64>() / 4.0;
        let ols1 = rows.iter().zip(&y).map(|(r, v)| r[1] * v).sum::<f64>() / 4.0;
        assert!((m.coefficients[0] - ols0).abs() < 1e-8);
        assert!((m.coefficients[1] - ols1).abs() < 1e-8);
        assert!((m.intercept - 0.25).abs() < 1e-8);
        assert!(m.converged);
    }

    #[test]
    fn soft_threshold_on_univariate_design() {
        let x = [-1.5, -0.5, 0.5, 1.5];
        let (mx, sd) = (0.0, (x.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt());
        let rows: Vec<Vec<f64>> = x.iter().map(|v| vec![(v - mx) / sd]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let data = Dataset::from_rows(&rows, y, TaskKind::Regression).unwrap();
        let m = lasso_default(&data, 0.4).unwrap();
        assert!((m.coefficients[0] - 0.6).abs() < 1e-10);
    }

    #[test]
    fn large_penalty_zeroes_everything() {
        let data = synthetic_regression(100, &[1.0, -2.0, 0.5], 0.5, 2).unwrap();
        let n = data.n_rows() as f64;
        let ybar = data.labels().iter().sum::<f64>() / n;
        let max_corr = (0..3)
            .map(|j| {
                let xbar = data.column(j).iter().sum::<f64>() / n;
                data.rows().zip(data.labels()).map(|(x, y)| (x[j] - xbar) * (y - ybar)).sum::<f64>().abs() / n
            })
            .fold(0.0, f64::max);
        // Centre columns so the intercept does not interact with the bound.
        let centred: Vec<Vec<f64>> = data
            .rows()
            .map(|x| (0..3).map(|j| x[j] - data.column(j).iter().sum::<f64>() / n).collect())
            .collect();
        let c = Dataset::from_rows(&centred, data.labels().to_vec(), TaskKind::Regression).unwrap();
        let m = lasso_default(&c, max_corr * 1.0001).unwrap();
        assert!(m.coefficients.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn objective_never_increases_across_sweeps() {
        let data = synthetic_regression(80, &[1.0, 0.9, -0.8, 0.0, 0.3], 1.0, 4).unwrap();
        for penalty in [0.0, 0.004, 0.1, 0.5] {
            let m = lasso_fit(&data, penalty, 500, 1e-12).unwrap();
            assert!(m.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "penalty {penalty}");
        }
    }

    #[test]
    fn residual_split_cp_intervals() {
        let data = synthetic_regression(60, &[2.0], 1e-9, 5).unwrap();
        let train = data.subset(&(0..30).collect::<Vec<_>>());
        let cal = data.subset(&(30..60).collect::<Vec<_>>());
        let exact = LassoModel {
            coefficients: vec![2.0],
            intercept: 0.0,
            penalty: 0.0,
            converged: true,
            sweeps: 0,
            objective_trace: vec![],
        };
        let s = split_cp_residual(&exact, &cal, &[0.3], 0.2).unwrap();
        assert!(s.size() < 1e-6);
        let fitted = lasso_default(&train, 0.004).unwrap();
        let s = split_cp_residual(&fitted, &cal, &[0.3], 0.2).unwrap();
        assert!(s.contains(fitted.predict(&[0.3])));
    }

    #[test]
    fn bci_regression_examples() {
        let collapsed = PosteriorDraws::from_parameters(ModelKind::SparseLinear, 1, &vec![vec![1.0, 0.5, 1.0, 1e-9]; 10]).unwrap();
        let s = bci_regression_interval(&collapsed, &[2.0], 0.2, 5, 1, false).unwrap();
        assert!(s.size() < 1e-6 && s.contains(2.5));

        // Oracle: the 10%/90% standard-normal quantiles.
        let std_normal = PosteriorDraws::from_parameters(ModelKind::SparseLinear, 1, &[vec![0.0, 0.0, 1.0, 1.0]]).unwrap();
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.9);
        let s = bci_regression_interval(&std_normal, &[0.0], 0.2, 200_000, 3, false).unwrap();
        assert!((s.size() - 2.0 * z).abs() < 0.03, "{}", s.size());
        let h = bci_regression_interval(&std_normal, &[0.0], 0.2, 200_000, 3, true).unwrap();
        assert!((h.size() - 2.0 * z).abs() < 0.03 && h.size() <= s.size() + 1e-12);
    }

    #[test]
    fn bci_classification_examples() {
        assert_eq!(bci_classification_set(0.95, 0.2), PredictionSet::Labels { labels: vec![1] });
        assert_eq!(bci_classification_set(0.5, 0.2), PredictionSet::Labels { labels: vec![0, 1] });
        assert_eq!(bci_classification_set(0.85, 0.2), PredictionSet::Labels { labels: vec![1] });
        assert_eq!(bci_classification_set(0.1, 0.2), PredictionSet::Labels { labels: vec![0] });
        for p in [0.0, 0.2, 0.79, 0.8, 0.81, 1.0] {
            let s = bci_classification_set(p, 0.2);
            assert_eq!(s.size() == 1.0, f64::max(p, 1.0 - p) >= 0.8 - 1e-12, "p={p}");
        }
    }

    #[test]
    fn msp_examples() {
        assert_eq!(msp_rank(&[0.7, 0.3]).unwrap().iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(msp_rank(&[0.5, 0.5, 0.5]).unwrap().iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(msp_rank(&[1.0]).unwrap().len(), 1);
        assert!(msp_rank(&[f64::NAN]).is_err());
    }
}
