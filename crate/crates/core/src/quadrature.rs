//! Expected prediction-set size by Bayesian quadrature.
//!
//! For a fixed threshold `λ` the per-input set size `g_λ(x) = |C(x; λ)|` is
//! given a zero-mean GP prior with an RBF kernel, conditioned on its values
//! at a subset of nodes, and integrated against the empirical distribution
//! of the evaluation inputs. The kernel-mean weights `w = K⁻¹ k̄` are then
//! corrected so that `Σ w = 1` (the ordinary-kriging correction), which makes
//! the estimator exact on constant size curves.
//!
//! Jitter is relative to the signal variance, so the weights do not depend
//! on it and a single factorisation serves every `λ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::conformal::LabelSpace;
use crate::error::{invalid, Error, Result};
use crate::scores::ScoreMatrix;

const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub lengthscale: f64,
    pub signal_var: f64,
    pub jitter: f64,
}

impl KernelConfig {
    /// Median-heuristic lengthscale, unit signal variance, jitter `1e-8`.
    pub fn median_heuristic(inputs: &[&[f64]]) -> Self {
        Self {
            lengthscale: median_pairwise_distance(inputs),
            signal_var: 1.0,
            jitter: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.signal_var > 0.0 && self.jitter > 0.0) {
            return Err(invalid("kernel parameters must be strictly positive"));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unit-variance RBF kernel.
pub fn rbf(a: &[f64], b: &[f64], lengthscale: f64) -> f64 {
    (-0.5 * sq_dist(a, b) / (lengthscale * lengthscale)).exp()
}

/// Median Euclidean distance over distinct pairs; `1.0` if undefined.
pub fn median_pairwise_distance(inputs: &[&[f64]]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(inputs.len() * inputs.len().saturating_sub(1) / 2);
    for i in 0..inputs.len() {
        for j in i + 1..inputs.len() {
            d.push(sq_dist(inputs[i], inputs[j]).sqrt());
        }
    }
    d.retain(|&v| v > 0.0);
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Greedy farthest-point subsample of `m` inputs, seeded at the input
/// nearest the centroid.
pub fn farthest_point_nodes(inputs: &[&[f64]], m: usize) -> Vec<usize> {
    let n = inputs.len();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let m = m.min(n);
    let dim = inputs[0].len();
    let mut centroid = vec![0.0; dim];
    for x in inputs {
        for (c, v) in centroid.iter_mut().zip(x.iter()) {
            *c += v / n as f64;
        }
    }
    let first = (0..n)
        .min_by(|&a, &b| sq_dist(inputs[a], &centroid).total_cmp(&sq_dist(inputs[b], &centroid)))
        .unwrap();
    let mut nodes = vec![first];
    let mut nearest: Vec<f64> = inputs.iter().map(|x| sq_dist(x, inputs[first])).collect();
    while nodes.len() < m {
        let next = (0..n).max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a))).unwrap();
        nodes.push(next);
        for (d, x) in nearest.iter_mut().zip(inputs) {
            *d = d.min(sq_dist(x, inputs[next]));
        }
    }
    nodes
}

/// Per-input set sizes over a sorted grid of thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeCurve {
    #[serde(with = "crate::eval::float_vec_or_inf")]
    pub lambda_grid: Vec<f64>,
    n_inputs: usize,
    /// Row-major `n_inputs × n_lambda`.
    sizes: Vec<f64>,
}

impl SizeCurve {
    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.lambda_grid.len();
        &self.sizes[i * k..(i + 1) * k]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_inputs).map(|i| self.row(i)[j]).collect()
    }

    /// Plot-ready CSV: `lambda,input,size`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,input,size\n");
        for (j, l) in self.lambda_grid.iter().enumerate() {
            for i in 0..self.n_inputs {
                out.push_str(&format!("{l},{i},{}\n", self.row(i)[j]));
            }
        }
        out
    }
}

/// Entry `(i, j)` is the size of `{y : s(x_i, y) ≤ λ_j}`.
pub fn set_size_per_input(scores: &ScoreMatrix, labels: &LabelSpace, lambda_grid: &[f64]) -> Result<SizeCurve> {
    if lambda_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("lambda grid must be sorted"));
    }
    if scores.n_candidates() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.n_candidates(),
        });
    }
    let mut sizes = Vec::with_capacity(scores.n_rows() * lambda_grid.len());
    let mut sorted = Vec::with_capacity(scores.n_candidates());
    for row in scores.rows() {
        sorted.clear();
        sorted.extend_from_slice(row);
        sorted.sort_by(f64::total_cmp);
        for &l in lambda_grid {
            sizes.push(labels.size_of_count(sorted.partition_point(|&s| s <= l)));
        }
    }
    Ok(SizeCurve {
        lambda_grid: lambda_grid.to_vec(),
        n_inputs: scores.n_rows(),
        sizes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BqEstimate {
    pub mean: f64,
    pub variance: f64,
    pub n_nodes: usize,
}

/// A factorised BQ rule for fixed evaluation inputs, nodes and lengthscale.
#[derive(Debug, Clone)]
pub struct BqRule {
    nodes: Vec<usize>,
    weights: Vec<f64>,
    /// Posterior variance of the integral for unit signal variance.
    unit_variance: f64,
    pub jitter_used: f64,
}

impl BqRule {
    pub fn new(eval_inputs: &[&[f64]], nodes: &[usize], lengthscale: f64, jitter: f64) -> Result<Self> {
        if nodes.is_empty() {
            return Err(invalid("BQ needs at least one node"));
        }
        if nodes.iter().any(|&i| i >= eval_inputs.len()) {
            return Err(invalid("node index outside the evaluation inputs"));
        }
        if !(lengthscale > 0.0 && jitter > 0.0) {
            return Err(invalid("lengthscale and jitter must be positive"));
        }
        let m = nodes.len();
        let n = eval_inputs.len() as f64;
        let gram = DMatrix::from_fn(m, m, |a, b| rbf(eval_inputs[nodes[a]], eval_inputs[nodes[b]], lengthscale));
        let kernel_mean = DVector::from_fn(m, |a, _| {
            eval_inputs.iter().map(|x| rbf(eval_inputs[nodes[a]], x, lengthscale)).sum::<f64>() / n
        });
        let mut double_mean = 0.0;
        for (i, a) in eval_inputs.iter().enumerate() {
            for b in &eval_inputs[i + 1..] {
                double_mean += 2.0 * rbf(a, b, lengthscale);
            }
            double_mean += 1.0;
        }
        double_mean /= n * n;

        let mut j = jitter;
        let chol = loop {
            let mut k = gram.clone();
            for d in 0..m {
                k[(d, d)] += j;
            }
            if let Some(c) = Cholesky::<f64, Dyn>::new(k) {
                break c;
            }
            j *= 10.0;
            if j > MAX_JITTER {
                return Err(Error::SingularKernel { jitter: j / 10.0 });
            }
        };
        let raw = chol.solve(&kernel_mean);
        let ones = DVector::from_element(m, 1.0);
        let kinv_ones = chol.solve(&ones);
        let shortfall = 1.0 - raw.sum();
        let weights = (&raw + &kinv_ones * (shortfall / kinv_ones.sum())).iter().copied().collect();
        let unit_variance = (double_mean - kernel_mean.dot(&raw)).max(0.0);
        Ok(Self {
            nodes: nodes.to_vec(),
            weights,
            unit_variance,
            jitter_used: j,
        })
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn unit_variance(&self) -> f64 {
        self.unit_variance
    }

    /// Integrate `values` (one per evaluation input) with signal variance
    /// taken as the sample variance of the node values unless given.
    pub fn integrate(&self, values: &[f64], signal_var: Option<f64>) -> BqEstimate {
        let g: Vec<f64> = self.nodes.iter().map(|&i| values[i]).collect();
        let mean = g.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        let sv = signal_var.unwrap_or_else(|| sample_variance(&g));
        BqEstimate {
            mean,
            variance: (sv * self.unit_variance).max(0.0),
            n_nodes: g.len(),
        }
    }
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// BQ estimate of the mean of `sizes` over the evaluation inputs from its
/// values at `nodes`.
pub fn bq_expected_size(eval_inputs: &[&[f64]], sizes: &[f64], nodes: &[usize], kernel: &KernelConfig) -> Result<BqEstimate> {
    kernel.validate()?;
    if sizes.len() != eval_inputs.len() {
        return Err(Error::DimensionMismatch {
            expected: eval_inputs.len(),
            got: sizes.len(),
        });
    }
    let rule = BqRule::new(eval_inputs, nodes, kernel.lengthscale, kernel.jitter)?;
    Ok(rule.integrate(sizes, Some(kernel.signal_var)))
}

/// Plain Monte Carlo mean; the fallback estimator.
pub fn mc_expected_size(sizes: &[f64]) -> Result<f64> {
    if sizes.is_empty() {
        return Err(invalid("no sizes to average"));
    }
    Ok(sizes.iter().sum::<f64>() / sizes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridStrategy {
    ScoreQuantiles,
    Uniform,
}

/// Sorted candidate thresholds ending in a `+∞` sentinel.
pub fn candidate_grid(cal_scores: &[f64], strategy: GridStrategy, size: usize) -> Result<Vec<f64>> {
    if cal_scores.is_empty() {
        return Err(invalid("no calibration scores"));
    }
    if size < 2 {
        return Err(invalid("candidate grid needs at least two points"));
    }
    let mut sorted = cal_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut grid: Vec<f64> = match strategy {
        GridStrategy::ScoreQuantiles => (0..size)
            .map(|j| {
                let q = j as f64 / (size - 1) as f64;
                let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
                sorted[idx]
            })
            .collect(),
        GridStrategy::Uniform => {
            let (lo, hi) = (sorted[0], sorted[n - 1]);
            (0..size).map(|j| lo + (hi - lo) * j as f64 / (size - 1) as f64).collect()
        }
    };
    grid.dedup();
    grid.push(f64::INFINITY);
    Ok(grid)
}
