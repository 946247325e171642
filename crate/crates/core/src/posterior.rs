//! Posterior sampling for the sparse linear regression and logistic models.
//!
//! Both models are sampled with a single-chain, component-wise random-walk
//! Metropolis sampler. Per-component step sizes are adapted toward a 0.44
//! acceptance rate during burn-in and frozen afterwards, so the retained
//! chain is a fixed-kernel Metropolis chain. Positive scale parameters (the
//! Laplace scale `b` and the noise sd `τ`) are sampled on the log scale with
//! the Jacobian included.
//!
//! Sufficient statistics (residuals for regression, linear predictors and
//! softplus terms for logistic) are cached so that one component update
//! costs `O(n)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{invalid, Error, Result};
use crate::rng::rng_from_seed;

/// Per-draw likelihoods are clamped below at this density before logs.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// `ln(DENSITY_FLOOR)`.
pub const LOG_DENSITY_FLOOR: f64 = -690.775_527_898_213_7;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Shape and rate of the Gamma hyperprior on the Laplace scale `b`.
pub const LAPLACE_SCALE_GAMMA: (f64, f64) = (1.0, 1.0);

const TARGET_ACCEPTANCE: f64 = 0.44;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SparseLinear,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightPrior {
    /// `θ_j ~ Laplace(0, b)`, `b ~ Gamma(1, 1)`.
    Laplace,
    /// `θ_j ~ N(0, sd²)`; used to check the sampler against the conjugate
    /// ridge posterior.
    Gaussian { sd: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoisePrior {
    /// `τ ~ HalfNormal(c)` with `c` the scale.
    HalfNormal { c: f64 },
    Fixed { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfigRegression {
    pub weights: WeightPrior,
    pub noise: NoisePrior,
    /// Sd of the Gaussian prior on the intercept.
    pub intercept_sd: f64,
}

impl PriorConfigRegression {
    /// The hierarchical Laplace prior with half-normal noise scale `c`.
    pub fn new(c: f64) -> Self {
        Self {
            weights: WeightPrior::Laplace,
            noise: NoisePrior::HalfNormal { c },
            intercept_sd: 10.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match (self.weights, self.noise) {
            (WeightPrior::Gaussian { sd }, _) if !(sd > 0.0) => false,
            (_, NoisePrior::HalfNormal { c }) => c > 0.0,
            (_, NoisePrior::Fixed { tau }) => tau > 0.0,
        };
        if !ok || !(self.intercept_sd > 0.0) {
            return Err(invalid("prior scales must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfigLogistic {
    /// Sd of the Gaussian prior on every weight and the intercept.
    pub weight_sd: f64,
}

impl Default for PriorConfigLogistic {
    fn default() -> Self {
        Self { weight_sd: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub total_iters: usize,
    pub burn_in: usize,
    pub initial_step: f64,
    /// Iterations per adaptation batch during burn-in.
    pub adapt_window: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            total_iters: 8000,
            burn_in: 2000,
            initial_step: 0.1,
            adapt_window: 50,
            thin: 1,
            seed: 0,
        }
    }
}

impl McmcConfig {
    /// Shorter chain used by the desk-scale experiment profile.
    pub fn desk() -> Self {
        Self {
            total_iters: 2000,
            burn_in: 500,
            adapt_window: 25,
            ..Self::default()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn kept_draws(&self) -> usize {
        (self.total_iters - self.burn_in).div_ceil(self.thin)
    }

    fn validate(&self) -> Result<()> {
        if self.burn_in >= self.total_iters {
            return Err(invalid("burn_in must be smaller than total_iters"));
        }
        if !(self.initial_step > 0.0) || self.adapt_window == 0 || self.thin == 0 {
            return Err(invalid("initial_step, adapt_window and thin must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerDiagnostics {
    pub steps_at_burn_in: Vec<f64>,
    pub steps_at_end: Vec<f64>,
}

/// Retained MCMC draws on the natural parameter scale.
///
/// Layout per draw: `θ_1..θ_d, θ_0` then, for the sparse linear model,
/// `b, τ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    draws: Vec<f64>,
    n_params: usize,
    n_features: usize,
    pub param_names: Vec<String>,
    pub model: ModelKind,
    pub acceptance_rate: f64,
    pub config: McmcConfig,
    pub diagnostics: SamplerDiagnostics,
    #[serde(skip)]
    cache: NoiseCache,
}

#[derive(Debug, Clone, Default)]
struct NoiseCache {
    inv_tau: Vec<f64>,
    log_norm: Vec<f64>,
}

impl PosteriorDraws {
    fn assemble(
        draws: Vec<f64>,
        n_features: usize,
        model: ModelKind,
        acceptance_rate: f64,
        config: McmcConfig,
        diagnostics: SamplerDiagnostics,
    ) -> Result<Self> {
        let mut param_names: Vec<String> = (0..n_features).map(|j| format!("theta{}", j + 1)).collect();
        param_names.push("theta0".into());
        if model == ModelKind::SparseLinear {
            param_names.push("b".into());
            param_names.push("tau".into());
        }
        let n_params = param_names.len();
        if draws.is_empty() || draws.len() % n_params != 0 {
            return Err(invalid("draw buffer does not match parameter count"));
        }
        if draws.iter().any(|v| !v.is_finite()) {
            return Err(invalid("posterior draws contain non-finite values"));
        }
        let mut out = Self {
            draws,
            n_params,
            n_features,
            param_names,
            model,
            acceptance_rate,
            config,
            diagnostics,
            cache: NoiseCache::default(),
        };
        out.rebuild_cache()?;
        Ok(out)
    }

    /// Wrap externally produced parameter vectors (one per draw).
    pub fn from_parameters(model: ModelKind, n_features: usize, params: &[Vec<f64>]) -> Result<Self> {
        let p = n_features + if model == ModelKind::SparseLinear { 3 } else { 1 };
        if params.iter().any(|v| v.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: params.iter().map(Vec::len).find(|&l| l != p).unwrap_or(p),
            });
        }
        Self::assemble(
            params.concat(),
            n_features,
            model,
            f64::NAN,
            McmcConfig::default(),
            SamplerDiagnostics {
                steps_at_burn_in: vec![],
                steps_at_end: vec![],
            },
        )
    }

    fn rebuild_cache(&mut self) -> Result<()> {
        if self.model != ModelKind::SparseLinear {
            return Ok(());
        }
        let taus: Vec<f64> = (0..self.n_draws()).map(|t| self.tau(t)).collect();
        if taus.iter().any(|&tau| !(tau > 0.0)) {
            return Err(invalid("noise sd draws must be strictly positive"));
        }
        self.cache = NoiseCache {
            inv_tau: taus.iter().map(|t| 1.0 / t).collect(),
            log_norm: taus.iter().map(|t| -t.ln() - HALF_LN_2PI).collect(),
        };
        Ok(())
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len() / self.n_params
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn draw(&self, t: usize) -> &[f64] {
        &self.draws[t * self.n_params..(t + 1) * self.n_params]
    }

    pub fn intercept(&self, t: usize) -> f64 {
        self.draw(t)[self.n_features]
    }

    /// Noise sd of draw `t`. Panics for the logistic model.
    pub fn tau(&self, t: usize) -> f64 {
        assert_eq!(self.model, ModelKind::SparseLinear, "logistic draws have no noise sd");
        self.draw(t)[self.n_features + 2]
    }

    pub fn param_column(&self, k: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|t| self.draw(t)[k]).collect()
    }

    pub fn param_means(&self) -> Vec<f64> {
        let t = self.n_draws() as f64;
        let mut m = vec![0.0; self.n_params];
        for d in self.draws.chunks_exact(self.n_params) {
            for (acc, v) in m.iter_mut().zip(d) {
                *acc += v / t;
            }
        }
        m
    }

    /// `θ^(t)ᵀx + θ_0^(t)` for draw `t`.
    pub fn linear_predictor(&self, t: usize, x: &[f64]) -> f64 {
        let d = self.draw(t);
        d[..self.n_features].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + d[self.n_features]
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Per-draw linear predictors at `x`, reusable across candidate labels.
    pub fn at(&self, x: &[f64]) -> Result<PointPredictive<'_>> {
        self.check_dim(x)?;
        let eta = (0..self.n_draws()).map(|t| self.linear_predictor(t, x)).collect();
        Ok(PointPredictive { draws: self, eta })
    }

    /// Write `<stem>.csv` (one row per draw) and the `<stem>.json` sidecar.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(stem.with_extension("csv"))?;
        w.write_record(&self.param_names)?;
        for t in 0..self.n_draws() {
            w.write_record(self.draw(t).iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        let sidecar = DrawsSidecar {
            param_names: self.param_names.clone(),
            model: self.model,
            n_features: self.n_features,
            acceptance_rate: self.acceptance_rate,
            config: self.config,
            diagnostics: self.diagnostics.clone(),
        };
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let sidecar: DrawsSidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let mut r = csv::Reader::from_path(stem.with_extension("csv"))?;
        let mut draws = Vec::new();
        for rec in r.records() {
            for cell in rec?.iter() {
                draws.push(cell.parse::<f64>().map_err(|e| invalid(format!("bad draw value `{cell}`: {e}")))?);
            }
        }
        Self::assemble(
            draws,
            sidecar.n_features,
            sidecar.model,
            sidecar.acceptance_rate,
            sidecar.config,
            sidecar.diagnostics,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct DrawsSidecar {
    param_names: Vec<String>,
    model: ModelKind,
    n_features: usize,
    acceptance_rate: f64,
    config: McmcConfig,
    diagnostics: SamplerDiagnostics,
}

/// Per-draw linear predictors at one input.
pub struct PointPredictive<'a> {
    draws: &'a PosteriorDraws,
    eta: Vec<f64>,
}

impl PointPredictive<'_> {
    pub fn n_draws(&self) -> usize {
        self.eta.len()
    }

    pub fn linear_predictors(&self) -> &[f64] {
        &self.eta
    }

    /// Fill `out[t] = log f_{θ^(t)}(y | x)`, floored at [`LOG_DENSITY_FLOOR`].
    pub fn log_lik_into(&self, y: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.eta.len());
        match self.draws.model {
            ModelKind::SparseLinear => {
                let NoiseCache { inv_tau, log_norm } = &self.draws.cache;
                for (((o, &eta), &it), &ln) in out.iter_mut().zip(&self.eta).zip(inv_tau).zip(log_norm) {
                    let z = (y - eta) * it;
                    *o = (ln - 0.5 * z * z).max(LOG_DENSITY_FLOOR);
                }
            }
            ModelKind::Logistic => {
                let positive = y >= 0.5;
                for (o, &eta) in out.iter_mut().zip(&self.eta) {
                    let l = if positive { -softplus(-eta) } else { -softplus(eta) };
                    *o = l.max(LOG_DENSITY_FLOOR);
                }
            }
        }
    }

    pub fn log_lik(&self, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.eta.len()];
        self.log_lik_into(y, &mut out);
        out
    }
}

/// `log f_{θ^(t)}(y | x)` for every retained draw.
pub fn loglik_per_draw(draws: &PosteriorDraws, x: &[f64], y: f64) -> Result<Vec<f64>> {
    Ok(draws.at(x)?.log_lik(y))
}

/// Draw `m_per_draw` labels from `N(θ^(t)ᵀx + θ_0^(t), τ^(t)²)` for each draw.
pub fn predictive_samples(draws: &PosteriorDraws, x: &[f64], m_per_draw: usize, seed: u64) -> Result<Vec<f64>> {
    if draws.model != ModelKind::SparseLinear {
        return Err(invalid("predictive samples are only defined for the regression model"));
    }
    let at = draws.at(x)?;
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(draws.n_draws() * m_per_draw);
    for (t, &mu) in at.eta.iter().enumerate() {
        let tau = draws.tau(t);
        for _ in 0..m_per_draw {
            let z: f64 = rng.sample(StandardNormal);
            out.push(mu + tau * z);
        }
    }
    Ok(out)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Monte Carlo standard error of a chain mean by non-overlapping batch means.
pub fn mcse_batch_means(chain: &[f64]) -> f64 {
    let n = chain.len();
    let batch = (n as f64).sqrt().floor().max(1.0) as usize;
    let n_batches = n / batch;
    if n_batches < 2 {
        return f64::INFINITY;
    }
    let means: Vec<f64> = chain
        .chunks_exact(batch)
        .take(n_batches)
        .map(|c| c.iter().sum::<f64>() / batch as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    (var / n_batches as f64).sqrt()
}

/// A log density over an unconstrained state vector supporting cheap
/// single-component proposals.
trait ComponentTarget {
    fn state(&self) -> &[f64];
    fn is_free(&self, k: usize) -> bool;
    /// Log-density change if component `k` moves by `delta`; the proposal is
    /// stashed until [`ComponentTarget::commit`].
    fn propose(&mut self, k: usize, delta: f64) -> f64;
    fn commit(&mut self);
    fn refresh(&mut self);
    fn natural_params(&self, out: &mut Vec<f64>);
    fn log_density(&self) -> f64;
}

fn run_chain<T: ComponentTarget>(target: &mut T, mcmc: &McmcConfig) -> Result<(Vec<f64>, f64, SamplerDiagnostics)> {
    mcmc.validate()?;
    if !target.log_density().is_finite() {
        return Err(Error::NonFiniteLogPosterior);
    }
    let p = target.state().len();
    let free: Vec<usize> = (0..p).filter(|&k| target.is_free(k)).collect();
    let mut rng = rng_from_seed(mcmc.seed);
    let mut log_step = vec![mcmc.initial_step.ln(); p];
    let mut batch_accepts = vec![0usize; p];
    let mut batch_index = 0usize;
    let mut kept_accepts = 0usize;
    let mut kept_proposals = 0usize;
    let mut out = Vec::with_capacity(mcmc.kept_draws() * p);
    let mut steps_at_burn_in = Vec::new();

    for iter in 0..mcmc.total_iters {
        let burning = iter < mcmc.burn_in;
        for &k in &free {
            let z: f64 = rng.sample(StandardNormal);
            let delta = log_step[k].exp() * z;
            let dlog = target.propose(k, delta);
            let u: f64 = rng.random();
            let accepted = dlog.is_finite() && (dlog >= 0.0 || u.ln() < dlog);
            if accepted {
                target.commit();
            }
            if burning {
                batch_accepts[k] += accepted as usize;
            } else {
                kept_accepts += accepted as usize;
                kept_proposals += 1;
            }
        }
        if (iter + 1) % 500 == 0 {
            target.refresh();
        }
        if burning && (iter + 1) % mcmc.adapt_window == 0 {
            batch_index += 1;
            let gain = 2.0 / (batch_index as f64).sqrt();
            for &k in &free {
                let rate = batch_accepts[k] as f64 / mcmc.adapt_window as f64;
                log_step[k] = (log_step[k] + gain * (rate - TARGET_ACCEPTANCE)).clamp(-12.0, 3.0);
                batch_accepts[k] = 0;
            }
        }
        if iter + 1 == mcmc.burn_in {
            steps_at_burn_in = log_step.iter().map(|s| s.exp()).collect();
        }
        if !burning && (iter - mcmc.burn_in) % mcmc.thin == 0 {
            target.natural_params(&mut out);
        }
    }
    let acceptance = if kept_proposals == 0 {
        0.0
    } else {
        kept_accepts as f64 / kept_proposals as f64
    };
    let diagnostics = SamplerDiagnostics {
        steps_at_burn_in,
        steps_at_end: log_step.iter().map(|s| s.exp()).collect(),
    };
    Ok((out, acceptance, diagnostics))
}

struct RegressionTarget<'a> {
    data: &'a Dataset,
    prior: PriorConfigRegression,
    col_sq: Vec<f64>,
    z: Vec<f64>,
    resid: Vec<f64>,
    rss: f64,
    sum_abs: f64,
    sum_sq: f64,
    pending: Option<(usize, f64)>,
}

impl<'a> RegressionTarget<'a> {
    fn new(data: &'a Dataset, prior: PriorConfigRegression) -> Self {
        let d = data.n_features();
        let col_sq = (0..d).map(|j| data.rows().map(|r| r[j] * r[j]).sum()).collect();
        let log_tau0 = match prior.noise {
            NoisePrior::Fixed { tau } => tau.ln(),
            NoisePrior::HalfNormal { .. } => 0.0,
        };
        let log_b0 = match prior.weights {
            WeightPrior::Gaussian { sd } => sd.ln(),
            WeightPrior::Laplace => 0.0,
        };
        let mut z = vec![0.0; d + 3];
        z[d + 1] = log_b0;
        z[d + 2] = log_tau0;
        let mut t = Self {
            data,
            prior,
            col_sq,
            z,
            resid: Vec::new(),
            rss: 0.0,
            sum_abs: 0.0,
            sum_sq: 0.0,
            pending: None,
        };
        t.refresh();
        t
    }

    fn d(&self) -> usize {
        self.data.n_features()
    }

    fn weight_term(&self, sum_abs: f64, sum_sq: f64, log_b: f64) -> f64 {
        let d = self.d() as f64;
        match self.prior.weights {
            WeightPrior::Laplace => {
                let (shape, rate) = LAPLACE_SCALE_GAMMA;
                -d * log_b - sum_abs * (-log_b).exp() + shape * log_b - rate * log_b.exp()
            }
            WeightPrior::Gaussian { sd } => -0.5 * sum_sq / (sd * sd),
        }
    }

    fn noise_term(&self, rss: f64, log_tau: f64) -> f64 {
        let n = self.data.n_rows() as f64;
        let lik = -n * log_tau - 0.5 * rss * (-2.0 * log_tau).exp();
        match self.prior.noise {
            NoisePrior::HalfNormal { c } => lik - 0.5 * (2.0 * log_tau).exp() / (c * c) + log_tau,
            NoisePrior::Fixed { .. } => lik,
        }
    }

    fn intercept_term(&self, v: f64) -> f64 {
        -0.5 * v * v / (self.prior.intercept_sd * self.prior.intercept_sd)
    }
}

impl ComponentTarget for RegressionTarget<'_> {
    fn state(&self) -> &[f64] {
        &self.z
    }

    fn is_free(&self, k: usize) -> bool {
        let d = self.d();
        if k == d + 1 {
            matches!(self.prior.weights, WeightPrior::Laplace)
        } else if k == d + 2 {
            matches!(self.prior.noise, NoisePrior::HalfNormal { .. })
        } else {
            true
        }
    }

    fn propose(&mut self, k: usize, delta: f64) -> f64 {
        let d = self.d();
        let (log_b, log_tau) = (self.z[d + 1], self.z[d + 2]);
        self.pending = Some((k, delta));
        if k < d {
            let old = self.z[k];
            let new = old + delta;
            let cross: f64 = self.resid.iter().zip(self.data.rows()).map(|(r, x)| r * x[k]).sum();
            let rss_new = self.rss - 2.0 * delta * cross + delta * delta * self.col_sq[k];
            let abs_new = self.sum_abs - old.abs() + new.abs();
            let sq_new = self.sum_sq - old * old + new * new;
            self.noise_term(rss_new, log_tau) + self.weight_term(abs_new, sq_new, log_b)
                - self.noise_term(self.rss, log_tau)
                - self.weight_term(self.sum_abs, self.sum_sq, log_b)
        } else if k == d {
            let n = self.data.n_rows() as f64;
            let sum_r: f64 = self.resid.iter().sum();
            let rss_new = self.rss - 2.0 * delta * sum_r + delta * delta * n;
            self.noise_term(rss_new, log_tau) + self.intercept_term(self.z[d] + delta)
                - self.noise_term(self.rss, log_tau)
                - self.intercept_term(self.z[d])
        } else if k == d + 1 {
            self.weight_term(self.sum_abs, self.sum_sq, log_b + delta) - self.weight_term(self.sum_abs, self.sum_sq, log_b)
        } else {
            self.noise_term(self.rss, log_tau + delta) - self.noise_term(self.rss, log_tau)
        }
    }

    fn commit(&mut self) {
        let Some((k, delta)) = self.pending.take() else { return };
        let d = self.d();
        if k < d {
            let old = self.z[k];
            self.z[k] += delta;
            self.sum_abs += self.z[k].abs() - old.abs();
            self.sum_sq += self.z[k] * self.z[k] - old * old;
            for (r, x) in self.resid.iter_mut().zip(self.data.rows()) {
                *r -= delta * x[k];
            }
            self.rss = self.resid.iter().map(|r| r * r).sum();
        } else if k == d {
            self.z[d] += delta;
            for r in &mut self.resid {
                *r -= delta;
            }
            self.rss = self.resid.iter().map(|r| r * r).sum();
        } else {
            self.z[k] += delta;
        }
    }

    fn refresh(&mut self) {
        let d = self.d();
        let (w, b0) = (&self.z[..d], self.z[d]);
        self.resid = self
            .data
            .rows()
            .zip(self.data.labels())
            .map(|(x, y)| y - x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - b0)
            .collect();
        self.rss = self.resid.iter().map(|r| r * r).sum();
        self.sum_abs = w.iter().map(|v| v.abs()).sum();
        self.sum_sq = w.iter().map(|v| v * v).sum();
    }

    fn natural_params(&self, out: &mut Vec<f64>) {
        let d = self.d();
        out.extend_from_slice(&self.z[..=d]);
        out.push(self.z[d + 1].exp());
        out.push(self.z[d + 2].exp());
    }

    fn log_density(&self) -> f64 {
        let d = self.d();
        self.noise_term(self.rss, self.z[d + 2])
            + self.weight_term(self.sum_abs, self.sum_sq, self.z[d + 1])
            + self.intercept_term(self.z[d])
    }
}

struct LogisticTarget<'a> {
    data: &'a Dataset,
    inv_var: f64,
    z: Vec<f64>,
    eta: Vec<f64>,
    sp: Vec<f64>,
    pending_k: Option<usize>,
    pending_delta: f64,
    pending_eta: Vec<f64>,
    pending_sp: Vec<f64>,
}

impl<'a> LogisticTarget<'a> {
    fn new(data: &'a Dataset, prior: PriorConfigLogistic) -> Self {
        let n = data.n_rows();
        let mut t = Self {
            data,
            inv_var: 1.0 / (prior.weight_sd * prior.weight_sd),
            z: vec![0.0; data.n_features() + 1],
            eta: vec![0.0; n],
            sp: vec![0.0; n],
            pending_k: None,
            pending_delta: 0.0,
            pending_eta: vec![0.0; n],
            pending_sp: vec![0.0; n],
        };
        t.refresh();
        t
    }
}

impl ComponentTarget for LogisticTarget<'_> {
    fn state(&self) -> &[f64] {
        &self.z
    }

    fn is_free(&self, _k: usize) -> bool {
        true
    }

    fn propose(&mut self, k: usize, delta: f64) -> f64 {
        let d = self.data.n_features();
        let mut dlik = 0.0;
        for (i, x) in self.data.rows().enumerate() {
            let step = if k < d { delta * x[k] } else { delta };
            let eta = self.eta[i] + step;
            let sp = softplus(eta);
            dlik += self.data.label(i) * step - (sp - self.sp[i]);
            self.pending_eta[i] = eta;
            self.pending_sp[i] = sp;
        }
        let old = self.z[k];
        let new = old + delta;
        self.pending_k = Some(k);
        self.pending_delta = delta;
        dlik - 0.5 * self.inv_var * (new * new - old * old)
    }

    fn commit(&mut self) {
        if let Some(k) = self.pending_k.take() {
            self.z[k] += self.pending_delta;
            std::mem::swap(&mut self.eta, &mut self.pending_eta);
            std::mem::swap(&mut self.sp, &mut self.pending_sp);
        }
    }

    fn refresh(&mut self) {
        let d = self.data.n_features();
        let (w, b0) = (&self.z[..d], self.z[d]);
        for (i, x) in self.data.rows().enumerate() {
            self.eta[i] = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b0;
            self.sp[i] = softplus(self.eta[i]);
        }
    }

    fn natural_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.z);
    }

    fn log_density(&self) -> f64 {
        let lik: f64 = self
            .eta
            .iter()
            .zip(&self.sp)
            .zip(self.data.labels())
            .map(|((e, s), y)| y * e - s)
            .sum();
        lik - 0.5 * self.inv_var * self.z.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Sample the sparse linear regression posterior
/// `Π N(y_i | θᵀx_i + θ_0, τ²) · Π Laplace(θ_j | 0, b) · Gamma(b | 1, 1) · HalfNormal(τ | c)`.
///
/// An empty `train` samples the prior.
pub fn sample_blr(train: &Dataset, prior: PriorConfigRegression, mcmc: McmcConfig) -> Result<PosteriorDraws> {
    prior.validate()?;
    let mut target = RegressionTarget::new(train, prior);
    let (draws, acc, diag) = run_chain(&mut target, &mcmc)?;
    PosteriorDraws::assemble(draws, train.n_features(), ModelKind::SparseLinear, acc, mcmc, diag)
}

/// Sample the Bayesian logistic regression posterior with Gaussian priors.
pub fn sample_blogistic(train: &Dataset, prior: PriorConfigLogistic, mcmc: McmcConfig) -> Result<PosteriorDraws> {
    if !(prior.weight_sd > 0.0) {
        return Err(invalid("weight_sd must be positive"));
    }
    if train.labels().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(invalid("logistic model needs 0/1 labels"));
    }
    let mut target = LogisticTarget::new(train, prior);
    let (draws, acc, diag) = run_chain(&mut target, &mcmc)?;
    PosteriorDraws::assemble(draws, train.n_features(), ModelKind::Logistic, acc, mcmc, diag)
}

/// Log density of a `N(mu, sd²)` at `y`.
pub fn normal_log_density(y: f64, mu: f64, sd: f64) -> f64 {
    let z = (y - mu) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synthetic_regression, TaskKind};

    fn empty(d: usize, task: TaskKind) -> Dataset {
        Dataset::new(vec![], vec![], d, (0..d).map(|j| format!("x{j}")).collect(), task).unwrap()
    }

    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn loglik_examples() {
        let reg = PosteriorDraws::from_parameters(ModelKind::SparseLinear, 2, &[vec![0.0, 0.0, 0.0, 1.0, 1.0]]).unwrap();
        let l = loglik_per_draw(&reg, &[0.3, -2.0], 0.0).unwrap();
        assert!((l[0] + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);

        let reg = PosteriorDraws::from_parameters(ModelKind::SparseLinear, 2, &[vec![1.5, -0.5, 0.2, 1.0, 0.3]]).unwrap();
        let x = [0.4, 1.2];
        let y = 1.5 * 0.4 - 0.5 * 1.2 + 0.2;
        let l = loglik_per_draw(&reg, &x, y).unwrap();
        assert!((l[0] + (0.3 * (2.0 * PI).sqrt()).ln()).abs() < 1e-12);

        let logit = PosteriorDraws::from_parameters(ModelKind::Logistic, 3, &[vec![0.0; 4]]).unwrap();
        let l = loglik_per_draw(&logit, &[5.0, -1.0, 2.0], 1.0).unwrap();
        assert!((l[0] - 0.5f64.ln()).abs() < 1e-14);

        assert!(matches!(loglik_per_draw(&logit, &[1.0], 1.0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn loglik_is_floored() {
        let reg = PosteriorDraws::from_parameters(ModelKind::SparseLinear, 1, &[vec![0.0, 0.0, 1.0, 1e-3]]).unwrap();
        let l = loglik_per_draw(&reg, &[0.0], 50.0).unwrap();
        assert_eq!(l[0], LOG_DENSITY_FLOOR);
    }

    #[test]
    fn predictive_samples_collapse_and_are_seeded() {
        let params = vec![vec![2.0, 1.0, 1.0, 1e-9]; 20];
        let draws = PosteriorDraws::from_parameters(ModelKind::SparseLinear, 1, &params).unwrap();
        let s = predictive_samples(&draws, &[0.5], 3, 1).unwrap();
        assert_eq!(s.len(), 60);
        assert!(s.iter().all(|v| (v - 2.0).abs() < 1e-6));
        assert_eq!(s, predictive_samples(&draws, &[0.5], 3, 1).unwrap());
        let logit = PosteriorDraws::from_parameters(ModelKind::Logistic, 1, &[vec![0.0, 0.0]]).unwrap();
        assert!(predictive_samples(&logit, &[0.0], 1, 0).is_err());
    }

    #[test]
    fn predictive_sample_mean_matches_mixture_mean() {
        let params: Vec<Vec<f64>> = (0..50).map(|t| vec![t as f64 / 25.0, -0.5, 1.0, 0.5 + t as f64 / 50.0]).collect();
        let draws = PosteriorDraws::from_parameters(ModelKind::SparseLinear, 1, &params).unwrap();
        let x = [1.3];
        let analytic = (0..50).map(|t| draws.linear_predictor(t, &x)).sum::<f64>() / 50.0;
        let s = predictive_samples(&draws, &x, 400, 5).unwrap();
        let m = mean(&s);
        let sd = (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt();
        assert!((m - analytic).abs() < 3.0 * sd / (s.len() as f64).sqrt());
    }

    #[test]
    fn rejects_bad_configs() {
        let data = synthetic_regression(20, &[1.0], 1.0, 0).unwrap();
        let bad = McmcConfig { burn_in: 100, total_iters: 100, ..McmcConfig::default() };
        assert!(sample_blr(&data, PriorConfigRegression::new(1.0), bad).is_err());
        assert!(sample_blr(&data, PriorConfigRegression::new(0.0), McmcConfig::desk()).is_err());
    }

    #[test]
    fn regression_prior_only_matches_prior_moments() {
        let mcmc = McmcConfig { total_iters: 40_000, burn_in: 2000, seed: 3, ..McmcConfig::default() };
        let c = 1.0;
        let draws = sample_blr(&empty(2, TaskKind::Regression), PriorConfigRegression::new(c), mcmc).unwrap();
        assert_eq!(draws.n_draws(), 38_000);
        for j in 0..2 {
            let col = draws.param_column(j);
            assert!(mean(&col).abs() < 3.0 * mcse_batch_means(&col), "theta{j}");
        }
        let b = draws.param_column(3);
        assert!((mean(&b) - 1.0).abs() < 3.0 * mcse_batch_means(&b), "b mean {}", mean(&b));
        let tau = draws.param_column(4);
        let expected = c * (2.0 / PI).sqrt();
        assert!((mean(&tau) - expected).abs() < 3.0 * mcse_batch_means(&tau), "tau mean {}", mean(&tau));
        assert!(tau.iter().all(|&t| t > 0.0));
    }

    #[test]
    fn steps_frozen_after_burn_in_and_chain_deterministic() {
        let data = synthetic_regression(60, &[1.0, -1.0], 0.5, 4).unwrap();
        let mcmc = McmcConfig::desk().with_seed(8);
        let a = sample_blr(&data, PriorConfigRegression::new(1.0), mcmc).unwrap();
        assert_eq!(a.diagnostics.steps_at_burn_in, a.diagnostics.steps_at_end);
        let b = sample_blr(&data, PriorConfigRegression::new(1.0), mcmc).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.n_draws(), 1500);
    }

    #[test]
    fn gaussian_prior_variant_matches_conjugate_ridge_posterior() {
        // Oracle: with θ ~ N(0, s²I) (intercept sd s0) and fixed τ, the posterior
        // mean is (XᵀX/τ² + Λ)⁻¹ Xᵀy/τ², here solved for a 3×3 augmented design.
        let data = synthetic_regression(25, &[0.8, -0.4], 0.7, 21).unwrap();
        let (s, tau) = (0.5, 0.7);
        let prior = PriorConfigRegression {
            weights: WeightPrior::Gaussian { sd: s },
            noise: NoisePrior::Fixed { tau },
            intercept_sd: 10.0,
        };
        let mcmc = McmcConfig { total_iters: 30_000, burn_in: 3000, seed: 2, ..McmcConfig::default() };
        let draws = sample_blr(&data, prior, mcmc).unwrap();
        let mut a = nalgebra::DMatrix::<f64>::zeros(3, 3);
        let mut rhs = nalgebra::DVector::<f64>::zeros(3);
        for (x, y) in data.rows().zip(data.labels()) {
            let v = nalgebra::DVector::from_vec(vec![x[0], x[1], 1.0]);
            a += &v * v.transpose() / (tau * tau);
            rhs += &v * (*y / (tau * tau));
        }
        a[(0, 0)] += 1.0 / (s * s);
        a[(1, 1)] += 1.0 / (s * s);
        a[(2, 2)] += 1.0 / 100.0;
        let exact = a.lu().solve(&rhs).unwrap();
        let m = draws.param_means();
        for k in 0..3 {
            assert!((m[k] - exact[k]).abs() < 0.05, "param {k}: {} vs {}", m[k], exact[k]);
        }
        assert!((m[3] - s).abs() < 1e-9 && (m[4] - tau).abs() < 1e-9);
    }

    #[test]
    fn recovers_strong_synthetic_signal() {
        let theta = [2.0, -1.0, 0.0, 0.5];
        let data = synthetic_regression(500, &theta, 0.5, 17).unwrap();
        let draws = sample_blr(&data, PriorConfigRegression::new(1.0), McmcConfig::desk().with_seed(1)).unwrap();
        let m = draws.param_means();
        for (k, t) in theta.iter().enumerate() {
            assert!((m[k] - t).abs() < 0.1, "theta{k}: {}", m[k]);
        }
        assert!((0.1..=0.6).contains(&draws.acceptance_rate), "{}", draws.acceptance_rate);
    }

    #[test]
    fn logistic_prior_only_and_symmetric_data() {
        let mcmc = McmcConfig { total_iters: 20_000, burn_in: 2000, seed: 5, ..McmcConfig::default() };
        let draws = sample_blogistic(&empty(2, TaskKind::Classification), PriorConfigLogistic::default(), mcmc).unwrap();
        for k in 0..3 {
            let col = draws.param_column(k);
            assert!(mean(&col).abs() < 3.0 * mcse_batch_means(&col));
        }
        let rows = vec![vec![0.0, 0.0]; 10];
        let labels = (0..10).map(|i| (i % 2) as f64).collect();
        let data = Dataset::from_rows(&rows, labels, TaskKind::Classification).unwrap();
        let draws = sample_blogistic(&data, PriorConfigLogistic::default(), mcmc).unwrap();
        let b0 = draws.param_column(2);
        assert!(mean(&b0).abs() < 3.0 * mcse_batch_means(&b0));
    }

    #[test]
    fn logistic_two_point_predictive_matches_grid_integration() {
        // Points x = -1 (label 0) and x = +1 (label 1), N(0, 0.5²) prior.
        let data = Dataset::from_rows(&[vec![-1.0], vec![1.0]], vec![0.0, 1.0], TaskKind::Classification).unwrap();
        let prior = PriorConfigLogistic { weight_sd: 0.5 };
        let mcmc = McmcConfig { total_iters: 30_000, burn_in: 2000, seed: 9, ..McmcConfig::default() };
        let draws = sample_blogistic(&data, prior, mcmc).unwrap();

        let log_post = |w: f64, b: f64| {
            let l0 = -softplus(-w + b); // label 0 at x=-1: log(1-σ(-w+b))
            let l1 = -softplus(-(w + b));
            l0 + l1 - 0.5 * (w * w + b * b) / 0.25
        };
        let (mut z, mut p_at) = (0.0, [0.0; 2]);
        let h = 0.01;
        for i in -400..=400 {
            for j in -400..=400 {
                let (w, b) = (i as f64 * h, j as f64 * h);
                let dens = log_post(w, b).exp();
                z += dens;
                for (k, x) in [-1.0f64, 1.0].iter().enumerate() {
                    p_at[k] += dens / (1.0 + (-(w * x + b)).exp());
                }
            }
        }
        for (k, x) in [-1.0f64, 1.0].iter().enumerate() {
            let oracle = p_at[k] / z;
            let at = draws.at(&[*x]).unwrap();
            let mc = at.log_lik(1.0).iter().map(|l| l.exp()).sum::<f64>() / draws.n_draws() as f64;
            assert!((mc - oracle).abs() < 0.02, "x={x}: {mc} vs {oracle}");
            assert_eq!(mc > 0.5, *x > 0.0);
        }
    }

    #[test]
    fn save_and_load_roundtrip() {
        let data = synthetic_regression(30, &[1.0], 1.0, 0).unwrap();
        let mcmc = McmcConfig { total_iters: 300, burn_in: 100, ..McmcConfig::default() };
        let draws = sample_blr(&data, PriorConfigRegression::new(1.0), mcmc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("draws");
        draws.save(&stem).unwrap();
        let back = PosteriorDraws::load(&stem).unwrap();
        assert_eq!(back.draws, draws.draws);
        assert_eq!(back.param_names, draws.param_names);
        assert_eq!(back.config, draws.config);
    }
}
