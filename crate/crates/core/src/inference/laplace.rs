//! Gaussian approximation at the posterior mode, corrected by importance
//! resampling against the exact posterior.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optimize::{bfgs_preconditioned, BfgsOptions};
use super::marginal::MarginalPosterior;
use super::posterior::{Layout, LogPosterior, NaturalParams, Priors};
use crate::covariates::{DesignMatrix, ModelSpec};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::stats::Summary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub seed: u64,
    pub n_draws: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Step for the finite-difference Hessian of the analytic gradient.
    pub hessian_step: f64,
    /// Effective sample sizes below this raise a warning.
    pub ess_floor: f64,
    pub random_effects: bool,
    /// Draw proposal points in `mode +/- z` pairs.
    pub antithetic: bool,
    pub proposal: Proposal,
    pub priors: Priors,
}

/// Where the Gaussian proposal comes from when the model has respondent effects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposal {
    /// Mode and inverse curvature of the joint posterior over every parameter.
    Joint,
    /// Mode and inverse curvature of the global parameters' Laplace-marginal
    /// posterior; each effect is then drawn from its own Gaussian at the
    /// conditional mode and curvature given the drawn globals. Follows how
    /// the effects' spread depends on `sigma`, which a single Gaussian cannot.
    #[default]
    Marginal,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_draws: 1000,
            max_iter: 500,
            grad_tol: 1e-6,
            hessian_step: 1e-4,
            ess_floor: 50.0,
            random_effects: true,
            antithetic: true,
            proposal: Proposal::default(),
            priors: Priors::default(),
        }
    }
}

/// Coefficients on the QR scale beyond this magnitude at the mode are flagged:
/// ten prior scales out, the likelihood is close to separable in that direction.
const DIVERGENT_QR: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Ridge added to the negative Hessian before it factored (0 when none).
    pub hessian_jitter: f64,
    pub ess: f64,
    pub ess_floor: f64,
    /// Parameters whose mode sits implausibly far out on the QR scale.
    pub divergent: Vec<String>,
    pub warnings: Vec<String>,
}

/// Fitted posterior: mode, proposal, importance weights and resampled draws.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorApprox {
    pub spec: ModelSpec,
    pub feature_names: Vec<String>,
    pub respondent_ids: Vec<String>,
    pub layout: Layout,
    pub config: FitConfig,
    pub parameter_names: Vec<String>,
    /// Mode of the unconstrained log posterior.
    pub mode: Vec<f64>,
    pub mode_natural: NaturalParams,
    pub mode_log_posterior: f64,
    /// Square-root factor `A` of the proposal covariance (`A A^T`).
    #[serde(skip)]
    pub covariance_factor: Option<DMatrix<f64>>,
    /// Proposal draws mapped to the natural scale.
    pub draws: Vec<NaturalParams>,
    /// Unnormalized log importance weights `log p - log q`.
    pub log_weights: Vec<f64>,
    /// Normalized importance weights.
    pub weights: Vec<f64>,
    /// Systematic resample of `draws` by `weights`.
    pub resampled: Vec<usize>,
    pub summaries: BTreeMap<String, Summary>,
    pub diagnostics: Diagnostics,
    /// Coefficients are reported on the linear-predictor (`alpha * beta`) scale.
    pub effect_scale: String,
}

impl PosteriorApprox {
    /// Resampled natural-scale draws, i.e. approximately exact posterior draws.
    pub fn resampled_draws(&self) -> impl Iterator<Item = &NaturalParams> + '_ {
        self.resampled.iter().map(|&i| &self.draws[i])
    }

    pub fn ess(&self) -> f64 {
        self.diagnostics.ess
    }

    pub fn respondent_index(&self, id: &str) -> Option<usize> {
        self.respondent_ids.iter().position(|r| r == id)
    }

    pub fn summary(&self, name: &str) -> Option<&Summary> {
        self.summaries.get(name)
    }

    /// A degenerate posterior concentrated on one parameter value, for
    /// simulating from known parameters.
    pub fn point_mass(spec: ModelSpec, feature_names: Vec<String>, params: NaturalParams) -> Self {
        let layout = Layout {
            n_features: feature_names.len(),
            n_respondents: 0,
            random_effects: params.sigma.is_some(),
        };
        let draws = vec![NaturalParams {
            epsilon: Vec::new(),
            ..params.clone()
        }];
        let summaries = summarize(&feature_names, &draws, &[0]);
        Self {
            spec,
            parameter_names: layout.names(&feature_names, &[]),
            feature_names,
            respondent_ids: Vec::new(),
            layout,
            config: FitConfig {
                n_draws: 1,
                ..FitConfig::default()
            },
            mode: Vec::new(),
            mode_natural: params,
            mode_log_posterior: f64::NAN,
            covariance_factor: None,
            draws,
            log_weights: vec![0.0],
            weights: vec![1.0],
            resampled: vec![0],
            summaries,
            diagnostics: Diagnostics {
                converged: true,
                iterations: 0,
                grad_norm: 0.0,
                hessian_jitter: 0.0,
                ess: 1.0,
                ess_floor: 0.0,
                divergent: Vec::new(),
                warnings: Vec::new(),
            },
            effect_scale: EFFECT_SCALE.to_string(),
        }
    }

    /// Re-targets the importance weights at a posterior whose log density
    /// differs by `log_density_change` (for instance a different prior),
    /// without refitting. Resampling uses a fresh stream of the fit seed.
    pub fn reweight<F>(&self, log_density_change: F) -> Self
    where
        F: Fn(&NaturalParams) -> f64,
    {
        let log_weights: Vec<f64> = self
            .draws
            .iter()
            .zip(&self.log_weights)
            .map(|(d, lw)| lw + log_density_change(d))
            .collect();
        let weights = normalize(&log_weights);
        let ess = effective_sample_size(&weights);
        let mut rng = stream(self.config.seed, Stream::Fit, &[1]);
        let resampled = systematic_resample(&weights, self.draws.len(), rng.random());
        let mut out = self.clone();
        out.summaries = summarize(&self.feature_names, &self.draws, &resampled);
        out.log_weights = log_weights;
        out.weights = weights;
        out.resampled = resampled;
        out.diagnostics.ess = ess;
        out.diagnostics.warnings.retain(|w| !w.starts_with("effective sample size"));
        if let Some(w) = ess_warning(ess, self.config.ess_floor) {
            out.diagnostics.warnings.push(w);
        }
        out
    }
}

const EFFECT_SCALE: &str = "linear_predictor: coefficients are alpha*beta on the exclusion cloglog scale";

/// Mode of a log density and the Gaussian built from its curvature there.
struct ModeFit {
    x: Vec<f64>,
    iterations: usize,
    grad_norm: f64,
    /// `A` with `A A^T` the inverse negative Hessian.
    factor: DMatrix<f64>,
    log_det_factor: f64,
    jitter: f64,
}

fn find_mode<F, G>(value_and_gradient: F, gradient: G, x0: Vec<f64>, config: &FitConfig) -> Result<ModeFit>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let n = x0.len();
    let opts = bfgs_options(config);
    // Precondition with the curvature at the start: the intercept is strongly
    // coupled to the covariates, which defeats an identity start.
    let h0 = inverse_negative_hessian(&gradient, &x0, config.hessian_step);
    let neg = |v: &[f64]| {
        let (f, g) = value_and_gradient(v);
        (-f, g.into_iter().map(|x| -x).collect())
    };
    let min = bfgs_preconditioned(neg, x0, h0, opts);
    if !min.converged || !min.value.is_finite() {
        return Err(Error::NonConvergence {
            iterations: min.iterations,
            grad_norm: min.grad_norm(),
        });
    }
    let (precision_chol, jitter) = factor_with_jitter(negative_hessian(&gradient, &min.x, config.hessian_step))?;
    // With precision = L L^T, the factor A = L^-T satisfies A A^T = precision^-1.
    let factor = precision_chol
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::NonFinite("singular precision factor".into()))?;
    Ok(ModeFit {
        iterations: min.iterations,
        grad_norm: min.grad_norm(),
        log_det_factor: factor.diagonal().iter().map(|d| d.ln()).sum(),
        factor,
        jitter,
        x: min.x,
    })
}

fn bfgs_options(config: &FitConfig) -> BfgsOptions {
    BfgsOptions {
        max_iter: config.max_iter,
        grad_tol: config.grad_tol,
        ..BfgsOptions::default()
    }
}

/// Fits the model to an assembled design.
pub fn fit(design: &DesignMatrix, config: &FitConfig) -> Result<PosteriorApprox> {
    if config.n_draws == 0 {
        return Err(Error::Invalid("n_draws must be positive".into()));
    }
    let post = LogPosterior::new(design, config.random_effects, config.priors);
    let layout = post.layout().clone();
    let dim = layout.dim();

    let x0 = initial_point(&post, config)?;
    let marginal = match config.proposal {
        Proposal::Marginal => MarginalPosterior::new(&post),
        Proposal::Joint => None,
    };
    let found = match &marginal {
        Some(m) => find_mode(
            |t| m.value_and_gradient(t),
            |t| m.gradient(t),
            x0[..m.n_global()].to_vec(),
            config,
        )?,
        None => find_mode(|v| post.value_and_gradient(v), |v| post.gradient(v), x0, config)?,
    };
    let mode = match &marginal {
        Some(m) => m.complete(&found.x).0,
        None => found.x.clone(),
    };
    let factor = &found.factor;
    let n_gauss = found.x.len();

    let mut rng = stream(config.seed, Stream::Fit, &[0]);
    let mut zs: Vec<DVector<f64>> = Vec::with_capacity(config.n_draws);
    while zs.len() < config.n_draws {
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        if config.antithetic && zs.len() + 1 < config.n_draws {
            zs.push(-&z);
        }
        zs.push(z);
    }

    let center = DVector::from_column_slice(&found.x);
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let evaluated: Vec<(NaturalParams, f64)> = zs
        .par_iter()
        .map(|z| {
            let zg = z.rows(0, n_gauss);
            let mut v = (&center + factor * zg).as_slice().to_vec();
            let mut log_q = -0.5 * zg.norm_squared() - found.log_det_factor - n_gauss as f64 * half_ln_2pi;
            if let Some(si) = layout.log_sigma().filter(|_| marginal.is_some()) {
                v.resize(dim, 0.0);
                let nat = post.natural(&v);
                for (k, (u_hat, curvature)) in post.effect_conditionals(&nat, v[si].exp()).into_iter().enumerate() {
                    let zu = z[n_gauss + k];
                    let sd = curvature.sqrt().recip();
                    v[n_gauss + k] = u_hat + sd * zu;
                    log_q += -0.5 * zu * zu - sd.ln() - half_ln_2pi;
                }
            }
            let log_p = post.log_posterior(&v);
            let lw = if log_p.is_finite() && log_q.is_finite() {
                log_p - log_q
            } else {
                f64::NEG_INFINITY
            };
            (post.natural(&v), lw)
        })
        .collect();
    let (draws, log_weights): (Vec<_>, Vec<_>) = evaluated.into_iter().unzip();
    if log_weights.iter().all(|w| !w.is_finite()) {
        return Err(Error::NonFinite("every proposal draw has zero posterior density".into()));
    }
    let weights = normalize(&log_weights);
    let ess = effective_sample_size(&weights);
    let resampled = systematic_resample(&weights, config.n_draws, rng.random());

    let parameter_names = layout.names(&design.feature_names, &design.respondent_ids);
    let divergent: Vec<String> = layout
        .coefs()
        .filter(|&j| mode[j].abs() > DIVERGENT_QR)
        .map(|j| parameter_names[j].clone())
        .collect();
    let mut warnings = Vec::new();
    if let Some(w) = ess_warning(ess, config.ess_floor) {
        warnings.push(w);
    }
    if !divergent.is_empty() {
        warnings.push(format!("possibly separable directions: {}", divergent.join(", ")));
    }

    Ok(PosteriorApprox {
        spec: design.spec,
        feature_names: design.feature_names.clone(),
        respondent_ids: design.respondent_ids.clone(),
        layout,
        config: *config,
        parameter_names,
        mode_natural: post.natural(&mode),
        mode_log_posterior: post.log_posterior(&mode),
        mode,
        covariance_factor: Some(found.factor),
        summaries: summarize(&design.feature_names, &draws, &resampled),
        draws,
        log_weights,
        weights,
        resampled,
        diagnostics: Diagnostics {
            converged: true,
            iterations: found.iterations,
            grad_norm: found.grad_norm,
            hessian_jitter: found.jitter,
            ess,
            ess_floor: config.ess_floor,
            divergent,
            warnings,
        },
        effect_scale: EFFECT_SCALE.to_string(),
    })
}

/// Starting point for the joint optimization. Without respondent effects this
/// is the origin. With them, the joint posterior has an unbounded spike at
/// `sigma -> 0, epsilon -> 0`, and the useful local mode is only reachable
/// from nearby: fit the fixed part first, profile each respondent's effect
/// given it, and start `sigma` at their root mean square.
fn initial_point(post: &LogPosterior<'_>, config: &FitConfig) -> Result<Vec<f64>> {
    let layout = post.layout();
    if layout.log_sigma().is_none() {
        return Ok(vec![0.0; layout.dim()]);
    }
    let fixed_post = LogPosterior::new(post.design(), false, *post.priors());
    let fixed = find_mode(
        |v| fixed_post.value_and_gradient(v),
        |v| fixed_post.gradient(v),
        vec![0.0; fixed_post.dim()],
        config,
    )?;
    let mut nat = fixed_post.natural(&fixed.x);
    nat.epsilon = post.conditional_effects(&nat, 1.0);
    let rms = (nat.epsilon.iter().map(|e| e * e).sum::<f64>() / nat.epsilon.len().max(1) as f64).sqrt();
    nat.sigma = Some(rms.max(MIN_START_SIGMA));
    Ok(post.unconstrained(&nat))
}

const MIN_START_SIGMA: f64 = 0.05;

fn inverse_negative_hessian<G>(gradient: &G, x: &[f64], step: f64) -> Option<Vec<f64>>
where
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let dim = x.len();
    factor_with_jitter(negative_hessian(gradient, x, step))
        .ok()
        .and_then(|(l, _)| {
            let inv = l.transpose().solve_upper_triangular(&DMatrix::identity(dim, dim))?;
            let h = &inv * inv.transpose();
            Some(h.transpose().as_slice().to_vec())
        })
}

/// Central finite differences of the analytic gradient, symmetrized.
fn negative_hessian<G>(gradient: &G, x: &[f64], h: f64) -> DMatrix<f64>
where
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let n = x.len();
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let gp = gradient(&xp);
            let gm = gradient(&xm);
            gp.iter().zip(&gm).map(|(a, b)| -(a - b) / (2.0 * h)).collect()
        })
        .collect();
    let m = DMatrix::from_fn(n, n, |i, j| columns[j][i]);
    (&m + m.transpose()) * 0.5
}

/// Cholesky of `m`, adding `1e-8 I` and escalating tenfold until it factors.
fn factor_with_jitter(m: DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Hessian at the mode".into()));
    }
    if let Some(c) = m.clone().cholesky() {
        return Ok((c.l(), 0.0));
    }
    let n = m.nrows();
    let mut jitter = 1e-8;
    while jitter < 1e8 {
        let jittered = &m + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(c) = jittered.cholesky() {
            return Ok((c.l(), jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::NonFinite("Hessian could not be made positive definite".into()))
}

fn normalize(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// `1 / sum w^2` for normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

fn ess_warning(ess: f64, floor: f64) -> Option<String> {
    (ess < floor).then(|| {
        format!("effective sample size {ess:.1} is below {floor}; the Gaussian approximation may be poor")
    })
}

/// Systematic resampling with a single uniform offset `u` in `[0, 1)`.
pub fn systematic_resample(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut i = 0;
    for k in 0..n {
        let target = (k as f64 + u) / n as f64;
        while i + 1 < weights.len() && cumulative + weights[i] <= target {
            cumulative += weights[i];
            i += 1;
        }
        out.push(i);
    }
    out
}

fn summarize(
    feature_names: &[String],
    draws: &[NaturalParams],
    resampled: &[usize],
) -> BTreeMap<String, Summary> {
    let pick = |f: &dyn Fn(&NaturalParams) -> f64| -> Vec<f64> {
        resampled.iter().map(|&i| f(&draws[i])).collect()
    };
    let mut out = BTreeMap::new();
    out.insert("alpha".to_string(), Summary::of(&pick(&|d| d.alpha)));
    out.insert("alpha_log_l".to_string(), Summary::of(&pick(&|d| d.alpha_log_l)));
    out.insert("length_scale".to_string(), Summary::of(&pick(&|d| d.length_scale())));
    if draws.first().is_some_and(|d| d.sigma.is_some()) {
        out.insert(
            "sigma".to_string(),
            Summary::of(&pick(&|d| d.sigma.unwrap_or(f64::NAN))),
        );
    }
    for (j, name) in feature_names.iter().enumerate() {
        out.insert(name.clone(), Summary::of(&pick(&|d| d.coefficients[j])));
    }
    out
}
