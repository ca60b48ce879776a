//! Exact log posterior of the cloglog exclusion GLMM and its analytic gradient.
//!
//! The unconstrained parameter vector is laid out as
//! `[intercept, log_alpha, qr_coefs.., log_tau, u..]`, where `intercept` is
//! `alpha * log L` expressed against centered columns
//! (`alpha log L - alpha * mean(log d) - gamma . mean(x)`), `qr_coefs`
//! are the QR-space coefficients of the covariate block (the linear-predictor
//! coefficients, which carry the `alpha` factor) and `u = alpha * epsilon` are
//! respondent effects on the linear-predictor scale with `u ~ N(0, tau^2)`,
//! `tau = alpha * sigma`. The prior on `sigma` is unchanged; the map
//! `(log alpha, log tau) -> (log alpha, log sigma)` has unit Jacobian.
//!
//! Effects on the kernel scale would let `alpha` trade against their spread:
//! raising `alpha` shrinks every `epsilon` by `1/alpha`, which the joint
//! density rewards by about `n_respondents * log alpha`. The marginal posterior
//! has no such term, so the joint mode, and the Gaussian built around it, would
//! be pulled towards large `alpha`. Without random effects the last two groups
//! are absent.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::covariates::DesignMatrix;
use crate::error::{Error, Result};

const ROW_CHUNK: usize = 2048;

/// Student-t density with location zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentT {
    pub df: f64,
    pub scale: f64,
}

impl StudentT {
    pub fn new(df: f64, scale: f64) -> Self {
        Self { df, scale }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let (v, s) = (self.df, self.scale);
        ln_gamma((v + 1.0) / 2.0) - ln_gamma(v / 2.0) - 0.5 * (v * std::f64::consts::PI).ln() - s.ln()
            - (v + 1.0) / 2.0 * (1.0 + (x / s).powi(2) / v).ln()
    }

    /// d/dx of `ln_pdf`.
    pub fn d_ln_pdf(&self, x: f64) -> f64 {
        let (v, s) = (self.df, self.scale);
        -(v + 1.0) * x / (v * s * s + x * x)
    }
}

/// Prior choices. `intercept` applies to `alpha * log L` measured against
/// centered columns, `coefficient` to every
/// QR-space coefficient (log distance included), `sigma` is folded at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub intercept: StudentT,
    pub coefficient: StudentT,
    pub sigma: StudentT,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            intercept: StudentT::new(3.0, 2.5),
            coefficient: StudentT::new(2.0, 2.5),
            sigma: StudentT::new(3.0, 2.5),
        }
    }
}

/// Positions of each parameter group in the unconstrained vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_features: usize,
    pub n_respondents: usize,
    pub random_effects: bool,
}

impl Layout {
    /// Centered `alpha * log L`.
    pub const INTERCEPT: usize = 0;
    pub const LOG_ALPHA: usize = 1;

    pub fn dim(&self) -> usize {
        2 + self.n_features + if self.random_effects { 1 + self.n_respondents } else { 0 }
    }

    pub fn coefs(&self) -> std::ops::Range<usize> {
        2..2 + self.n_features
    }

    /// Position of `log tau`, the log standard deviation of `u`.
    pub fn log_sigma(&self) -> Option<usize> {
        self.random_effects.then_some(2 + self.n_features)
    }

    pub fn epsilon(&self) -> std::ops::Range<usize> {
        match self.log_sigma() {
            Some(s) => s + 1..s + 1 + self.n_respondents,
            None => 0..0,
        }
    }

    pub fn names(&self, feature_names: &[String], respondent_ids: &[String]) -> Vec<String> {
        let mut names = vec!["centered_alpha_log_l".to_string(), "log_alpha".to_string()];
        names.extend(feature_names.iter().map(|f| format!("qr[{f}]")));
        if self.random_effects {
            names.push("log_tau".to_string());
            names.extend(respondent_ids.iter().map(|r| format!("u[{r}]")));
        }
        names
    }
}

/// Parameters on the natural scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    pub alpha: f64,
    /// `alpha * log L`.
    pub alpha_log_l: f64,
    /// Linear-predictor coefficients of the covariates (`alpha * beta`).
    pub coefficients: Vec<f64>,
    pub sigma: Option<f64>,
    /// Kernel-scale respondent effects.
    pub epsilon: Vec<f64>,
}

impl NaturalParams {
    pub fn length_scale(&self) -> f64 {
        (self.alpha_log_l / self.alpha).exp()
    }

    /// Kernel-scale covariate coefficients (`beta`).
    pub fn beta(&self) -> Vec<f64> {
        self.coefficients.iter().map(|g| g / self.alpha).collect()
    }

    /// Exclusion linear predictor `alpha log d - alpha log L + x.(alpha beta) + alpha eps`.
    pub fn linear_predictor(&self, log_spatial_dist: f64, features: &[f64], epsilon: f64) -> f64 {
        self.alpha * (log_spatial_dist + epsilon) - self.alpha_log_l
            + features.iter().zip(&self.coefficients).map(|(x, g)| x * g).sum::<f64>()
    }
}

/// Inclusion probability from the cloglog linear predictor: `exp(-exp(eta))`.
pub fn inclusion_from_eta(eta: f64) -> f64 {
    (-eta.exp()).exp()
}

/// Kernel inclusion probability `exp(-|d/L * exp(x.beta + eps)|^alpha)`.
pub fn inclusion_probability(
    log_spatial_dist: f64,
    features: &[f64],
    params: &NaturalParams,
    epsilon: f64,
) -> Result<f64> {
    let xb: f64 = features
        .iter()
        .zip(&params.coefficients)
        .map(|(x, g)| x * g / params.alpha)
        .sum();
    let d = log_spatial_dist.exp();
    let l = params.length_scale();
    let inner = d / l * (xb + epsilon).exp();
    if !inner.is_finite() || !params.alpha.is_finite() || params.alpha <= 0.0 {
        return Err(Error::NonFinite(format!(
            "kernel argument {inner} with alpha {}",
            params.alpha
        )));
    }
    Ok((-inner.abs().powf(params.alpha)).exp())
}

/// `log(1 - exp(-mu))` for `mu = exp(eta)`.
fn ln_exclusion(eta: f64) -> f64 {
    if eta < -700.0 {
        return eta;
    }
    let mu = eta.exp();
    if mu < std::f64::consts::LN_2 {
        (-(-mu).exp_m1()).ln()
    } else {
        (-(-mu).exp()).ln_1p()
    }
}

/// d/d eta of `ln_exclusion`: `mu / (exp(mu) - 1)`.
fn d_ln_exclusion(eta: f64) -> f64 {
    if eta < -700.0 {
        return 1.0;
    }
    let mu = eta.exp();
    if mu > 700.0 {
        // Underflows to zero anyway; avoids inf / inf.
        return 0.0;
    }
    mu / mu.exp_m1()
}

/// A row's log-likelihood and its first three derivatives in `eta`.
pub(crate) fn row_derivatives(eta: f64, excluded: bool) -> [f64; 4] {
    if !excluded {
        let mu = eta.exp();
        return [-mu, -mu, -mu, -mu];
    }
    let g = d_ln_exclusion(eta);
    if g == 0.0 {
        return [ln_exclusion(eta), 0.0, 0.0, 0.0];
    }
    let mu = eta.exp();
    let h = g * (1.0 - mu - g);
    [ln_exclusion(eta), g, h, h * (1.0 - mu - 2.0 * g) - g * mu]
}

/// The log posterior over one design.
#[derive(Clone, Debug)]
pub struct LogPosterior<'d> {
    pub(super) design: &'d DesignMatrix,
    pub(super) layout: Layout,
    priors: Priors,
    r00: f64,
    r0x: DVector<f64>,
    pub(super) rx_inv: DMatrix<f64>,
    pub(super) mean_log_dist: f64,
    pub(super) mean_x: Vec<f64>,
    pub(super) rows_by_respondent: Vec<Vec<usize>>,
}

impl<'d> LogPosterior<'d> {
    pub fn new(design: &'d DesignMatrix, random_effects: bool, priors: Priors) -> Self {
        let p = design.n_features();
        let layout = Layout {
            n_features: p,
            n_respondents: design.n_respondents(),
            random_effects,
        };
        let (r00, r0x, rx_inv) = match &design.qr {
            Some(qr) => (
                qr.r[(0, 0)],
                DVector::from_iterator(p, (1..=p).map(|j| qr.r[(0, j)])),
                qr.r_inv.view((1, 1), (p, p)).into_owned(),
            ),
            None => (1.0, DVector::zeros(p), DMatrix::identity(p, p)),
        };
        let (mean_log_dist, mean_x) = match design.centering.split_first() {
            Some((m0, mx)) if mx.len() == p => (*m0, mx.to_vec()),
            _ => (0.0, vec![0.0; p]),
        };
        let mut rows_by_respondent = vec![Vec::new(); design.n_respondents()];
        for (i, row) in design.rows.iter().enumerate() {
            rows_by_respondent[row.respondent_index].push(i);
        }
        Self {
            design,
            layout,
            priors,
            rows_by_respondent,
            r00,
            r0x,
            rx_inv,
            mean_log_dist,
            mean_x,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn design(&self) -> &DesignMatrix {
        self.design
    }

    pub fn priors(&self) -> &Priors {
        &self.priors
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Maps an unconstrained vector to natural-scale parameters.
    pub fn natural(&self, v: &[f64]) -> NaturalParams {
        let l = &self.layout;
        let theta = DVector::from_column_slice(&v[l.coefs()]);
        let coefficients = (&self.rx_inv * theta).as_slice().to_vec();
        let alpha = v[Layout::LOG_ALPHA].exp();
        NaturalParams {
            alpha,
            alpha_log_l: v[Layout::INTERCEPT] + self.centering_offset(alpha, &coefficients),
            coefficients,
            sigma: l.log_sigma().map(|i| (v[i] - v[Layout::LOG_ALPHA]).exp()),
            epsilon: v[l.epsilon()].iter().map(|u| u / alpha).collect(),
        }
    }

    /// Inverse of [`natural`](Self::natural).
    pub fn unconstrained(&self, params: &NaturalParams) -> Vec<f64> {
        let mut v = vec![
            params.alpha_log_l - self.centering_offset(params.alpha, &params.coefficients),
            params.alpha.ln(),
        ];
        let qr_x = match &self.design.qr {
            Some(qr) => {
                let p = self.layout.n_features;
                let rx = qr.r.view((1, 1), (p, p));
                (rx * DVector::from_column_slice(&params.coefficients)).as_slice().to_vec()
            }
            None => params.coefficients.clone(),
        };
        v.extend(qr_x);
        if self.layout.random_effects {
            v.push((params.sigma.unwrap_or(1.0) * params.alpha).ln());
            v.extend(params.epsilon.iter().map(|e| e * params.alpha));
        }
        v
    }

    /// `alpha * mean(log d) + gamma . mean(x)`: the gap between the natural and
    /// the centered intercept.
    fn centering_offset(&self, alpha: f64, coefficients: &[f64]) -> f64 {
        alpha * self.mean_log_dist + self.mean_x.iter().zip(coefficients).map(|(m, g)| m * g).sum::<f64>()
    }

    /// QR-space coefficient of the log-distance column.
    fn theta0(&self, alpha: f64, coefficients: &[f64]) -> f64 {
        self.r00 * alpha + self.r0x.iter().zip(coefficients).map(|(r, g)| r * g).sum::<f64>()
    }

    /// Log prior density of the unconstrained vector, including Jacobians.
    pub fn log_prior(&self, v: &[f64]) -> f64 {
        self.log_prior_and_gradient(v).0
    }

    pub fn log_prior_and_gradient(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let l = &self.layout;
        let pr = &self.priors;
        let mut grad = vec![0.0; l.dim()];
        let nat = self.natural(v);
        let a = v[Layout::INTERCEPT];
        let mut lp = pr.intercept.ln_pdf(a);
        grad[Layout::INTERCEPT] = pr.intercept.d_ln_pdf(a);

        let theta0 = self.theta0(nat.alpha, &nat.coefficients);
        let d0 = pr.coefficient.d_ln_pdf(theta0);
        lp += pr.coefficient.ln_pdf(theta0) + v[Layout::LOG_ALPHA];
        grad[Layout::LOG_ALPHA] = d0 * self.r00 * nat.alpha + 1.0;

        let coefs = l.coefs();
        let mut d_theta = (self.rx_inv.transpose() * (&self.r0x * d0)).as_slice().to_vec();
        for (k, j) in coefs.clone().enumerate() {
            lp += pr.coefficient.ln_pdf(v[j]);
            d_theta[k] += pr.coefficient.d_ln_pdf(v[j]);
        }
        grad[coefs].copy_from_slice(&d_theta);

        if let Some(si) = l.log_sigma() {
            let log_tau = v[si];
            let log_sigma = log_tau - v[Layout::LOG_ALPHA];
            let sigma = log_sigma.exp();
            // Half-t: twice the density on the positive axis.
            lp += std::f64::consts::LN_2 + pr.sigma.ln_pdf(sigma) + log_sigma;
            let d_log_sigma = pr.sigma.d_ln_pdf(sigma) * sigma + 1.0;
            grad[si] = d_log_sigma;
            grad[Layout::LOG_ALPHA] -= d_log_sigma;
            let inv_var = (-2.0 * log_tau).exp();
            let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
            for j in l.epsilon() {
                let u = v[j];
                lp += -0.5 * u * u * inv_var - log_tau - half_ln_2pi;
                grad[si] += u * u * inv_var - 1.0;
                grad[j] = -u * inv_var;
            }
        }
        (lp, grad)
    }

    fn row_eta(&self, nat: &NaturalParams, row: &crate::covariates::ObservationRow) -> f64 {
        let eps = nat.epsilon.get(row.respondent_index).copied().unwrap_or(0.0);
        nat.linear_predictor(row.log_spatial_dist, &row.features, eps)
    }

    /// Per-respondent kernel-scale effects maximizing the conditional
    /// likelihood with the other parameters held at `nat`, under a
    /// `N(0, ridge_sd^2)` penalty that keeps respondents with one-sided data
    /// finite.
    pub fn conditional_effects(&self, nat: &NaturalParams, ridge_sd: f64) -> Vec<f64> {
        self.effect_conditionals(nat, nat.alpha * ridge_sd)
            .into_iter()
            .map(|(u, _)| u / nat.alpha)
            .collect()
    }

    /// Mode and curvature (negative second derivative) of each respondent's
    /// conditional log density in `u = alpha * epsilon` under `N(0, tau^2)`,
    /// with the global parameters taken from `nat` (its effects are ignored).
    /// Each problem is concave in one variable; Newton steps are kept inside a
    /// bracket that shrinks with the sign of the derivative.
    pub fn effect_conditionals(&self, nat: &NaturalParams, tau: f64) -> Vec<(f64, f64)> {
        let inv_var = tau.powi(-2);
        self.rows_by_respondent
            .par_iter()
            .map(|rows| {
                let eta0: Vec<(f64, bool)> = rows
                    .iter()
                    .map(|&i| {
                        let row = &self.design.rows[i];
                        (nat.linear_predictor(row.log_spatial_dist, &row.features, 0.0), row.excluded)
                    })
                    .collect();
                let derivs = |u: f64| {
                    let (mut d1, mut d2) = (-u * inv_var, -inv_var);
                    for &(eta, excluded) in &eta0 {
                        let d = row_derivatives(eta + u, excluded);
                        d1 += d[1];
                        d2 += d[2];
                    }
                    (d1, d2)
                };
                let (mut lo, mut hi) = (-1.0, 1.0);
                while derivs(lo).0 < 0.0 && lo > -1e6 {
                    lo *= 2.0;
                }
                while derivs(hi).0 > 0.0 && hi < 1e6 {
                    hi *= 2.0;
                }
                let mut u = 0.0f64.clamp(lo, hi);
                for _ in 0..100 {
                    let (d1, d2) = derivs(u);
                    if d1 > 0.0 {
                        lo = u;
                    } else {
                        hi = u;
                    }
                    let mut next = u - d1 / d2;
                    if !(next > lo && next < hi) {
                        next = 0.5 * (lo + hi);
                    }
                    if (next - u).abs() < 1e-12 * (1.0 + u.abs()) {
                        u = next;
                        break;
                    }
                    u = next;
                }
                (u, -derivs(u).1)
            })
            .collect()
    }

    /// Bernoulli log-likelihood of the exclusion indicators.
    pub fn log_likelihood(&self, v: &[f64]) -> f64 {
        let nat = self.natural(v);
        let partial: Vec<f64> = self
            .design
            .rows
            .par_chunks(ROW_CHUNK)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|row| {
                        let eta = self.row_eta(&nat, row);
                        if row.excluded {
                            ln_exclusion(eta)
                        } else {
                            -eta.exp()
                        }
                    })
                    .sum::<f64>()
            })
            .collect();
        partial.iter().sum()
    }

    pub fn log_likelihood_and_gradient(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let l = &self.layout;
        let p = l.n_features;
        let nat = self.natural(v);
        let alpha = nat.alpha;
        let eps_range = l.epsilon();
        let n_eps = eps_range.len();

        struct Acc {
            ll: f64,
            d_a: f64,
            d_log_alpha: f64,
            d_gamma: Vec<f64>,
            d_eps: Vec<f64>,
        }

        let partial: Vec<Acc> = self
            .design
            .rows
            .par_chunks(ROW_CHUNK)
            .map(|chunk| {
                let mut acc = Acc {
                    ll: 0.0,
                    d_a: 0.0,
                    d_log_alpha: 0.0,
                    d_gamma: vec![0.0; p],
                    d_eps: vec![0.0; n_eps],
                };
                for row in chunk {
                    let eps = nat.epsilon.get(row.respondent_index).copied().unwrap_or(0.0);
                    let eta = nat.linear_predictor(row.log_spatial_dist, &row.features, eps);
                    let (ll, g) = if row.excluded {
                        (ln_exclusion(eta), d_ln_exclusion(eta))
                    } else {
                        let mu = eta.exp();
                        (-mu, -mu)
                    };
                    acc.ll += ll;
                    acc.d_a -= g;
                    // `alpha * eps` is the free parameter `u`, constant in alpha.
                    acc.d_log_alpha += g * alpha * (row.log_spatial_dist - self.mean_log_dist);
                    for ((d, x), m) in acc.d_gamma.iter_mut().zip(&row.features).zip(&self.mean_x) {
                        *d += g * (x - m);
                    }
                    if n_eps > 0 {
                        acc.d_eps[row.respondent_index] += g;
                    }
                }
                acc
            })
            .collect();

        let mut grad = vec![0.0; l.dim()];
        let mut ll = 0.0;
        let mut d_gamma = DVector::zeros(p);
        for acc in &partial {
            ll += acc.ll;
            grad[Layout::INTERCEPT] += acc.d_a;
            grad[Layout::LOG_ALPHA] += acc.d_log_alpha;
            for (k, d) in acc.d_gamma.iter().enumerate() {
                d_gamma[k] += d;
            }
            for (k, d) in acc.d_eps.iter().enumerate() {
                grad[eps_range.start + k] += d;
            }
        }
        let d_theta = self.rx_inv.transpose() * d_gamma;
        grad[l.coefs()].copy_from_slice(d_theta.as_slice());
        (ll, grad)
    }

    pub fn log_posterior(&self, v: &[f64]) -> f64 {
        self.log_likelihood(v) + self.log_prior(v)
    }

    /// Log posterior and its gradient in the unconstrained parameterization.
    pub fn value_and_gradient(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let (ll, mut g) = self.log_likelihood_and_gradient(v);
        let (lp, gp) = self.log_prior_and_gradient(v);
        for (a, b) in g.iter_mut().zip(gp) {
            *a += b;
        }
        (ll + lp, g)
    }

    pub fn gradient(&self, v: &[f64]) -> Vec<f64> {
        self.value_and_gradient(v).1
    }
}

/// Standalone log posterior with the default priors.
pub fn log_posterior(v: &[f64], design: &DesignMatrix, random_effects: bool) -> f64 {
    LogPosterior::new(design, random_effects, Priors::default()).log_posterior(v)
}

/// Standalone gradient with the default priors.
pub fn gradient(v: &[f64], design: &DesignMatrix, random_effects: bool) -> Vec<f64> {
    LogPosterior::new(design, random_effects, Priors::default()).gradient(v)
}
