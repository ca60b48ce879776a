//! The posterior of the global parameters with each respondent effect
//! integrated out by its own one-dimensional Laplace approximation.
//!
//! The joint posterior over globals and effects has no useful mode: it is
//! unbounded as `tau -> 0` with every effect at zero, and its local mode sits
//! away from the marginal one. Integrating the effects out removes both
//! problems and leaves a few dozen parameters, the globals
//! `[intercept, log_alpha, qr_coefs.., log_tau]`.

use nalgebra::DVector;
use rayon::prelude::*;

use super::posterior::{row_derivatives, LogPosterior};

pub struct MarginalPosterior<'p, 'd> {
    post: &'p LogPosterior<'d>,
    n_global: usize,
}

/// Conditional mode and curvature of one respondent effect.
pub type EffectConditional = (f64, f64);

impl<'p, 'd> MarginalPosterior<'p, 'd> {
    /// `None` when the model has no respondent effects.
    pub fn new(post: &'p LogPosterior<'d>) -> Option<Self> {
        let si = post.layout().log_sigma()?;
        Some(Self { post, n_global: si + 1 })
    }

    pub fn n_global(&self) -> usize {
        self.n_global
    }

    /// The full parameter vector with effects at their conditional modes.
    pub fn complete(&self, theta: &[f64]) -> (Vec<f64>, Vec<EffectConditional>) {
        let mut v = theta.to_vec();
        v.resize(self.post.dim(), 0.0);
        let nat = self.post.natural(&v);
        let conds = self.post.effect_conditionals(&nat, theta[self.n_global - 1].exp());
        for (k, (u, _)) in conds.iter().enumerate() {
            v[self.n_global + k] = *u;
        }
        (v, conds)
    }

    fn laplace_term(conds: &[EffectConditional]) -> f64 {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        conds.iter().map(|(_, h)| half_ln_2pi - 0.5 * h.ln()).sum()
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let (v, conds) = self.complete(theta);
        self.post.log_posterior(&v) + Self::laplace_term(&conds)
    }

    /// Value and analytic gradient. The joint density contributes its partial
    /// derivatives at the conditional modes (they are stationary in the
    /// effects); the log-curvature terms need the modes' and curvatures'
    /// sensitivity to the globals, which involves third derivatives of the
    /// row likelihood.
    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let post = self.post;
        let ng = self.n_global;
        let log_tau = theta[ng - 1];
        let inv_var = (-2.0 * log_tau).exp();
        let (v, conds) = self.complete(theta);
        let (lp, full_grad) = post.value_and_gradient(&v);
        let nat = post.natural(&v);
        let p = post.layout().n_features;
        let design = post.design;

        // Directions: [intercept, log_alpha, gamma..], then log_tau.
        let per: Vec<(Vec<f64>, f64)> = post
            .rows_by_respondent
            .par_iter()
            .zip(&conds)
            .map(|(rows, &(u, h))| {
                let mut s2 = vec![0.0; 2 + p];
                let mut s3 = vec![0.0; 2 + p];
                let mut t3 = 0.0;
                for &i in rows {
                    let row = &design.rows[i];
                    let eta = nat.linear_predictor(row.log_spatial_dist, &row.features, 0.0) + u;
                    let d = row_derivatives(eta, row.excluded);
                    let jac_alpha = nat.alpha * (row.log_spatial_dist - post.mean_log_dist);
                    s2[0] -= d[2];
                    s3[0] -= d[3];
                    s2[1] += d[2] * jac_alpha;
                    s3[1] += d[3] * jac_alpha;
                    for (k, (x, m)) in row.features.iter().zip(&post.mean_x).enumerate() {
                        s2[2 + k] += d[2] * (x - m);
                        s3[2 + k] += d[3] * (x - m);
                    }
                    t3 += d[3];
                }
                // d u / d dir = s2 / h; d h / d dir = -s3 - t3 * du.
                let du_tau = 2.0 * u * inv_var / h;
                let dh_tau = -t3 * du_tau - 2.0 * inv_var;
                let dir: Vec<f64> = s2
                    .iter()
                    .zip(&s3)
                    .map(|(a, b)| -0.5 * (-b - t3 * a / h) / h)
                    .collect();
                (dir, -0.5 * dh_tau / h)
            })
            .collect();

        let mut dir = vec![0.0; 2 + p];
        let mut d_tau = 0.0;
        for (d, t) in &per {
            for (a, b) in dir.iter_mut().zip(d) {
                *a += b;
            }
            d_tau += t;
        }
        let mut grad = full_grad[..ng].to_vec();
        grad[0] += dir[0];
        grad[1] += dir[1];
        let d_theta = post.rx_inv.transpose() * DVector::from_column_slice(&dir[2..]);
        for (k, g) in d_theta.iter().enumerate() {
            grad[2 + k] += g;
        }
        grad[ng - 1] += d_tau;
        (lp + Self::laplace_term(&conds), grad)
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.value_and_gradient(theta).1
    }
}
