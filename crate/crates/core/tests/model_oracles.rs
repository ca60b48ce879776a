//! QR reparameterization and the log posterior against independent
//! re-implementations.

use nalgebra::DVector;
use nbhd::covariates::{qr_reparameterize, DesignMatrix, ModelSpec, ObservationRow};
use nbhd::inference::{LogPosterior, Priors};
use nbhd::rng::{stream, Stream};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_rows(seed: u64, n_resp: usize, rows_per: usize, p: usize) -> DesignMatrix {
    let mut rng = stream(seed, Stream::Sample, &[31]);
    let mut rows = Vec::new();
    for r in 0..n_resp {
        for b in 0..rows_per {
            rows.push(ObservationRow {
                respondent_index: r,
                block: b,
                excluded: rng.random::<f64>() < 0.35,
                log_spatial_dist: rng.random_range(3.0..8.0),
                features: (0..p)
                    .map(|j| {
                        if j % 3 == 0 {
                            (rng.random::<f64>() < 0.3) as u8 as f64
                        } else {
                            rng.random_range(-2.0..2.0)
                        }
                    })
                    .collect(),
            });
        }
    }
    DesignMatrix {
        spec: ModelSpec::default(),
        feature_names: (0..p).map(|j| format!("x{j}")).collect(),
        respondent_ids: (0..n_resp).map(|r| format!("r{r}")).collect(),
        rows,
        centering: vec![],
        qr: None,
    }
}

#[test]
fn qr_round_trip_on_500_by_12() {
    let design = qr_reparameterize(random_rows(1, 50, 10, 11)).unwrap();
    assert_eq!(design.rows.len(), 500);
    let qr = design.qr.as_ref().unwrap();
    let mut rng = stream(2, Stream::Sample, &[1]);
    for _ in 0..100 {
        let natural: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let back = qr.to_natural(&qr.to_qr(&natural));
        let err = natural.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "round-trip error {err}");
    }
}

#[test]
fn qr_basis_is_orthogonal_and_scaled() {
    let design = qr_reparameterize(random_rows(3, 40, 10, 6)).unwrap();
    let q = &design.qr.as_ref().unwrap().q;
    let n = design.rows.len() as f64;
    let gram = q.transpose() * q;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let want = if i == j { n - 1.0 } else { 0.0 };
            assert!((gram[(i, j)] - want).abs() < 1e-8 * n, "gram[{i},{j}] = {}", gram[(i, j)]);
        }
    }
}

proptest! {
    #[test]
    fn linear_predictor_same_in_qr_and_natural_space(
        seed in 0u64..500,
        intercept in -5.0f64..5.0,
        coefs in proptest::collection::vec(-3.0f64..3.0, 5),
    ) {
        let design = qr_reparameterize(random_rows(seed, 12, 8, 4)).unwrap();
        let qr = design.qr.as_ref().unwrap();
        let natural = design.linear_predictor_natural(intercept, &coefs);
        let centered = intercept + design.centering.iter().zip(&coefs).map(|(m, c)| m * c).sum::<f64>();
        let via_qr = design.linear_predictor_qr(centered, &qr.to_qr(&coefs)).unwrap();
        for (a, b) in natural.iter().zip(&via_qr) {
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{} vs {}", a, b);
        }
        let back = qr.to_natural(&qr.to_qr(&coefs));
        for (a, b) in coefs.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

/// Student-t log density with closed-form constants for 2 and 3 degrees of freedom.
fn ln_t(df: f64, scale: f64, x: f64) -> f64 {
    let norm = if df == 2.0 {
        1.0 / (2.0 * 2f64.sqrt())
    } else if df == 3.0 {
        2.0 / (std::f64::consts::PI * 3f64.sqrt())
    } else {
        panic!("no closed form for df {df}")
    };
    norm.ln() - scale.ln() - (df + 1.0) / 2.0 * (1.0 + (x / scale).powi(2) / df).ln()
}

/// The log posterior written out directly, summing rows last to first.
///
/// Layout: `[c, log alpha, theta_x.., log tau, u..]`. Row predictor
/// `-c + alpha (log d - mean log d) + (x - mean x) . gamma + u_r` with
/// `R_x gamma = theta_x`; the log-distance column's QR coefficient is
/// `R_00 alpha + R_0x . gamma`. The constant `log R_00` of its Jacobian is
/// dropped, as in the library.
fn oracle_log_posterior(design: &DesignMatrix, v: &[f64], random_effects: bool) -> f64 {
    let p = design.n_features();
    let qr = design.qr.as_ref().unwrap();
    let r = &qr.r;
    let c = v[0];
    let alpha = v[1].exp();
    let theta_x = DVector::from_column_slice(&v[2..2 + p]);
    let rx = r.view((1, 1), (p, p)).into_owned();
    let gamma = rx.solve_upper_triangular(&theta_x).unwrap();
    let theta0 = r[(0, 0)] * alpha + (0..p).map(|j| r[(0, j + 1)] * gamma[j]).sum::<f64>();
    let m0 = design.centering[0];
    let mx = &design.centering[1..];

    let mut total = 0.0;
    for row in design.rows.iter().rev() {
        let mut eta = -c + alpha * (row.log_spatial_dist - m0);
        for j in (0..p).rev() {
            eta += (row.features[j] - mx[j]) * gamma[j];
        }
        if random_effects {
            eta += v[2 + p + 1 + row.respondent_index];
        }
        let mu = eta.exp();
        total += if row.excluded { (-(-mu).exp_m1()).ln() } else { -mu };
    }

    total += ln_t(3.0, 2.5, c);
    total += ln_t(2.0, 2.5, theta0) + v[1];
    for j in 0..p {
        total += ln_t(2.0, 2.5, theta_x[j]);
    }
    if random_effects {
        let log_tau = v[2 + p];
        let tau = log_tau.exp();
        let sigma = tau / alpha;
        total += 2f64.ln() + ln_t(3.0, 2.5, sigma) + sigma.ln();
        for &u in &v[2 + p + 1..] {
            total += -0.5 * (u / tau).powi(2) - log_tau - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
    }
    total
}

#[test]
fn log_posterior_matches_direct_reimplementation() {
    for seed in 0..20u64 {
        let design = qr_reparameterize(random_rows(seed, 6, 12, 4)).unwrap();
        for random_effects in [false, true] {
            let post = LogPosterior::new(&design, random_effects, Priors::default());
            let mut rng = stream(seed, Stream::Sample, &[random_effects as u64]);
            for _ in 0..10 {
                let v: Vec<f64> = (0..post.dim())
                    .map(|_| 0.4 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let ours = post.log_posterior(&v);
                let oracle = oracle_log_posterior(&design, &v, random_effects);
                assert!((ours - oracle).abs() < 1e-9, "seed {seed} re {random_effects}: {ours} vs {oracle}");
            }
        }
    }
}

#[test]
fn row_order_does_not_matter() {
    let design = qr_reparameterize(random_rows(5, 8, 15, 3)).unwrap();
    let mut shuffled = design.clone();
    shuffled.rows.reverse();
    shuffled.rows.rotate_left(37);
    let a = LogPosterior::new(&design, true, Priors::default());
    let b = LogPosterior::new(&shuffled, true, Priors::default());
    let mut rng = stream(5, Stream::Sample, &[2]);
    for _ in 0..20 {
        let v: Vec<f64> = (0..a.dim()).map(|_| 0.4 * rng.sample::<f64, _>(StandardNormal)).collect();
        assert!((a.log_posterior(&v) - b.log_posterior(&v)).abs() < 1e-9);
    }
}

#[test]
fn duplicated_rows_double_the_likelihood_gradient() {
    let design = qr_reparameterize(random_rows(9, 5, 10, 3)).unwrap();
    let mut doubled = design.clone();
    doubled.rows.extend(design.rows.clone());
    let once = LogPosterior::new(&design, true, Priors::default());
    let twice = LogPosterior::new(&doubled, true, Priors::default());
    let mut rng = stream(9, Stream::Sample, &[3]);
    let v: Vec<f64> = (0..once.dim()).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    // The QR basis is rescaled by the row count, so evaluate both at the same
    // natural parameters rather than the same unconstrained vector.
    let w = twice.unconstrained(&once.natural(&v));
    let (l1, g1) = once.log_likelihood_and_gradient(&v);
    let (l2, g2) = twice.log_likelihood_and_gradient(&w);
    assert!((l2 - 2.0 * l1).abs() < 1e-9 * l1.abs().max(1.0));
    // Intercept, log alpha and the effects do not go through the basis.
    let direct = [0, 1].into_iter().chain(once.layout().epsilon());
    for i in direct {
        assert!((g2[i] - 2.0 * g1[i]).abs() < 1e-9 * g1[i].abs().max(1.0), "coord {i}");
    }
}

#[test]
fn empty_design_gradient_is_prior_gradient() {
    let design = qr_reparameterize(DesignMatrix {
        rows: vec![],
        ..random_rows(0, 0, 0, 2)
    })
    .unwrap();
    let post = LogPosterior::new(&design, false, Priors::default());
    let v = vec![0.3, -0.2, 0.5, -1.0];
    let (_, g) = post.value_and_gradient(&v);
    let (_, gp) = post.log_prior_and_gradient(&v);
    assert_eq!(g, gp);
}
