//! Margin-scale effects: the change in inclusion probability for a one-unit
//! covariate change at a block whose inclusion probability is 50%.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::laplace::PosteriorApprox;
use crate::error::Result;
use crate::stats::Summary;

/// Linear predictor value at which inclusion probability is one half: `log log 2`.
pub fn mu_half() -> f64 {
    std::f64::consts::LN_2.ln()
}

/// Inclusion-probability change at the margin for a linear-predictor-scale
/// coefficient. The linear predictor models exclusion, so a positive
/// coefficient lowers inclusion.
pub fn marginal_effect(coefficient: f64) -> f64 {
    let mu = mu_half();
    (-(mu + coefficient).exp()).exp() - (-mu.exp()).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub name: String,
    pub pp_change: Summary,
}

/// One estimate per covariate, mapping every resampled draw before summarizing.
pub fn effect_estimates(approx: &PosteriorApprox) -> Vec<EffectEstimate> {
    approx
        .feature_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let values: Vec<f64> = approx
                .resampled_draws()
                .map(|d| marginal_effect(d.coefficients[j]))
                .collect();
            EffectEstimate {
                name: name.clone(),
                pp_change: Summary::of(&values),
            }
        })
        .collect()
}

/// CSV with one row per covariate: mean, median, and 50%/95% intervals.
pub fn write_effects_csv<W: Write>(effects: &[EffectEstimate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["name", "mean", "median", "q2.5", "q25", "q75", "q97.5"])?;
    for e in effects {
        let s = &e.pp_change;
        w.write_record([
            e.name.clone(),
            s.mean.to_string(),
            s.median.to_string(),
            s.q025.to_string(),
            s.q25.to_string(),
            s.q75.to_string(),
            s.q975.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_reference_point() {
        assert!(((-mu_half().exp()).exp() - 0.5).abs() < 1e-15);
        assert!((mu_half() + 0.366_512_920_581_664_3).abs() < 1e-15);
    }

    #[test]
    fn zero_and_saturation() {
        assert_eq!(marginal_effect(0.0), 0.0);
        assert_eq!(marginal_effect(f64::INFINITY), -0.5);
        assert_eq!(marginal_effect(f64::NEG_INFINITY), 0.5);
        assert!((marginal_effect(50.0) + 0.5).abs() < 1e-15);
        assert!((marginal_effect(-50.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unit_coefficient() {
        // exp(-e * log 2) - 1/2
        let expected = (-std::f64::consts::E * std::f64::consts::LN_2).exp() - 0.5;
        assert!((marginal_effect(1.0) - expected).abs() < 1e-15);
        assert!((marginal_effect(1.0) + 0.348_044_776_742_087).abs() < 1e-12);
    }

    #[test]
    fn monotone_decreasing() {
        let mut last = 0.5;
        for i in -50..=20 {
            let v = marginal_effect(i as f64 * 0.1);
            assert!(v < last && v > -0.5);
            last = v;
        }
    }
}
