//! Consensus communities: how much of a block's synthetic population would
//! place each nearby block in their neighborhood.

use std::collections::BTreeMap;
use std::io::Write;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::{FeatureBuilder, Respondent};
use crate::error::{Error, Result};
use crate::graph::BlockGraph;
use crate::generator::{block_inclusion_posterior, id_hash, posterior_predict, SimulatedNeighborhood, SimulationConfig};
use crate::inference::PosteriorApprox;
use crate::rng::{stream, Stream};
use crate::synth::synth_residents;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub n_residents: usize,
    pub sims_per_resident: usize,
    pub seed: u64,
    /// Posterior inclusion probability at which a resident counts a block as theirs.
    pub inclusion_threshold: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            n_residents: 100,
            sims_per_resident: 20,
            seed: 0,
            inclusion_threshold: 0.5,
        }
    }
}

/// Share of residents claiming each block. Blocks nobody claims are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusMap {
    pub anchor: String,
    pub n_residents: usize,
    pub sims_per_resident: usize,
    pub shares: BTreeMap<String, f64>,
    /// Category groups the anchor had no counts for; residents drew those
    /// attributes uniformly.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback: Vec<String>,
}

impl ConsensusMap {
    pub fn share(&self, block_id: &str) -> f64 {
        self.shares.get(block_id).copied().unwrap_or(0.0)
    }

    /// Blocks with share at least `threshold`, in id order.
    pub fn at_threshold(&self, threshold: f64) -> Vec<String> {
        self.shares
            .iter()
            .filter(|(_, &s)| s >= threshold)
            .map(|(b, _)| b.clone())
            .collect()
    }

    /// Members of the thresholded set not connected to the anchor within it.
    /// Thresholding does not preserve contiguity.
    pub fn disconnected_at(&self, graph: &BlockGraph, threshold: f64) -> Result<Vec<String>> {
        let anchor = graph.index_of(&self.anchor)?;
        let members = self
            .at_threshold(threshold)
            .iter()
            .map(|b| graph.index_of(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(graph
            .disconnected_members(anchor, &members)
            .into_iter()
            .map(|b| graph.id(b).to_string())
            .collect())
    }
}

/// Synthetic residents of `anchor` and their posterior predictive
/// neighborhoods, each with a freshly drawn respondent effect.
pub fn simulate_residents(
    builder: &FeatureBuilder<'_>,
    anchor: &str,
    approx: &PosteriorApprox,
    config: &ConsensusConfig,
) -> Result<(Vec<Respondent>, Vec<&'static str>, Vec<Vec<SimulatedNeighborhood>>)> {
    let graph = builder.graph();
    let block = graph.block(graph.index_of(anchor)?);
    let key = id_hash(anchor);
    let drawn = synth_residents(block, config.n_residents, &mut stream(config.seed, Stream::Consensus, &[key, 0]));
    let sim = SimulationConfig {
        n_sims: config.sims_per_resident,
        seed: stream(config.seed, Stream::Consensus, &[key, 1]).next_u64(),
        max_blocks: None,
        fresh_random_effects: true,
    };
    let sims = drawn
        .residents
        .par_iter()
        .map(|r| posterior_predict(builder, r, approx, &sim))
        .collect::<Result<Vec<_>>>()?;
    Ok((drawn.residents, drawn.fallback, sims))
}

/// Shares from raw per-resident simulations.
pub fn shares_from_samples(samples: &[Vec<SimulatedNeighborhood>], inclusion_threshold: f64) -> Result<BTreeMap<String, f64>> {
    if samples.is_empty() {
        return Err(Error::Invalid("no residents to summarize".into()));
    }
    let mut claims: BTreeMap<String, usize> = BTreeMap::new();
    for resident in samples {
        for (block, p) in block_inclusion_posterior(resident)? {
            if p >= inclusion_threshold {
                *claims.entry(block).or_default() += 1;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(claims.into_iter().map(|(b, c)| (b, c as f64 / n)).collect())
}

pub fn build_consensus(
    builder: &FeatureBuilder<'_>,
    anchor: &str,
    approx: &PosteriorApprox,
    config: &ConsensusConfig,
) -> Result<ConsensusMap> {
    if config.n_residents == 0 {
        return Err(Error::Invalid("n_residents must be at least 1".into()));
    }
    let (_, fallback, sims) = simulate_residents(builder, anchor, approx, config)?;
    Ok(ConsensusMap {
        anchor: anchor.to_string(),
        n_residents: config.n_residents,
        sims_per_resident: config.sims_per_resident,
        shares: shares_from_samples(&sims, config.inclusion_threshold)?,
        fallback: fallback.into_iter().map(String::from).collect(),
    })
}

/// Consensus-neighborhood size against the share threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusCurve {
    pub thresholds: Vec<f64>,
    pub sizes: Vec<usize>,
}

impl ConsensusCurve {
    pub fn is_non_increasing(&self) -> bool {
        self.sizes.windows(2).all(|w| w[0] >= w[1])
    }

    /// Size at `threshold`, if it is on the grid.
    pub fn size_at(&self, threshold: f64) -> Option<usize> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-12)
            .map(|i| self.sizes[i])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "size"])?;
        for (t, s) in self.thresholds.iter().zip(&self.sizes) {
            w.write_record([t.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `0.05, 0.10, ..., 1.0`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 20.0).collect()
}

pub fn consensus_curve(map: &ConsensusMap, thresholds: &[f64]) -> Result<ConsensusCurve> {
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Invalid(format!("threshold {t} outside (0, 1]")));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("thresholds must be strictly increasing".into()));
    }
    Ok(ConsensusCurve {
        thresholds: thresholds.to_vec(),
        sizes: thresholds
            .iter()
            .map(|&t| map.shares.values().filter(|&&s| s >= t).count())
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(shares: &[(&str, f64)]) -> ConsensusMap {
        ConsensusMap {
            anchor: "a".into(),
            n_residents: 10,
            sims_per_resident: 20,
            shares: shares.iter().map(|(b, s)| (b.to_string(), *s)).collect(),
            fallback: Vec::new(),
        }
    }

    #[test]
    fn curve_counts_shares_at_or_above() {
        let m = map(&[("a", 1.0), ("b", 0.8), ("c", 0.6), ("d", 0.3)]);
        let c = consensus_curve(&m, &[0.5, 0.9]).unwrap();
        assert_eq!(c.sizes, vec![3, 1]);
        let c = consensus_curve(&m, &[1e-9]).unwrap();
        assert_eq!(c.sizes, vec![4]);
        assert!(consensus_curve(&m, &default_thresholds()).unwrap().is_non_increasing());
    }

    #[test]
    fn thresholds_validated() {
        let m = map(&[("a", 1.0)]);
        assert!(consensus_curve(&m, &[0.0]).is_err());
        assert!(consensus_curve(&m, &[0.5, 0.5]).is_err());
        assert!(consensus_curve(&m, &[0.6, 0.5]).is_err());
        assert!(consensus_curve(&m, &[1.5]).is_err());
    }

    #[test]
    fn default_grid() {
        let t = default_thresholds();
        assert_eq!(t.len(), 20);
        assert_eq!(t[9], 0.5);
        assert_eq!(t[19], 1.0);
    }

    #[test]
    fn shares_count_residents_over_threshold() {
        let nb = |r: &str, s: usize, b: &[&str]| SimulatedNeighborhood {
            respondent_id: r.into(),
            sim_index: s,
            block_ids: b.iter().map(|x| x.to_string()).collect(),
            truncated: false,
        };
        let samples = vec![
            vec![nb("r1", 0, &["h", "x"]), nb("r1", 1, &["h"])],
            vec![nb("r2", 0, &["h"]), nb("r2", 1, &["h"])],
        ];
        let s = shares_from_samples(&samples, 0.5).unwrap();
        assert_eq!(s["h"], 1.0);
        assert_eq!(s["x"], 0.5);
        assert_eq!(shares_from_samples(&samples, 0.6).unwrap().get("x"), None);
    }
}
