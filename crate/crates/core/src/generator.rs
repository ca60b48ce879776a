//! Sequential neighborhood sampling: prior draws from known parameters and
//! posterior predictive draws from a fitted approximation.
//!
//! Blocks are visited once each in ordering rank. A block is eligible only
//! when an already included block of smaller rank is adjacent to it; an
//! eligible block is then included with its kernel probability.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::{log_spatial_dist, FeatureBuilder, Respondent};
use crate::error::{Error, Result};
use crate::graph::{order_from, BlockGraph, Ordering};
use crate::inference::{inclusion_from_eta, NaturalParams, PosteriorApprox};
use crate::io::DrawnNeighborhood;
use crate::rng::{stream, Rng, Stream};

/// Component sizes above this trigger a warning when no cap is set.
pub const LARGE_COMPONENT: usize = 10_000;

/// Blocks of one sampled neighborhood, in inclusion order (home first).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub blocks: Vec<usize>,
    /// The block cap stopped sampling while eligible blocks remained.
    pub truncated: bool,
}

/// Runs the sequential process with inclusion probability `prob(block)`.
pub fn sample_with<F>(
    graph: &BlockGraph,
    ordering: &Ordering,
    mut prob: F,
    rng: &mut Rng,
    max_blocks: usize,
) -> Sample
where
    F: FnMut(usize) -> f64,
{
    let home = ordering.home();
    let mut blocks = vec![home];
    let mut queued = vec![false; graph.len()];
    queued[home] = true;
    let mut frontier = BinaryHeap::new();
    let push_successors = |b: usize, frontier: &mut BinaryHeap<Reverse<(usize, usize)>>, queued: &mut [bool]| {
        let rb = ordering.rank_of(b).unwrap_or(0);
        for &j in graph.neighbors(b) {
            if let Some(rj) = ordering.rank_of(j) {
                if rj > rb && !queued[j] {
                    queued[j] = true;
                    frontier.push(Reverse((rj, j)));
                }
            }
        }
    };
    push_successors(home, &mut frontier, &mut queued);
    while let Some(Reverse((_, b))) = frontier.pop() {
        if blocks.len() >= max_blocks {
            return Sample {
                blocks,
                truncated: true,
            };
        }
        let p = prob(b);
        if rng.random::<f64>() < p {
            blocks.push(b);
            push_successors(b, &mut frontier, &mut queued);
        }
    }
    Sample {
        blocks,
        truncated: false,
    }
}

/// Exact log probability of `set` under the sequential process: the sum of
/// the Bernoulli log terms of every eligible block. `-inf` when the set is
/// unreachable (not contiguous through smaller ranks, or missing home).
pub fn log_probability<F>(graph: &BlockGraph, ordering: &Ordering, set: &[usize], mut prob: F) -> f64
where
    F: FnMut(usize) -> f64,
{
    let mut included = vec![false; graph.len()];
    for &b in set {
        included[b] = true;
    }
    if !included[ordering.home()] {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    let mut reached = vec![false; graph.len()];
    reached[ordering.home()] = true;
    for &b in &ordering.ranks()[1..] {
        let rb = ordering.rank_of(b).unwrap_or(0);
        let eligible = graph
            .neighbors(b)
            .iter()
            .any(|&j| reached[j] && ordering.rank_of(j).is_some_and(|rj| rj < rb));
        if eligible {
            let p = prob(b);
            if included[b] {
                total += p.ln();
                reached[b] = true;
            } else {
                total += (-p).ln_1p();
            }
        } else if included[b] {
            return f64::NEG_INFINITY;
        }
    }
    if set.iter().any(|&b| !ordering.contains(b)) {
        return f64::NEG_INFINITY;
    }
    total
}

/// One neighborhood drawn for `respondent` under `params` with kernel-scale
/// respondent effect `epsilon`.
pub fn sample_neighborhood(
    builder: &FeatureBuilder<'_>,
    ordering: &Ordering,
    respondent: &Respondent,
    params: &NaturalParams,
    epsilon: f64,
    rng: &mut Rng,
    max_blocks: usize,
) -> Sample {
    let home = ordering.home();
    let prob = |b: usize| {
        let x = builder.features(b, respondent, home);
        let eta = params.linear_predictor(log_spatial_dist(ordering.spatial_dist(b)), &x, epsilon);
        inclusion_from_eta(eta)
    };
    sample_with(builder.graph(), ordering, prob, rng, max_blocks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_sims: usize,
    pub seed: u64,
    /// Cap on neighborhood size; `None` means the home's component size.
    pub max_blocks: Option<usize>,
    /// Draw a new respondent effect for every simulation even for respondents
    /// seen in fitting.
    pub fresh_random_effects: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_sims: 100,
            seed: 0,
            max_blocks: None,
            fresh_random_effects: false,
        }
    }
}

/// One simulated neighborhood, as written to simulation output files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedNeighborhood {
    pub respondent_id: String,
    pub sim_index: usize,
    pub block_ids: Vec<String>,
    pub truncated: bool,
}

/// FNV-1a, used to key random streams by respondent id.
pub fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// `n_sims` posterior predictive neighborhoods for one respondent.
///
/// Each simulation picks a resampled posterior draw. The respondent effect is
/// the fitted one for in-sample respondents unless fresh effects are requested;
/// otherwise it is drawn from `Normal(0, sigma^2)`.
pub fn posterior_predict(
    builder: &FeatureBuilder<'_>,
    respondent: &Respondent,
    approx: &PosteriorApprox,
    config: &SimulationConfig,
) -> Result<Vec<SimulatedNeighborhood>> {
    if config.n_sims == 0 {
        return Err(Error::Invalid("n_sims must be at least 1".into()));
    }
    if approx.resampled.is_empty() {
        return Err(Error::Invalid("posterior has no draws".into()));
    }
    builder.check_respondent(respondent)?;
    let graph = builder.graph();
    let home = graph.index_of(&respondent.home_block)?;
    let ordering = order_from(graph, home);
    let max_blocks = config.max_blocks.unwrap_or(ordering.len()).max(1);
    let in_sample = if config.fresh_random_effects {
        None
    } else {
        approx.respondent_index(&respondent.id)
    };
    let key = id_hash(&respondent.id);
    (0..config.n_sims)
        .map(|s| {
            let mut rng = stream(config.seed, Stream::Predict, &[key, s as u64]);
            let draw = &approx.draws[approx.resampled[rng.random_range(0..approx.resampled.len())]];
            let epsilon = match (in_sample, draw.sigma) {
                (Some(i), _) if i < draw.epsilon.len() => draw.epsilon[i],
                (_, Some(sigma)) if sigma > 0.0 => Normal::new(0.0, sigma)
                    .map_err(|e| Error::NonFinite(e.to_string()))?
                    .sample(&mut rng),
                _ => 0.0,
            };
            let sample = sample_neighborhood(builder, &ordering, respondent, draw, epsilon, &mut rng, max_blocks);
            Ok(SimulatedNeighborhood {
                respondent_id: respondent.id.clone(),
                sim_index: s,
                block_ids: sample.blocks.iter().map(|&b| graph.id(b).to_string()).collect(),
                truncated: sample.truncated,
            })
        })
        .collect()
}

/// Posterior predictions for many respondents, in input order.
pub fn predict_all(
    builder: &FeatureBuilder<'_>,
    respondents: &[Respondent],
    approx: &PosteriorApprox,
    config: &SimulationConfig,
) -> Result<Vec<Vec<SimulatedNeighborhood>>> {
    respondents
        .par_iter()
        .map(|r| posterior_predict(builder, r, approx, config))
        .collect()
}

/// Fraction of samples containing each block id.
pub fn block_inclusion_posterior(samples: &[SimulatedNeighborhood]) -> Result<BTreeMap<String, f64>> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to summarize".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in samples {
        let mut ids: Vec<&String> = s.block_ids.iter().collect();
        ids.sort();
        ids.dedup();
        for id in ids {
            *counts.entry(id.clone()).or_default() += 1;
        }
    }
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect())
}

/// One drawn neighborhood per respondent from known parameters, with a fresh
/// respondent effect `Normal(0, sigma^2)` each. Used to fabricate survey data.
pub fn simulate_responses(
    builder: &FeatureBuilder<'_>,
    respondents: &[Respondent],
    truth: &NaturalParams,
    seed: u64,
) -> Result<Vec<DrawnNeighborhood>> {
    let graph = builder.graph();
    respondents
        .par_iter()
        .map(|r| {
            builder.check_respondent(r)?;
            let home = graph.index_of(&r.home_block)?;
            let ordering = order_from(graph, home);
            let mut rng = stream(seed, Stream::Responses, &[id_hash(&r.id)]);
            let epsilon = match truth.sigma {
                Some(sigma) if sigma > 0.0 => Normal::new(0.0, sigma)
                    .map_err(|e| Error::NonFinite(e.to_string()))?
                    .sample(&mut rng),
                _ => 0.0,
            };
            let sample = sample_neighborhood(builder, &ordering, r, truth, epsilon, &mut rng, ordering.len());
            Ok(DrawnNeighborhood::new(
                r.id.clone(),
                sample.blocks.iter().map(|&b| graph.id(b).to_string()).collect(),
            ))
        })
        .collect()
}
