//! Posterior prediction, baselines, composition summaries and consensus
//! against enumeration and recount oracles.

use std::collections::{BTreeMap, BTreeSet};

use nbhd::consensus::{build_consensus, consensus_curve, shares_from_samples, simulate_residents, ConsensusConfig};
use nbhd::covariates::{FeatureBuilder, ModelKind, ModelSpec, Party, Race, Respondent};
use nbhd::evaluation::{
    admin_baseline, aggregate_demographic_shift, local_diversity, matched_circle, AdminUnit, CompositionVariable,
    METERS_PER_MILE,
};
use nbhd::generator::{block_inclusion_posterior, posterior_predict, SimulatedNeighborhood, SimulationConfig};
use nbhd::graph::{order_from, Block, BlockGraph, Point};
use nbhd::inference::{inclusion_from_eta, PosteriorApprox};
use nbhd::rng::{stream, Stream};
use nbhd::synth::{known_params, rook_grid, synth_city, synth_residents, synth_respondents, RacePattern, SyntheticCity};
use rand::Rng;

fn bare_respondent(id: &str, home: &str) -> Respondent {
    serde_json::from_value(serde_json::json!({"id": id, "home_block": home})).unwrap()
}

/// Hub `s0` with three spokes at 80, 120 and 200 m.
fn star4() -> BlockGraph {
    let template = rook_grid(1, 1, 100.0).block(0).clone();
    let spots = [(0.0, 0.0), (80.0, 0.0), (0.0, 120.0), (-200.0, 0.0)];
    let blocks: Vec<Block> = spots
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Block {
            id: format!("s{i}"),
            centroid: Point::new(x, y),
            ..template.clone()
        })
        .collect();
    BlockGraph::build(blocks, &[("s0", "s1"), ("s0", "s2"), ("s0", "s3")]).unwrap()
}

#[test]
fn star_inclusion_frequencies_match_enumeration() {
    let g = star4();
    let spec = ModelSpec::new(ModelKind::Baseline);
    let builder = FeatureBuilder::new(&g, spec).unwrap();
    let params = known_params(builder.names(), 1.3, 150.0, None, &[]).unwrap();
    let approx = PosteriorApprox::point_mass(spec, builder.names().to_vec(), params.clone());
    let n_sims = 20_000;
    for home_id in ["s0", "s1", "s3"] {
        let home = g.index_of(home_id).unwrap();
        let ordering = order_from(&g, home);
        let r = bare_respondent("r", home_id);
        let pi = |b: usize| {
            let x = builder.features(b, &r, home);
            let log_d = nbhd::covariates::log_spatial_dist(ordering.spatial_dist(b));
            inclusion_from_eta(params.linear_predictor(log_d, &x, 0.0))
        };
        // From the hub every spoke is decided independently; from a spoke the
        // others need the hub first.
        let exact: Vec<f64> = (0..g.len())
            .map(|b| match (home == 0, b) {
                (_, b) if b == home => 1.0,
                (true, b) => pi(b),
                (false, 0) => pi(0),
                (false, b) => pi(0) * pi(b),
            })
            .collect();
        let sims = posterior_predict(
            &builder,
            &r,
            &approx,
            &SimulationConfig {
                n_sims,
                seed: 13,
                ..SimulationConfig::default()
            },
        )
        .unwrap();
        let freq = block_inclusion_posterior(&sims).unwrap();
        for (b, p) in exact.iter().enumerate() {
            let f = freq.get(g.id(b)).copied().unwrap_or(0.0);
            let se = (p * (1.0 - p) / n_sims as f64).sqrt();
            assert!((f - p).abs() <= 3.0 * se.max(1e-12), "home {home_id} block {b}: {f} vs {p}");
        }
    }
}

#[test]
fn predictions_are_contiguous_and_rooted() {
    let g = synth_city(&SyntheticCity::grid(10, 10), 2).unwrap();
    let spec = ModelSpec::new(ModelKind::CensusOnly);
    let builder = FeatureBuilder::new(&g, spec).unwrap();
    let params = known_params(builder.names(), 1.4, 400.0, Some(0.4), &[("frac_same_race", -1.0)]).unwrap();
    let approx = PosteriorApprox::point_mass(spec, builder.names().to_vec(), params);
    for r in synth_respondents(&g, 10, 2) {
        let home = g.index_of(&r.home_block).unwrap();
        let sims = posterior_predict(&builder, &r, &approx, &SimulationConfig::default()).unwrap();
        assert_eq!(sims.len(), 100);
        for s in sims {
            let members: Vec<usize> = s.block_ids.iter().map(|b| g.index_of(b).unwrap()).collect();
            assert_eq!(members[0], home);
            assert!(g.disconnected_members(home, &members).is_empty());
        }
    }
}

fn fake_samples(g: &BlockGraph, respondent: &str, n: usize, seed: u64) -> Vec<SimulatedNeighborhood> {
    let mut rng = stream(seed, Stream::Sample, &[77]);
    (0..n)
        .map(|s| SimulatedNeighborhood {
            respondent_id: respondent.to_string(),
            sim_index: s,
            block_ids: (0..g.len())
                .filter(|_| rng.random::<f64>() < 0.3)
                .map(|b| g.id(b).to_string())
                .collect(),
            truncated: false,
        })
        .collect()
}

#[test]
fn inclusion_posterior_is_mean_indicator() {
    let g = rook_grid(5, 5, 100.0);
    let samples = fake_samples(&g, "r", 200, 4);
    let got = block_inclusion_posterior(&samples).unwrap();
    for b in 0..g.len() {
        let indicators: Vec<f64> = samples
            .iter()
            .map(|s| s.block_ids.iter().any(|id| id == g.id(b)) as u8 as f64)
            .collect();
        let mean = indicators.iter().sum::<f64>() / indicators.len() as f64;
        assert!((got.get(g.id(b)).copied().unwrap_or(0.0) - mean).abs() < 1e-15);
    }
}

#[test]
fn resident_category_frequencies_follow_block_counts() {
    let g = synth_city(&SyntheticCity::grid(3, 3), 5).unwrap();
    let block = g.block(4);
    let n = 10_000;
    let drawn = synth_residents(block, n, &mut stream(5, Stream::Consensus, &[1]));
    assert!(drawn.fallback.is_empty());
    let check = |label: &str, count: usize, share: f64| {
        let sd = (share * (1.0 - share) / n as f64).sqrt();
        let f = count as f64 / n as f64;
        assert!((f - share).abs() <= 3.0 * sd, "{label}: {f} vs {share}");
    };
    let race = block.race_counts.unwrap();
    for (cat, c) in [(Race::White, race.white), (Race::Black, race.black), (Race::Hispanic, race.hispanic), (Race::Other, race.other)] {
        let count = drawn.residents.iter().filter(|r| r.race == Some(cat)).count();
        check(&format!("{cat:?}"), count, c / race.total());
    }
    let party = block.party_counts.unwrap();
    for (cat, c) in [(Party::Dem, party.dem), (Party::Rep, party.rep), (Party::Ind, party.other)] {
        let count = drawn.residents.iter().filter(|r| r.party == Some(cat)).count();
        check(&format!("{cat:?}"), count, c / party.total());
    }
}

#[test]
fn matched_circle_is_a_distance_filter() {
    let mut rng = stream(6, Stream::Sample, &[3]);
    for seed in 0..10 {
        let base = rook_grid(8, 8, 100.0);
        let blocks: Vec<Block> = base
            .blocks()
            .iter()
            .map(|b| {
                let mut b = b.clone();
                b.centroid = Point::new(b.centroid.x + rng.random_range(-40.0..40.0), b.centroid.y + rng.random_range(-40.0..40.0));
                b
            })
            .collect();
        let edges: Vec<(String, String)> = base.edges().map(|(a, b)| (base.id(a).into(), base.id(b).into())).collect();
        let g = BlockGraph::build(blocks, &edges).unwrap();
        for _ in 0..20 {
            let home = rng.random_range(0..g.len());
            let predicted: Vec<usize> = std::iter::once(home)
                .chain((0..rng.random_range(0..6)).map(|_| rng.random_range(0..g.len())))
                .collect();
            let c = g.block(home).centroid;
            let radius = predicted.iter().map(|&b| g.block(b).centroid.distance(&c)).fold(0.0, f64::max);
            let brute: BTreeSet<usize> = (0..g.len()).filter(|&b| g.block(b).centroid.distance(&c) <= radius).collect();
            assert_eq!(matched_circle(&g, home, &predicted), brute, "seed {seed}");
        }
    }
}

#[test]
fn admin_baselines_are_id_filters() {
    let g = synth_city(&SyntheticCity::grid(12, 12), 7).unwrap();
    for home in 0..g.len() {
        let h = g.block(home);
        let tract: BTreeSet<usize> = (0..g.len()).filter(|&b| g.block(b).tract_id == h.tract_id).collect();
        let zcta: BTreeSet<usize> = (0..g.len()).filter(|&b| g.block(b).zcta_id == h.zcta_id).collect();
        assert_eq!(admin_baseline(&g, home, AdminUnit::Tract).unwrap(), tract);
        assert_eq!(admin_baseline(&g, home, AdminUnit::Zcta).unwrap(), zcta);
    }
}

fn brute_force_diversity(g: &BlockGraph, home: usize, miles: f64) -> f64 {
    let c = g.block(home).centroid;
    let values: Vec<f64> = g
        .blocks()
        .iter()
        .filter(|b| b.centroid.distance(&c) <= miles * 1609.344)
        .filter_map(|b| b.race_counts.filter(|r| r.total() > 0.0).map(|r| r.white / r.total()))
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

#[test]
fn local_diversity_is_filter_and_sd() {
    assert_eq!(METERS_PER_MILE, 1609.344);
    let city = SyntheticCity {
        race_pattern: RacePattern::SplitDiversity,
        ..SyntheticCity::grid(16, 16)
    };
    let g = synth_city(&city, 3).unwrap();
    for home in (0..g.len()).step_by(7) {
        for miles in [0.5, 1.0, 2.0] {
            let got = local_diversity(&g, home, miles, CompositionVariable::White).unwrap();
            let want = brute_force_diversity(&g, home, miles);
            assert!((got - want).abs() < 1e-12, "home {home} radius {miles}: {got} vs {want}");
        }
    }
}

#[test]
fn aggregate_shift_recounts_from_raw_samples() {
    let g = synth_city(&SyntheticCity::grid(8, 8), 9).unwrap();
    let respondents = synth_respondents(&g, 12, 9);
    let full: Vec<Vec<SimulatedNeighborhood>> =
        respondents.iter().enumerate().map(|(i, r)| fake_samples(&g, &r.id, 15, i as u64)).collect();
    let baseline: Vec<Vec<SimulatedNeighborhood>> =
        respondents.iter().enumerate().map(|(i, r)| fake_samples(&g, &r.id, 15, 100 + i as u64)).collect();
    let rows = aggregate_demographic_shift(&g, &full, &baseline, &respondents, 0.5).unwrap();
    assert_eq!(rows.len(), 2 * respondents.len());

    let pooled_white = |s: &SimulatedNeighborhood| {
        let (mut w, mut t) = (0.0, 0.0);
        for id in &s.block_ids {
            let r = g.block(g.index_of(id).unwrap()).race_counts.unwrap();
            w += r.white;
            t += r.total();
        }
        (t > 0.0).then(|| w / t)
    };
    let mean_of = |sims: &[SimulatedNeighborhood]| {
        let v: Vec<f64> = sims.iter().filter_map(pooled_white).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    for (i, r) in respondents.iter().enumerate() {
        let row = rows
            .iter()
            .find(|row| row.respondent_id == r.id && row.variable == CompositionVariable::White)
            .unwrap();
        let (f, b) = (mean_of(&full[i]), mean_of(&baseline[i]));
        assert!((row.full - f).abs() < 1e-12 && (row.baseline - b).abs() < 1e-12);
        assert!((row.difference - (f - b)).abs() < 1e-12);
        let home = g.index_of(&r.home_block).unwrap();
        assert!((row.local_diversity - brute_force_diversity(&g, home, 0.5)).abs() < 1e-12);
    }
    // Identical prediction sets shift nothing.
    let same = aggregate_demographic_shift(&g, &full, &full, &respondents, 0.5).unwrap();
    assert!(same.iter().all(|r| r.difference == 0.0));
}

#[test]
fn consensus_shares_recount_from_simulation_dump() {
    let g = synth_city(&SyntheticCity::grid(10, 10), 12).unwrap();
    let spec = ModelSpec::new(ModelKind::CensusOnly);
    let builder = FeatureBuilder::new(&g, spec).unwrap();
    let params = known_params(builder.names(), 1.4, 400.0, Some(0.3), &[("frac_same_race", -1.5)]).unwrap();
    let approx = PosteriorApprox::point_mass(spec, builder.names().to_vec(), params);
    let config = ConsensusConfig {
        n_residents: 30,
        seed: 12,
        ..ConsensusConfig::default()
    };
    let anchor = "b5_5";
    let (residents, _, dump) = simulate_residents(&builder, anchor, &approx, &config).unwrap();
    assert_eq!(residents.len(), 30);
    assert!(dump.iter().all(|sims| sims.len() == 20));

    // Recount: for each resident, the per-block fraction of their sims; a
    // resident claims a block at fraction >= 0.5.
    let mut claims: BTreeMap<String, usize> = BTreeMap::new();
    for sims in &dump {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sims {
            for id in s.block_ids.iter().collect::<BTreeSet<_>>() {
                *counts.entry(id.as_str()).or_default() += 1;
            }
        }
        for (id, c) in counts {
            if c as f64 / sims.len() as f64 >= 0.5 {
                *claims.entry(id.to_string()).or_default() += 1;
            }
        }
    }
    let recount: BTreeMap<String, f64> = claims.into_iter().map(|(b, c)| (b, c as f64 / 30.0)).collect();
    assert_eq!(shares_from_samples(&dump, 0.5).unwrap(), recount);

    let map = build_consensus(&builder, anchor, &approx, &config).unwrap();
    assert_eq!(map.shares, recount);
    assert_eq!(map.share(anchor), 1.0);
    assert!(map.shares.values().all(|s| (0.0..=1.0).contains(s)));

    let thresholds: Vec<f64> = (1..=40).map(|k| k as f64 / 40.0).collect();
    let curve = consensus_curve(&map, &thresholds).unwrap();
    for (t, size) in thresholds.iter().zip(&curve.sizes) {
        let brute = recount.values().filter(|&&s| s >= *t).count();
        assert_eq!(*size, brute, "threshold {t}");
    }
    assert!(curve.is_non_increasing());
}
