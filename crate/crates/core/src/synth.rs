//! Synthetic grid cities, residents and survey respondents for testing and
//! calibration.

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::covariates::{AgeGroup, Education, Homeowner, Party, Race, Respondent};
use crate::error::{Error, Result};
use crate::graph::{
    Block, BlockGraph, EducationCounts, OwnershipCounts, PartyCounts, Point, RaceCounts,
};
use crate::inference::NaturalParams;
use crate::rng::{stream, Rng, Stream};

const SQ_METERS_PER_SQ_MILE: f64 = 2_589_988.110_336;

fn grid_id(r: usize, c: usize) -> String {
    format!("b{r}_{c}")
}

fn grid_edges(rows: usize, cols: usize) -> Vec<(String, String)> {
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((grid_id(r, c), grid_id(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((grid_id(r, c), grid_id(r + 1, c)));
            }
        }
    }
    edges
}

/// A geography-only rook grid: uniform blocks, one admin unit of each kind,
/// no landmarks and no demographic columns. Ids are `b{row}_{col}`.
pub fn rook_grid(rows: usize, cols: usize, spacing: f64) -> BlockGraph {
    let area = spacing * spacing / SQ_METERS_PER_SQ_MILE;
    let mut blocks = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            blocks.push(Block {
                id: grid_id(r, c),
                centroid: Point::new(c as f64 * spacing, r as f64 * spacing),
                area: if area > 0.0 { area } else { 1.0 },
                population: 100.0,
                race_counts: None,
                party_counts: None,
                education_counts: None,
                ownership_counts: None,
                median_income: None,
                has_church: false,
                has_park: false,
                has_school: false,
                dist_church: 1_000.0,
                dist_school: 1_000.0,
                block_group_id: "bg0".into(),
                tract_id: "t0".into(),
                zcta_id: Some("z0".into()),
                road_region_id: "rr0".into(),
            });
        }
    }
    BlockGraph::build(blocks, &grid_edges(rows, cols)).expect("grid graph is valid")
}

/// How racial composition varies across the city.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RacePattern {
    /// White share rises smoothly from west to east.
    #[default]
    Gradient,
    /// Western half nearly all White; eastern half mixed block by block.
    SplitDiversity,
}

/// Rectangular tiling of the grid into administrative units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tiling {
    /// Tile height and width in blocks.
    pub size: (usize, usize),
    /// Shift of the tile origin, so different unit kinds do not nest exactly.
    pub offset: (usize, usize),
}

impl Tiling {
    fn unit(&self, prefix: &str, r: usize, c: usize) -> String {
        let (h, w) = self.size;
        format!("{prefix}{}_{}", (r + self.offset.0) / h.max(1), (c + self.offset.1) / w.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCity {
    pub rows: usize,
    pub cols: usize,
    /// Centroid spacing in meters.
    pub spacing: f64,
    pub demographics: bool,
    pub race_pattern: RacePattern,
    /// Standard deviation of block-level noise added to the smooth fields.
    pub noise: f64,
    pub mean_population: f64,
    pub church_rate: f64,
    pub park_rate: f64,
    pub school_rate: f64,
    pub block_groups: Tiling,
    pub tracts: Tiling,
    pub road_regions: Tiling,
    pub zctas: Tiling,
}

impl SyntheticCity {
    pub fn grid(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            ..Self::default()
        }
    }
}

impl Default for SyntheticCity {
    fn default() -> Self {
        Self {
            rows: 20,
            cols: 20,
            spacing: 150.0,
            demographics: true,
            race_pattern: RacePattern::Gradient,
            noise: 0.08,
            mean_population: 80.0,
            church_rate: 0.05,
            park_rate: 0.06,
            school_rate: 0.03,
            block_groups: Tiling { size: (3, 3), offset: (0, 0) },
            tracts: Tiling { size: (6, 6), offset: (0, 0) },
            road_regions: Tiling { size: (5, 5), offset: (2, 3) },
            zctas: Tiling { size: (8, 8), offset: (3, 1) },
        }
    }
}

/// Splits `total` into integer counts proportional to `shares`.
fn apportion<const N: usize>(total: f64, shares: [f64; N]) -> [f64; N] {
    let sum: f64 = shares.iter().sum();
    let mut out = [0.0; N];
    let mut used = 0.0;
    for i in 0..N - 1 {
        out[i] = (total * shares[i] / sum).round().min(total - used).max(0.0);
        used += out[i];
    }
    out[N - 1] = (total - used).max(0.0);
    out
}

fn share(rng: &mut Rng, noise: &Normal<f64>, base: f64) -> f64 {
    (base + noise.sample(rng)).clamp(0.02, 0.98)
}

fn race_shares(pattern: RacePattern, u: f64, rng: &mut Rng, noise: &Normal<f64>) -> [f64; 4] {
    match pattern {
        RacePattern::Gradient => {
            let white = share(rng, noise, 0.15 + 0.7 * u);
            let rest = 1.0 - white;
            let black = rest * share(rng, noise, 0.45);
            let hispanic = (rest - black) * share(rng, noise, 0.7);
            [white, black, hispanic, (rest - black - hispanic).max(0.0)]
        }
        RacePattern::SplitDiversity if u < 0.5 => {
            let white = share(rng, noise, 0.95).max(0.9);
            let rest = 1.0 - white;
            [white, rest * 0.4, rest * 0.4, rest * 0.2]
        }
        RacePattern::SplitDiversity => {
            // Each block leans toward one group, so neighbours disagree.
            let mut w: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>().powi(3) + 0.05);
            let lean = rng.random_range(0..4);
            w[lean] += 0.6;
            let s: f64 = w.iter().sum();
            w.map(|v| v / s)
        }
    }
}

/// Builds a grid city with smooth demographic fields, random landmarks and
/// rectangular administrative tiles.
pub fn synth_city(config: &SyntheticCity, seed: u64) -> Result<BlockGraph> {
    if config.rows == 0 || config.cols == 0 || !(config.spacing > 0.0) {
        return Err(Error::Invalid("city needs positive dimensions and spacing".into()));
    }
    let mut rng = stream(seed, Stream::City, &[]);
    let noise = Normal::new(0.0, config.noise.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let area = config.spacing * config.spacing / SQ_METERS_PER_SQ_MILE;
    let (nr, nc) = (config.rows, config.cols);
    let frac = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };

    let mut blocks = Vec::with_capacity(nr * nc);
    for r in 0..nr {
        for c in 0..nc {
            let (u, v) = (frac(c, nc), frac(r, nr));
            let population = (config.mean_population * (0.5 + rng.random::<f64>())).round().max(1.0);
            let mut block = Block {
                id: grid_id(r, c),
                centroid: Point::new(c as f64 * config.spacing, r as f64 * config.spacing),
                area: area * (0.6 + 0.8 * rng.random::<f64>()),
                population,
                race_counts: None,
                party_counts: None,
                education_counts: None,
                ownership_counts: None,
                median_income: None,
                has_church: rng.random_bool(config.church_rate.clamp(0.0, 1.0)),
                has_park: rng.random_bool(config.park_rate.clamp(0.0, 1.0)),
                has_school: rng.random_bool(config.school_rate.clamp(0.0, 1.0)),
                dist_church: 0.0,
                dist_school: 0.0,
                block_group_id: config.block_groups.unit("bg", r, c),
                tract_id: config.tracts.unit("t", r, c),
                zcta_id: Some(config.zctas.unit("z", r, c)),
                road_region_id: config.road_regions.unit("rr", r, c),
            };
            if config.demographics {
                let race = apportion(population, race_shares(config.race_pattern, u, &mut rng, &noise));
                block.race_counts = Some(RaceCounts {
                    white: race[0],
                    black: race[1],
                    hispanic: race[2],
                    other: race[3],
                });
                let voters = (0.7 * population).round();
                let dem = share(&mut rng, &noise, 0.25 + 0.5 * v);
                let rep = (1.0 - dem) * share(&mut rng, &noise, 0.75);
                let party = apportion(voters, [dem, rep, (1.0 - dem - rep).max(0.0)]);
                block.party_counts = Some(PartyCounts {
                    dem: party[0],
                    rep: party[1],
                    other: party[2],
                });
                let adults = (0.75 * population).round();
                let college = share(&mut rng, &noise, 0.2 + 0.5 * (u + v) / 2.0);
                let edu = apportion(adults, [college, 1.0 - college]);
                block.education_counts = Some(EducationCounts {
                    college: edu[0],
                    no_college: edu[1],
                });
                let households = (0.4 * population).round();
                let owner = share(&mut rng, &noise, 0.3 + 0.4 * (1.0 - v));
                let own = apportion(households, [owner, 1.0 - owner]);
                block.ownership_counts = Some(OwnershipCounts {
                    owner: own[0],
                    renter: own[1],
                });
                block.median_income = Some((25_000.0 + 90_000.0 * college).round());
            }
            blocks.push(block);
        }
    }

    // Guarantee at least one church and one school so distances are defined.
    let center = (nr / 2) * nc + nc / 2;
    if !blocks.iter().any(|b| b.has_church) {
        blocks[center].has_church = true;
    }
    if !blocks.iter().any(|b| b.has_school) {
        blocks[center].has_school = true;
    }
    let nearest = |flag: fn(&Block) -> bool, blocks: &[Block], at: Point| -> f64 {
        blocks
            .iter()
            .filter(|b| flag(b))
            .map(|b| b.centroid.distance(&at))
            .fold(f64::INFINITY, f64::min)
    };
    let dists: Vec<(f64, f64)> = blocks
        .iter()
        .map(|b| {
            (
                nearest(|x| x.has_church, &blocks, b.centroid),
                nearest(|x| x.has_school, &blocks, b.centroid),
            )
        })
        .collect();
    for (b, (dc, ds)) in blocks.iter_mut().zip(dists) {
        b.dist_church = dc;
        b.dist_school = ds;
    }

    // Block groups must share a median income.
    if config.demographics {
        let mut by_group: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for b in &blocks {
            by_group.entry(b.block_group_id.clone()).or_default().push(b.median_income.unwrap_or(0.0));
        }
        for b in &mut blocks {
            let v = &by_group[&b.block_group_id];
            b.median_income = Some((v.iter().sum::<f64>() / v.len() as f64).round());
        }
    }

    BlockGraph::build(blocks, &grid_edges(nr, nc))
}

/// Residents of one block plus which category groups fell back to uniform
/// because the block had no counts for them.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticResidents {
    pub residents: Vec<Respondent>,
    pub fallback: Vec<&'static str>,
}

fn categorical<T: Copy>(rng: &mut Rng, weights: &[f64], values: &[T]) -> T {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (w, v) in weights.iter().zip(values) {
        if u < *w {
            return *v;
        }
        u -= w;
    }
    // Rounding left `u` at the top edge: pick the last value with weight.
    let last = weights.iter().rposition(|w| *w > 0.0).unwrap_or(values.len() - 1);
    values[last]
}

fn weights_or_uniform(counts: Option<Vec<f64>>, n: usize, name: &'static str, fallback: &mut Vec<&'static str>) -> Vec<f64> {
    match counts {
        Some(c) if c.iter().sum::<f64>() > 0.0 => c,
        _ => {
            fallback.push(name);
            vec![1.0; n]
        }
    }
}

/// Draws `n` residents of `block`, each attribute independently from the
/// block's categorical distribution. Individual attributes the census does not
/// supply are left at their defaults.
pub fn synth_residents(block: &Block, n: usize, rng: &mut Rng) -> SyntheticResidents {
    let mut fallback = Vec::new();
    let race_w = weights_or_uniform(
        block.race_counts.map(|c| vec![c.white, c.black, c.hispanic, c.other]),
        4,
        "race",
        &mut fallback,
    );
    let party_w = weights_or_uniform(
        block.party_counts.map(|c| vec![c.dem, c.rep, c.other]),
        3,
        "party",
        &mut fallback,
    );
    let edu_w = weights_or_uniform(
        block.education_counts.map(|c| vec![c.college, c.no_college]),
        2,
        "education",
        &mut fallback,
    );
    let own_w = weights_or_uniform(
        block.ownership_counts.map(|c| vec![c.owner, c.renter]),
        2,
        "homeowner",
        &mut fallback,
    );
    let residents = (0..n)
        .map(|k| Respondent {
            id: format!("{}-res{k}", block.id),
            home_block: block.id.clone(),
            race: Some(categorical(rng, &race_w, &Race::ALL)),
            party: Some(categorical(rng, &party_w, &[Party::Dem, Party::Rep, Party::Ind])),
            education: Some(categorical(rng, &edu_w, &[Education::College, Education::NoCollege])),
            homeowner: Some(categorical(rng, &own_w, &[Homeowner::Owner, Homeowner::Renter])),
            age_group: AgeGroup::default(),
            retired: false,
            tenure_years: 0.0,
            children: false,
            group: None,
        })
        .collect();
    SyntheticResidents { residents, fallback }
}

/// Survey respondents with homes drawn uniformly over blocks. Demographics
/// follow the home block; age, retirement, tenure and children are drawn from
/// fixed city-wide distributions.
pub fn synth_respondents(graph: &BlockGraph, n: usize, seed: u64) -> Vec<Respondent> {
    let mut rng = stream(seed, Stream::Residents, &[]);
    let tenure = Exp::new(1.0f64 / 8.0).expect("positive rate");
    let ages = [
        AgeGroup::Under41,
        AgeGroup::From41To55,
        AgeGroup::From56To65,
        AgeGroup::From66To75,
        AgeGroup::Over75,
    ];
    let has_demographics = graph.blocks().iter().all(|b| b.race_counts.is_some());
    (0..n)
        .map(|i| {
            let home = graph.block(rng.random_range(0..graph.len()));
            let mut r = if has_demographics {
                synth_residents(home, 1, &mut rng).residents.remove(0)
            } else {
                Respondent {
                    id: String::new(),
                    home_block: home.id.clone(),
                    race: None,
                    party: None,
                    education: None,
                    homeowner: None,
                    age_group: AgeGroup::default(),
                    retired: false,
                    tenure_years: 0.0,
                    children: false,
                    group: None,
                }
            };
            r.id = format!("r{i:04}");
            r.age_group = categorical(&mut rng, &[0.35, 0.25, 0.18, 0.14, 0.08], &ages);
            r.retired = matches!(r.age_group, AgeGroup::From66To75 | AgeGroup::Over75) && rng.random_bool(0.7);
            r.tenure_years = (tenure.sample(&mut rng) * 10.0).round() / 10.0;
            r.children = rng.random_bool(0.35);
            r
        })
        .collect()
}

/// Parameters for simulating survey data: every coefficient zero except the
/// named ones (linear-predictor scale).
pub fn known_params(
    feature_names: &[String],
    alpha: f64,
    length_scale: f64,
    sigma: Option<f64>,
    nonzero: &[(&str, f64)],
) -> Result<NaturalParams> {
    let mut coefficients = vec![0.0; feature_names.len()];
    for (name, value) in nonzero {
        let j = feature_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::Invalid(format!("unknown feature `{name}`")))?;
        coefficients[j] = *value;
    }
    Ok(NaturalParams {
        alpha,
        alpha_log_l: alpha * length_scale.ln(),
        coefficients,
        sigma,
        epsilon: Vec::new(),
    })
}
