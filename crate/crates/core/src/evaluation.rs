//! Scoring predicted neighborhoods against drawn ones, the geographic
//! baselines they are compared with, and aggregate composition shifts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::{Party, Race, Respondent};
use crate::error::{Error, Result};
use crate::generator::SimulatedNeighborhood;
use crate::graph::{Block, BlockGraph};
use crate::io::DrawnNeighborhood;
use crate::stats::{median, population_sd};

pub const METERS_PER_MILE: f64 = 1609.344;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set overlap scores. An empty prediction scores zero precision and F1; an
/// empty truth scores zero recall.
pub fn precision_recall<T: Ord>(predicted: &BTreeSet<T>, actual: &BTreeSet<T>) -> PrecisionRecall {
    let hits = predicted.intersection(actual).count() as f64;
    let precision = if predicted.is_empty() { 0.0 } else { hits / predicted.len() as f64 };
    let recall = if actual.is_empty() { 0.0 } else { hits / actual.len() as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PrecisionRecall { precision, recall, f1 }
}

/// Every block whose centroid lies within `radius` meters of the home centroid.
pub fn blocks_within(graph: &BlockGraph, home: usize, radius: f64) -> BTreeSet<usize> {
    let center = graph.block(home).centroid;
    (0..graph.len())
        .filter(|&b| graph.block(b).centroid.distance(&center) <= radius)
        .collect()
}

/// The smallest home-centered circle covering `neighborhood`, as a block set.
/// The home block is always a member.
pub fn matched_circle(graph: &BlockGraph, home: usize, neighborhood: &[usize]) -> BTreeSet<usize> {
    let center = graph.block(home).centroid;
    let radius = neighborhood
        .iter()
        .map(|&b| graph.block(b).centroid.distance(&center))
        .fold(0.0, f64::max);
    blocks_within(graph, home, radius)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdminUnit {
    Tract,
    Zcta,
}

/// All blocks sharing the home block's tract or ZCTA.
pub fn admin_baseline(graph: &BlockGraph, home: usize, unit: AdminUnit) -> Result<BTreeSet<usize>> {
    let key = |b: &Block| -> Option<String> {
        match unit {
            AdminUnit::Tract => Some(b.tract_id.clone()),
            AdminUnit::Zcta => b.zcta_id.clone(),
        }
    };
    let home_key = key(graph.block(home)).ok_or_else(|| Error::InvalidBlock {
        id: graph.id(home).to_string(),
        reason: "home block has no ZCTA".into(),
    })?;
    Ok((0..graph.len())
        .filter(|&b| key(graph.block(b)).as_deref() == Some(home_key.as_str()))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Circle,
    Tract,
    Zcta,
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Circle => "circle",
            Baseline::Tract => "tract",
            Baseline::Zcta => "zcta",
        })
    }
}

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "circle" => Ok(Baseline::Circle),
            "tract" => Ok(Baseline::Tract),
            "zcta" => Ok(Baseline::Zcta),
            other => Err(format!("unknown baseline `{other}` (expected circle, tract or zcta)")),
        }
    }
}

/// Which neighborhood sets the circle baseline's radius.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircleRadius {
    /// Each prediction gets its own circle; the circle knows as much about
    /// extent as the model does.
    #[default]
    Prediction,
    /// One circle covering the respondent's drawn neighborhood.
    Drawn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    InSample,
    OutOfSample,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::InSample => "in_sample",
            Split::OutOfSample => "out_of_sample",
        })
    }
}

/// One respondent's scores against one baseline. Precision, recall and F1 are
/// medians over the respondent's predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub respondent_id: String,
    pub split: Split,
    pub model: String,
    pub baseline: Baseline,
    pub median_f1_diff: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub baseline: Baseline,
    pub n_respondents: usize,
    pub median_precision: f64,
    pub median_recall: f64,
    pub median_f1: f64,
    pub median_f1_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub splits: Vec<SplitSummary>,
}

pub struct EvalInput<'a> {
    pub graph: &'a BlockGraph,
    pub respondents: &'a [Respondent],
    pub drawn: &'a [DrawnNeighborhood],
    /// Predictions grouped by respondent; respondents without predictions are skipped.
    pub predictions: &'a [Vec<SimulatedNeighborhood>],
    pub model: &'a str,
    pub circle_radius: CircleRadius,
}

fn indices(graph: &BlockGraph, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter().map(|id| graph.index_of(id)).collect()
}

/// Per-respondent median F1 difference (model − baseline) over predictions,
/// with the circle matched to each prediction unless configured otherwise.
/// Respondents for which `split_of` gives `None` are left out.
pub fn f1_difference_summary(
    input: &EvalInput<'_>,
    baseline: Baseline,
    split_of: impl Fn(&str) -> Option<Split> + Sync,
) -> Result<EvalReport> {
    let graph = input.graph;
    let homes: HashMap<&str, &str> = input
        .respondents
        .iter()
        .map(|r| (r.id.as_str(), r.home_block.as_str()))
        .collect();
    let drawn: HashMap<&str, &DrawnNeighborhood> =
        input.drawn.iter().map(|d| (d.respondent_id.as_str(), d)).collect();

    let rows: Vec<Option<EvalRow>> = input
        .predictions
        .par_iter()
        .map(|preds| -> Result<Option<EvalRow>> {
            let Some(first) = preds.first() else {
                return Ok(None);
            };
            let rid = first.respondent_id.as_str();
            let Some(split) = split_of(rid) else {
                return Ok(None);
            };
            let home_id = homes
                .get(rid)
                .ok_or_else(|| Error::UnknownRespondent(rid.to_string()))?;
            let home = graph.index_of(home_id)?;
            let actual_ids = drawn
                .get(rid)
                .ok_or_else(|| Error::Invalid(format!("no drawn neighborhood for `{rid}`")))?;
            let actual_vec = indices(graph, &actual_ids.block_ids)?;
            let actual: BTreeSet<usize> = actual_vec.iter().copied().collect();

            let fixed = match baseline {
                Baseline::Tract => Some(admin_baseline(graph, home, AdminUnit::Tract)?),
                Baseline::Zcta => Some(admin_baseline(graph, home, AdminUnit::Zcta)?),
                Baseline::Circle => match input.circle_radius {
                    CircleRadius::Drawn => Some(matched_circle(graph, home, &actual_vec)),
                    CircleRadius::Prediction => None,
                },
            };
            let fixed_score = fixed.as_ref().map(|f| precision_recall(f, &actual).f1);

            let mut precision = Vec::with_capacity(preds.len());
            let mut recall = Vec::with_capacity(preds.len());
            let mut f1 = Vec::with_capacity(preds.len());
            let mut diff = Vec::with_capacity(preds.len());
            for p in preds {
                let pv = indices(graph, &p.block_ids)?;
                let predicted: BTreeSet<usize> = pv.iter().copied().collect();
                let score = precision_recall(&predicted, &actual);
                let base = match fixed_score {
                    Some(s) => s,
                    None => precision_recall(&matched_circle(graph, home, &pv), &actual).f1,
                };
                precision.push(score.precision);
                recall.push(score.recall);
                f1.push(score.f1);
                diff.push(score.f1 - base);
            }
            Ok(Some(EvalRow {
                respondent_id: rid.to_string(),
                split,
                model: input.model.to_string(),
                baseline,
                median_f1_diff: median(&diff),
                precision: median(&precision),
                recall: median(&recall),
                f1: median(&f1),
            }))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        rows: rows.into_iter().flatten().collect(),
    })
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["respondent_id", "split", "model", "baseline", "median_f1_diff", "precision", "recall"])?;
        for r in &self.rows {
            w.write_record([
                r.respondent_id.clone(),
                r.split.to_string(),
                r.model.clone(),
                r.baseline.to_string(),
                r.median_f1_diff.to_string(),
                r.precision.to_string(),
                r.recall.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// City-level medians per (split, baseline).
    pub fn summary(&self, model: &str) -> EvalSummary {
        let mut groups: BTreeMap<(Split, Baseline), Vec<&EvalRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.split, r.baseline)).or_default().push(r);
        }
        let splits = groups
            .into_iter()
            .map(|((split, baseline), rows)| {
                let col = |f: fn(&EvalRow) -> f64| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                SplitSummary {
                    split,
                    baseline,
                    n_respondents: rows.len(),
                    median_precision: col(|r| r.precision),
                    median_recall: col(|r| r.recall),
                    median_f1: col(|r| r.f1),
                    median_f1_diff: col(|r| r.median_f1_diff),
                }
            })
            .collect();
        EvalSummary {
            model: model.to_string(),
            splits,
        }
    }
}

/// Block-level composition variables used for diversity and shift reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionVariable {
    White,
    Democratic,
}

impl CompositionVariable {
    /// `(group count, total)` for one block, if the block carries the counts.
    fn counts(self, b: &Block) -> Option<(f64, f64)> {
        match self {
            CompositionVariable::White => b.race_counts.map(|c| (c.white, c.total())),
            CompositionVariable::Democratic => b.party_counts.map(|c| (c.dem, c.total())),
        }
    }

    fn column(self) -> &'static str {
        match self {
            CompositionVariable::White => "race_counts",
            CompositionVariable::Democratic => "party_counts",
        }
    }
}

/// Population standard deviation of the block-level fraction of `variable`
/// over blocks with centroids within `radius_miles` of the home centroid.
/// Blocks with no one counted have no fraction and are skipped.
pub fn local_diversity(
    graph: &BlockGraph,
    home: usize,
    radius_miles: f64,
    variable: CompositionVariable,
) -> Result<f64> {
    if !(radius_miles > 0.0) {
        return Err(Error::Invalid(format!("radius must be positive, got {radius_miles}")));
    }
    let mut values = Vec::new();
    for b in blocks_within(graph, home, radius_miles * METERS_PER_MILE) {
        let block = graph.block(b);
        let (group, total) = variable.counts(block).ok_or_else(|| Error::MissingColumns {
            model: "diversity".into(),
            columns: vec![variable.column().into()],
        })?;
        if total > 0.0 {
            values.push(group / total);
        }
    }
    if values.is_empty() {
        return Err(Error::Invalid(format!(
            "no populated blocks within {radius_miles} miles of `{}`",
            graph.id(home)
        )));
    }
    Ok(population_sd(&values))
}

/// Tercile (0, 1, 2) of each value. Ties are broken by position, so the three
/// groups differ in size by at most one.
pub fn terciles(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * 3 / n;
    }
    out
}

/// Pooled fraction of `variable` over a set of blocks.
fn pooled_fraction(graph: &BlockGraph, ids: &[String], variable: CompositionVariable) -> Result<f64> {
    let (mut group, mut total) = (0.0, 0.0);
    for id in ids {
        let block = graph.block(graph.index_of(id)?);
        if let Some((g, t)) = variable.counts(block) {
            group += g;
            total += t;
        }
    }
    Ok(if total > 0.0 { group / total } else { f64::NAN })
}

/// Posterior mean of the pooled fraction over a respondent's predictions.
/// Predictions with no one counted are left out of the mean.
pub fn mean_composition(
    graph: &BlockGraph,
    predictions: &[SimulatedNeighborhood],
    variable: CompositionVariable,
) -> Result<f64> {
    let mut values = Vec::with_capacity(predictions.len());
    for p in predictions {
        let f = pooled_fraction(graph, &p.block_ids, variable)?;
        if f.is_finite() {
            values.push(f);
        }
    }
    Ok(crate::stats::mean(&values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub respondent_id: String,
    pub variable: CompositionVariable,
    /// The respondent's own race or party, whichever matches `variable`.
    pub respondent_group: Option<String>,
    pub local_diversity: f64,
    pub tercile: usize,
    pub full: f64,
    pub baseline: f64,
    pub difference: f64,
}

/// Full-minus-baseline change in the posterior mean White and Democratic
/// fractions of each respondent's predicted neighborhoods, grouped by tercile
/// of local diversity in the same variable.
pub fn aggregate_demographic_shift(
    graph: &BlockGraph,
    full: &[Vec<SimulatedNeighborhood>],
    baseline: &[Vec<SimulatedNeighborhood>],
    respondents: &[Respondent],
    radius_miles: f64,
) -> Result<Vec<ShiftRow>> {
    if full.len() != respondents.len() || baseline.len() != respondents.len() {
        return Err(Error::Invalid(format!(
            "{} respondents but {} full and {} baseline prediction sets",
            respondents.len(),
            full.len(),
            baseline.len()
        )));
    }
    let mut rows = Vec::new();
    for variable in [CompositionVariable::White, CompositionVariable::Democratic] {
        let per: Vec<(f64, f64, f64)> = respondents
            .par_iter()
            .zip(full.par_iter().zip(baseline.par_iter()))
            .map(|(r, (f, b))| {
                for p in f.iter().chain(b) {
                    if p.respondent_id != r.id {
                        return Err(Error::Invalid(format!(
                            "prediction for `{}` listed under `{}`",
                            p.respondent_id, r.id
                        )));
                    }
                }
                let home = graph.index_of(&r.home_block)?;
                Ok((
                    local_diversity(graph, home, radius_miles, variable)?,
                    mean_composition(graph, f, variable)?,
                    mean_composition(graph, b, variable)?,
                ))
            })
            .collect::<Result<_>>()?;
        let tercile = terciles(&per.iter().map(|p| p.0).collect::<Vec<_>>());
        for ((r, (div, f, b)), t) in respondents.iter().zip(per).zip(tercile) {
            let respondent_group = match variable {
                CompositionVariable::White => r.race.map(race_label),
                CompositionVariable::Democratic => r.party.map(party_label),
            };
            rows.push(ShiftRow {
                respondent_id: r.id.clone(),
                variable,
                respondent_group: respondent_group.map(String::from),
                local_diversity: div,
                tercile: t,
                full: f,
                baseline: b,
                difference: f - b,
            });
        }
    }
    Ok(rows)
}

fn race_label(r: Race) -> &'static str {
    match r {
        Race::White => "white",
        Race::Black => "black",
        Race::Hispanic => "hispanic",
        Race::Other => "other",
    }
}

fn party_label(p: Party) -> &'static str {
    match p {
        Party::Dem => "dem",
        Party::Rep => "rep",
        Party::Ind => "ind",
    }
}

pub fn write_shift_csv<W: Write>(rows: &[ShiftRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "respondent_id",
        "variable",
        "respondent_group",
        "local_diversity",
        "tercile",
        "full",
        "baseline",
        "difference",
    ])?;
    for r in rows {
        w.write_record([
            r.respondent_id.clone(),
            match r.variable {
                CompositionVariable::White => "white".into(),
                CompositionVariable::Democratic => "democratic".into(),
            },
            r.respondent_group.clone().unwrap_or_default(),
            r.local_diversity.to_string(),
            (r.tercile + 1).to_string(),
            r.full.to_string(),
            r.baseline.to_string(),
            r.difference.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::rook_grid;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn overlap_scores() {
        let s = precision_recall(&set(&[1, 2, 3, 4]), &set(&[3, 4, 5, 6]));
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        let s = precision_recall(&set(&[1, 2]), &set(&[1, 2]));
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = precision_recall(&set(&[]), &set(&[1]));
        assert_eq!((s.precision, s.f1), (0.0, 0.0));
        let s = precision_recall(&set(&[7]), &set(&[1]));
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn circle_of_home_alone_is_home() {
        let g = rook_grid(5, 5, 100.0);
        let home = g.index_of("b2_2").unwrap();
        assert_eq!(matched_circle(&g, home, &[home]), BTreeSet::from([home]));
    }

    #[test]
    fn circle_radius_from_farthest_block() {
        let g = rook_grid(1, 4, 100.0);
        // Centroids at 0, 100, 200, 300 m from the first block.
        let c = matched_circle(&g, 0, &[0, 2]);
        assert_eq!(c, BTreeSet::from([0, 1, 2]));
        let c = matched_circle(&g, 1, &[1, 2]);
        assert_eq!(c, BTreeSet::from([0, 1, 2]));
    }

    #[test]
    fn tract_baseline_and_missing_zcta() {
        let mut g = rook_grid(2, 2, 100.0);
        assert_eq!(admin_baseline(&g, 0, AdminUnit::Tract).unwrap().len(), 4);
        assert!(admin_baseline(&g, 0, AdminUnit::Zcta).is_ok());
        let mut blocks = g.blocks().to_vec();
        blocks[0].tract_id = "solo".into();
        blocks[0].zcta_id = None;
        let edges = crate::io::graph_edges(&g);
        g = BlockGraph::build(blocks, &edges).unwrap();
        assert_eq!(admin_baseline(&g, 0, AdminUnit::Tract).unwrap(), BTreeSet::from([0]));
        assert!(admin_baseline(&g, 0, AdminUnit::Zcta).is_err());
    }

    #[test]
    fn tercile_sizes() {
        for n in 1..40 {
            let v: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64).collect();
            let t = terciles(&v);
            let mut sizes = [0usize; 3];
            for g in &t {
                sizes[*g] += 1;
            }
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "n={n} sizes {sizes:?}");
        }
    }

    #[test]
    fn split_and_baseline_names() {
        assert_eq!("zcta".parse::<Baseline>().unwrap(), Baseline::Zcta);
        assert!("county".parse::<Baseline>().is_err());
        assert_eq!(Split::OutOfSample.to_string(), "out_of_sample");
    }
}
