//! File schemas, response ingestion, and train/test splitting.
//!
//! Blocks and edges are read from JSON (`.json`) or CSV (any other extension).
//! The blocks CSV header is
//!
//! ```text
//! id,x,y,area,population,race_white,race_black,race_hispanic,race_other,
//! party_dem,party_rep,party_other,edu_college,edu_no_college,own_owner,own_renter,
//! median_income,has_church,has_park,has_school,dist_church,dist_school,
//! block_group_id,tract_id,zcta_id,road_region_id
//! ```
//!
//! where a demographic group is absent when all of its cells are empty. The
//! edges CSV header is `block_a,block_b`; edges must be rook (shared-boundary)
//! pairs.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::covariates::{Condition, Respondent};
use crate::error::{Error, Result};
use crate::graph::{
    Block, BlockGraph, EducationCounts, OwnershipCounts, PartyCounts, Point, RaceCounts,
};
use crate::rng::{stream, Stream};

/// A respondent's drawn set of blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawnNeighborhood {
    pub respondent_id: String,
    pub block_ids: Vec<String>,
    /// More than one block; a lone home block cannot be told apart from a
    /// respondent who never drew.
    pub usable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_seconds: Option<f64>,
}

impl DrawnNeighborhood {
    pub fn new(respondent_id: impl Into<String>, block_ids: Vec<String>) -> Self {
        let mut seen = HashSet::new();
        let block_ids: Vec<String> = block_ids.into_iter().filter(|b| seen.insert(b.clone())).collect();
        Self {
            respondent_id: respondent_id.into(),
            usable: block_ids.len() > 1,
            block_ids,
            duration_seconds: None,
        }
    }
}

/// One record of a responses file, as exported by the drawing instrument.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub respondent_id: String,
    pub block_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
}

impl From<&DrawnNeighborhood> for ResponseRecord {
    fn from(n: &DrawnNeighborhood) -> Self {
        Self {
            respondent_id: n.respondent_id.clone(),
            block_ids: n.block_ids.clone(),
            duration_seconds: n.duration_seconds,
            condition: None,
        }
    }
}

/// Validates a raw response against the graph: the home block must be drawn and
/// the drawn set must be contiguous.
pub fn ingest_response(
    graph: &BlockGraph,
    respondents: &HashMap<String, Respondent>,
    raw: &ResponseRecord,
) -> Result<DrawnNeighborhood> {
    let respondent = respondents
        .get(&raw.respondent_id)
        .ok_or_else(|| Error::UnknownRespondent(raw.respondent_id.clone()))?;
    let home = graph.index_of(&respondent.home_block)?;
    let members = raw
        .block_ids
        .iter()
        .map(|id| graph.index_of(id))
        .collect::<Result<Vec<_>>>()?;
    if !members.contains(&home) {
        return Err(Error::HomeMissing {
            respondent: respondent.id.clone(),
            home: respondent.home_block.clone(),
        });
    }
    let disconnected = graph.disconnected_members(home, &members);
    if !disconnected.is_empty() {
        return Err(Error::NotContiguous {
            subject: respondent.id.clone(),
            disconnected: disconnected.iter().map(|&b| graph.id(b).to_string()).collect(),
        });
    }
    let mut n = DrawnNeighborhood::new(raw.respondent_id.clone(), raw.block_ids.clone());
    n.duration_seconds = raw.duration_seconds;
    Ok(n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainSize {
    Count(usize),
    Fraction(f64),
}

impl TrainSize {
    fn resolve(self, total: usize) -> Result<usize> {
        match self {
            TrainSize::Count(n) if n <= total => Ok(n),
            TrainSize::Count(n) => Err(Error::Invalid(format!(
                "train count {n} exceeds {total} responses"
            ))),
            TrainSize::Fraction(f) if (0.0..=1.0).contains(&f) => Ok((f * total as f64).round() as usize),
            TrainSize::Fraction(f) => Err(Error::Invalid(format!("train fraction {f} outside [0, 1]"))),
        }
    }
}

impl std::str::FromStr for TrainSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.contains('.') {
            s.parse::<f64>().map(TrainSize::Fraction).map_err(|e| e.to_string())
        } else {
            s.parse::<usize>().map(TrainSize::Count).map_err(|e| e.to_string())
        }
    }
}

/// Seeded uniform split without replacement. The train set keeps input order.
pub fn split_train_test<T: Clone>(items: &[T], size: TrainSize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n_train = size.resolve(items.len())?;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut stream(seed, Stream::Split, &[]));
    let mut in_train = vec![false; items.len()];
    for &i in &idx[..n_train] {
        in_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = items.iter().cloned().zip(in_train).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(x, _)| x).collect(),
        test.into_iter().map(|(x, _)| x).collect(),
    ))
}

/// Persisted train/test membership.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn is_train(&self, respondent_id: &str) -> bool {
        self.train.iter().any(|r| r == respondent_id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockCsvRecord {
    id: String,
    x: f64,
    y: f64,
    area: f64,
    population: f64,
    race_white: Option<f64>,
    race_black: Option<f64>,
    race_hispanic: Option<f64>,
    race_other: Option<f64>,
    party_dem: Option<f64>,
    party_rep: Option<f64>,
    party_other: Option<f64>,
    edu_college: Option<f64>,
    edu_no_college: Option<f64>,
    own_owner: Option<f64>,
    own_renter: Option<f64>,
    median_income: Option<f64>,
    has_church: u8,
    has_park: u8,
    has_school: u8,
    dist_church: f64,
    dist_school: f64,
    block_group_id: String,
    tract_id: String,
    zcta_id: Option<String>,
    road_region_id: String,
}

fn all_some<const N: usize>(vals: [Option<f64>; N]) -> Option<[f64; N]> {
    if vals.iter().all(Option::is_none) {
        return None;
    }
    Some(vals.map(|v| v.unwrap_or(0.0)))
}

impl From<BlockCsvRecord> for Block {
    fn from(r: BlockCsvRecord) -> Self {
        Block {
            id: r.id,
            centroid: Point::new(r.x, r.y),
            area: r.area,
            population: r.population,
            race_counts: all_some([r.race_white, r.race_black, r.race_hispanic, r.race_other]).map(
                |[white, black, hispanic, other]| RaceCounts {
                    white,
                    black,
                    hispanic,
                    other,
                },
            ),
            party_counts: all_some([r.party_dem, r.party_rep, r.party_other])
                .map(|[dem, rep, other]| PartyCounts { dem, rep, other }),
            education_counts: all_some([r.edu_college, r.edu_no_college])
                .map(|[college, no_college]| EducationCounts { college, no_college }),
            ownership_counts: all_some([r.own_owner, r.own_renter])
                .map(|[owner, renter]| OwnershipCounts { owner, renter }),
            median_income: r.median_income,
            has_church: r.has_church != 0,
            has_park: r.has_park != 0,
            has_school: r.has_school != 0,
            dist_church: r.dist_church,
            dist_school: r.dist_school,
            block_group_id: r.block_group_id,
            tract_id: r.tract_id,
            zcta_id: r.zcta_id.filter(|z| !z.is_empty()),
            road_region_id: r.road_region_id,
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Reads JSON lines, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_blocks(path: &Path) -> Result<Vec<Block>> {
    if is_json(path) {
        return read_json(path);
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize::<BlockCsvRecord>()
        .map(|r| Ok(Block::from(r?)))
        .collect()
}

pub fn read_edges(path: &Path) -> Result<Vec<(String, String)>> {
    if is_json(path) {
        return read_json(path);
    }
    #[derive(Deserialize)]
    struct EdgeRecord {
        block_a: String,
        block_b: String,
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize::<EdgeRecord>()
        .map(|r| r.map(|e| (e.block_a, e.block_b)).map_err(Error::from))
        .collect()
}

pub fn load_graph(blocks: &Path, edges: &Path) -> Result<BlockGraph> {
    BlockGraph::build(read_blocks(blocks)?, &read_edges(edges)?)
}

pub fn graph_edges(graph: &BlockGraph) -> Vec<(String, String)> {
    graph
        .edges()
        .map(|(a, b)| (graph.id(a).to_string(), graph.id(b).to_string()))
        .collect()
}

pub fn read_respondents(path: &Path) -> Result<Vec<Respondent>> {
    read_json(path)
}

pub fn read_responses(path: &Path) -> Result<Vec<ResponseRecord>> {
    read_json(path)
}
