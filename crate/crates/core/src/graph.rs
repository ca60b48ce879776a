//! Census-block adjacency graph and the distance ordering around a home block.
//!
//! Adjacency is rook contiguity (shared boundary segment). The graph never
//! derives adjacency from geometry: the edge list is taken as given, and callers
//! must not pass point-touch pairs.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar projected coordinates in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RaceCounts {
    pub white: f64,
    pub black: f64,
    pub hispanic: f64,
    pub other: f64,
}

impl RaceCounts {
    pub fn total(&self) -> f64 {
        self.white + self.black + self.hispanic + self.other
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartyCounts {
    pub dem: f64,
    pub rep: f64,
    pub other: f64,
}

impl PartyCounts {
    pub fn total(&self) -> f64 {
        self.dem + self.rep + self.other
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EducationCounts {
    pub college: f64,
    pub no_college: f64,
}

impl EducationCounts {
    pub fn total(&self) -> f64 {
        self.college + self.no_college
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OwnershipCounts {
    pub owner: f64,
    pub renter: f64,
}

impl OwnershipCounts {
    pub fn total(&self) -> f64 {
        self.owner + self.renter
    }
}

/// A census block with the raw attributes every covariate is built from.
///
/// Demographic groups are optional so that a geography-only city can still be
/// fit with the baseline model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    pub centroid: Point,
    /// Square miles.
    pub area: f64,
    pub population: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race_counts: Option<RaceCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub party_counts: Option<PartyCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub education_counts: Option<EducationCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ownership_counts: Option<OwnershipCounts>,
    /// Block-group median income in dollars.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_income: Option<f64>,
    pub has_church: bool,
    pub has_park: bool,
    pub has_school: bool,
    /// Meters to the nearest church.
    pub dist_church: f64,
    /// Meters to the nearest school.
    pub dist_school: f64,
    pub block_group_id: String,
    pub tract_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zcta_id: Option<String>,
    pub road_region_id: String,
}

impl Block {
    /// Checks the per-record invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidBlock {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if !(self.area > 0.0) {
            return Err(bad("area must be positive"));
        }
        if !(self.population >= 0.0) {
            return Err(bad("population must be non-negative"));
        }
        if !(self.dist_church >= 0.0) || !(self.dist_school >= 0.0) {
            return Err(bad("facility distances must be non-negative"));
        }
        if !self.centroid.x.is_finite() || !self.centroid.y.is_finite() {
            return Err(bad("centroid must be finite"));
        }
        let slack = 1e-9 * self.population.max(1.0);
        if let Some(r) = &self.race_counts {
            if r.total() > self.population + slack {
                return Err(bad("race counts exceed population"));
            }
        }
        let groups = [
            self.race_counts.map(|c| [c.white, c.black, c.hispanic, c.other].to_vec()),
            self.party_counts.map(|c| vec![c.dem, c.rep, c.other]),
            self.education_counts.map(|c| vec![c.college, c.no_college]),
            self.ownership_counts.map(|c| vec![c.owner, c.renter]),
        ];
        if groups
            .iter()
            .flatten()
            .flatten()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(bad("counts must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Immutable rook-adjacency graph over census blocks.
#[derive(Clone, Debug)]
pub struct BlockGraph {
    blocks: Vec<Block>,
    index: HashMap<String, usize>,
    adjacency: Vec<Vec<usize>>,
}

impl BlockGraph {
    /// Builds the graph, symmetrizing and deduplicating the edge list.
    pub fn build<S: AsRef<str>>(blocks: Vec<Block>, edges: &[(S, S)]) -> Result<Self> {
        let mut index = HashMap::with_capacity(blocks.len());
        for (i, b) in blocks.iter().enumerate() {
            b.validate()?;
            if index.insert(b.id.clone(), i).is_some() {
                return Err(Error::DuplicateBlock(b.id.clone()));
            }
        }
        let mut adjacency = vec![Vec::new(); blocks.len()];
        for (a, b) in edges {
            let (a, b) = (a.as_ref(), b.as_ref());
            let ia = *index.get(a).ok_or_else(|| Error::UnknownBlock(a.to_string()))?;
            let ib = *index.get(b).ok_or_else(|| Error::UnknownBlock(b.to_string()))?;
            if ia == ib {
                return Err(Error::SelfLoop(a.to_string()));
            }
            adjacency[ia].push(ib);
            adjacency[ib].push(ia);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
            nbrs.dedup();
        }
        Ok(Self {
            blocks,
            index,
            adjacency,
        })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &Block {
        &self.blocks[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.blocks[i].id
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownBlock(id.to_string()))
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn are_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    /// Each undirected edge once, as `(lo, hi)` index pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, nbrs)| nbrs.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Hop distances from `source`; `None` outside its connected component.
    pub fn hop_distances(&self, source: usize) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.len()];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Blocks of `set` not reachable from `home` while staying inside `set`.
    ///
    /// Returns an empty list when the set is contiguous (or when `home` is not in
    /// the set, in which case every member is reported).
    pub fn disconnected_members(&self, home: usize, set: &[usize]) -> Vec<usize> {
        let mut member = vec![false; self.len()];
        for &b in set {
            member[b] = true;
        }
        let mut seen = vec![false; self.len()];
        if member[home] {
            let mut queue = VecDeque::from([home]);
            seen[home] = true;
            while let Some(u) = queue.pop_front() {
                for &v in &self.adjacency[u] {
                    if member[v] && !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        let mut out: Vec<usize> = set.iter().copied().filter(|&b| !seen[b]).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Blocks of the home's component ranked by (hop distance, centroid distance, id).
#[derive(Clone, Debug)]
pub struct Ordering {
    home: usize,
    ranks: Vec<usize>,
    rank_of: Vec<Option<usize>>,
    graph_dist: Vec<Option<u32>>,
    spatial_dist: Vec<f64>,
}

impl Ordering {
    pub fn home(&self) -> usize {
        self.home
    }

    /// Block indices in rank order; `ranks()[0]` is the home block.
    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    /// Rank of a block, `None` outside the home's component.
    pub fn rank_of(&self, block: usize) -> Option<usize> {
        self.rank_of[block]
    }

    pub fn graph_dist(&self, block: usize) -> Option<u32> {
        self.graph_dist[block]
    }

    /// Centroid distance from the home block in meters.
    pub fn spatial_dist(&self, block: usize) -> f64 {
        self.spatial_dist[block]
    }

    pub fn contains(&self, block: usize) -> bool {
        self.rank_of[block].is_some()
    }
}

/// Orders the home's connected component by hop distance, breaking ties by
/// centroid distance and then by block id.
pub fn order_blocks(graph: &BlockGraph, home: &str) -> Result<Ordering> {
    let home = graph.index_of(home)?;
    Ok(order_from(graph, home))
}

pub fn order_from(graph: &BlockGraph, home: usize) -> Ordering {
    let graph_dist = graph.hop_distances(home);
    let origin = graph.block(home).centroid;
    let spatial_dist: Vec<f64> = graph
        .blocks()
        .iter()
        .map(|b| b.centroid.distance(&origin))
        .collect();
    let mut ranks: Vec<usize> = (0..graph.len()).filter(|&i| graph_dist[i].is_some()).collect();
    ranks.sort_by(|&a, &b| {
        graph_dist[a]
            .cmp(&graph_dist[b])
            .then_with(|| spatial_dist[a].total_cmp(&spatial_dist[b]))
            .then_with(|| graph.id(a).cmp(graph.id(b)))
    });
    debug_assert_eq!(ranks.first(), Some(&home));
    let mut rank_of = vec![None; graph.len()];
    for (r, &b) in ranks.iter().enumerate() {
        rank_of[b] = Some(r);
    }
    Ordering {
        home,
        ranks,
        rank_of,
        graph_dist,
        spatial_dist,
    }
}

/// Inclusion indicators and the connectivity indicator derived from them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InclusionState {
    pub included: Vec<bool>,
    pub connectivity: Vec<bool>,
}

impl InclusionState {
    /// Evaluates the connectivity indicator for every ranked block under a fixed
    /// inclusion pattern (indexed by block).
    pub fn observe(graph: &BlockGraph, ordering: &Ordering, included: Vec<bool>) -> Self {
        let mut connectivity = vec![false; graph.len()];
        for (rank, &b) in ordering.ranks().iter().enumerate().skip(1) {
            connectivity[b] = has_included_predecessor(graph, ordering, &included, b, rank);
        }
        Self {
            included,
            connectivity,
        }
    }
}

fn has_included_predecessor(
    graph: &BlockGraph,
    ordering: &Ordering,
    included: &[bool],
    block: usize,
    rank: usize,
) -> bool {
    graph.neighbors(block).iter().any(|&j| {
        included[j] && ordering.rank_of(j).is_some_and(|rj| rj < rank)
    })
}

/// The connectivity indicator of the block at rank `i`: whether an included
/// block of smaller rank is adjacent to it. Only inclusion at ranks below `i`
/// is consulted.
pub fn connectivity(
    graph: &BlockGraph,
    ordering: &Ordering,
    included: &[bool],
    i: usize,
) -> Result<bool> {
    let block = *ordering.ranks().get(i).ok_or(Error::RankOutOfRange {
        index: i,
        len: ordering.len(),
    })?;
    if i == 0 {
        return Ok(false);
    }
    Ok(has_included_predecessor(graph, ordering, included, block, i))
}

/// Blocks outside the neighborhood whose connectivity indicator is 1, in rank
/// order. Together with the neighborhood these are the likelihood rows.
pub fn boundary_set(
    graph: &BlockGraph,
    ordering: &Ordering,
    neighborhood: &[usize],
) -> Result<Vec<usize>> {
    let home = ordering.home();
    let disconnected = graph.disconnected_members(home, neighborhood);
    if !disconnected.is_empty() || !neighborhood.contains(&home) {
        return Err(Error::NotContiguous {
            subject: graph.id(home).to_string(),
            disconnected: disconnected.iter().map(|&b| graph.id(b).to_string()).collect(),
        });
    }
    let mut included = vec![false; graph.len()];
    for &b in neighborhood {
        included[b] = true;
    }
    let mut out = Vec::new();
    for &b in neighborhood {
        let rb = ordering.rank_of(b).unwrap_or(usize::MAX);
        for &j in graph.neighbors(b) {
            if !included[j] && ordering.rank_of(j).is_some_and(|rj| rj > rb) {
                out.push(j);
            }
        }
    }
    out.sort_unstable_by_key(|&b| ordering.rank_of(b));
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::rook_grid;

    pub(crate) fn path3() -> BlockGraph {
        let blocks = ["A", "B", "C"]
            .iter()
            .enumerate()
            .map(|(i, id)| test_block(id, i as f64 * 100.0, 0.0))
            .collect();
        BlockGraph::build(blocks, &[("A", "B"), ("B", "C")]).unwrap()
    }

    pub(crate) fn test_block(id: &str, x: f64, y: f64) -> Block {
        Block {
            id: id.to_string(),
            centroid: Point::new(x, y),
            area: 0.01,
            population: 100.0,
            race_counts: None,
            party_counts: None,
            education_counts: None,
            ownership_counts: None,
            median_income: None,
            has_church: false,
            has_park: false,
            has_school: false,
            dist_church: 500.0,
            dist_school: 500.0,
            block_group_id: "bg".into(),
            tract_id: "t".into(),
            zcta_id: None,
            road_region_id: "rr".into(),
        }
    }

    #[test]
    fn single_edge_is_symmetric() {
        let g = BlockGraph::build(
            vec![test_block("A", 0.0, 0.0), test_block("B", 1.0, 0.0)],
            &[("A", "B"), ("B", "A")],
        )
        .unwrap();
        assert!(g.are_adjacent(0, 1) && g.are_adjacent(1, 0));
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn rejects_self_loop_and_unknown_id() {
        let blocks = vec![test_block("A", 0.0, 0.0)];
        let err = BlockGraph::build(blocks.clone(), &[("A", "A")]).unwrap_err();
        assert!(err.to_string().contains("self-loop"));
        let err = BlockGraph::build(blocks, &[("A", "Z")]).unwrap_err();
        assert!(matches!(err, Error::UnknownBlock(id) if id == "Z"));
    }

    #[test]
    fn rook_grid_degrees() {
        let g = rook_grid(3, 3, 100.0);
        let center = g.index_of("b1_1").unwrap();
        assert_eq!(g.neighbors(center).len(), 4);
        for corner in ["b0_0", "b0_2", "b2_0", "b2_2"] {
            assert_eq!(g.neighbors(g.index_of(corner).unwrap()).len(), 2);
        }
    }

    #[test]
    fn path_ordering() {
        let g = path3();
        let o = order_blocks(&g, "A").unwrap();
        let ids: Vec<&str> = o.ranks().iter().map(|&b| g.id(b)).collect();
        assert_eq!(ids, ["A", "B", "C"]);
        assert!(order_blocks(&g, "Q").is_err());
    }

    #[test]
    fn spatial_tiebreak_within_hop_level() {
        // Four rook neighbors of the home at distances 150, 100, 130, 120.
        let mut blocks = vec![test_block("H", 0.0, 0.0)];
        blocks.push(test_block("n", 0.0, 150.0));
        blocks.push(test_block("e", 100.0, 0.0));
        blocks.push(test_block("s", 0.0, -130.0));
        blocks.push(test_block("w", -120.0, 0.0));
        let g = BlockGraph::build(blocks, &[("H", "n"), ("H", "e"), ("H", "s"), ("H", "w")])
            .unwrap();
        let o = order_blocks(&g, "H").unwrap();
        let ids: Vec<&str> = o.ranks().iter().map(|&b| g.id(b)).collect();
        assert_eq!(ids, ["H", "e", "w", "s", "n"]);
    }

    #[test]
    fn disconnected_blocks_are_unranked() {
        let blocks = vec![test_block("A", 0.0, 0.0), test_block("B", 1.0, 0.0), test_block("Z", 9.0, 9.0)];
        let g = BlockGraph::build(blocks, &[("A", "B")]).unwrap();
        let o = order_blocks(&g, "A").unwrap();
        assert_eq!(o.len(), 2);
        assert!(!o.contains(2));
        let single = order_blocks(&g, "Z").unwrap();
        assert_eq!(single.ranks(), &[2]);
    }

    #[test]
    fn connectivity_on_path() {
        let g = path3();
        let o = order_blocks(&g, "A").unwrap();
        let included = vec![true, false, false];
        assert!(connectivity(&g, &o, &included, 1).unwrap());
        assert!(!connectivity(&g, &o, &included, 2).unwrap());
        assert!(matches!(
            connectivity(&g, &o, &included, 3),
            Err(Error::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn connectivity_ignores_farther_included_blocks() {
        let g = rook_grid(1, 4, 100.0);
        let o = order_blocks(&g, "b0_0").unwrap();
        let state = InclusionState::observe(&g, &o, vec![true, false, true, false]);
        assert_eq!(state.connectivity, vec![false, true, false, true]);
    }

    #[test]
    fn schematic_block_never_considered() {
        // H - 1a - 2d, with 3a, 3c and 3d all hanging off 2d; 3d also touches
        // 3a and 3c, which rank ahead of it spatially.
        let blocks = vec![
            test_block("H", 0.0, 0.0),
            test_block("1a", 100.0, 0.0),
            test_block("2d", 200.0, 0.0),
            test_block("3a", 300.0, -40.0),
            test_block("3c", 300.0, 40.0),
            test_block("3d", 320.0, 0.0),
        ];
        let edges = [
            ("H", "1a"),
            ("1a", "2d"),
            ("2d", "3a"),
            ("2d", "3c"),
            ("2d", "3d"),
            ("3a", "3d"),
            ("3c", "3d"),
        ];
        let g = BlockGraph::build(blocks, &edges).unwrap();
        let o = order_blocks(&g, "H").unwrap();
        let ids: Vec<&str> = o.ranks().iter().map(|&b| g.id(b)).collect();
        assert_eq!(ids, ["H", "1a", "2d", "3a", "3c", "3d"]);
        let state = InclusionState::observe(&g, &o, vec![true, true, false, false, false, false]);
        assert!(!state.connectivity[g.index_of("3d").unwrap()]);
        assert!(state.connectivity[g.index_of("2d").unwrap()]);
    }

    #[test]
    fn boundary_on_path() {
        let g = path3();
        let o = order_blocks(&g, "A").unwrap();
        assert_eq!(boundary_set(&g, &o, &[0]).unwrap(), vec![1]);
        assert!(boundary_set(&g, &o, &[0, 1, 2]).unwrap().is_empty());
        let err = boundary_set(&g, &o, &[0, 2]).unwrap_err();
        assert!(matches!(err, Error::NotContiguous { ref disconnected, .. } if disconnected == &["C"]));
    }
}
