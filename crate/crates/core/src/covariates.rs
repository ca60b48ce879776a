//! Block-level covariates, design assembly, and the QR reparameterization.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{boundary_set, order_from, BlockGraph};
use crate::io::DrawnNeighborhood;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Race {
    White,
    Black,
    Hispanic,
    Other,
}

impl Race {
    pub const ALL: [Race; 4] = [Race::White, Race::Black, Race::Hispanic, Race::Other];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Dem,
    Rep,
    Ind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Education {
    College,
    NoCollege,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Homeowner {
    Owner,
    Renter,
    Other,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgeGroup {
    #[default]
    #[serde(rename = "0-40")]
    Under41,
    #[serde(rename = "41-55")]
    From41To55,
    #[serde(rename = "56-65")]
    From56To65,
    #[serde(rename = "66-75")]
    From66To75,
    #[serde(rename = "76+")]
    Over75,
}

/// Map-shading condition shown to the respondent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    #[default]
    C,
    P,
    PH,
    R,
    RH,
}

impl Condition {
    const TREATED: [Condition; 4] = [Condition::P, Condition::PH, Condition::R, Condition::RH];

    fn label(self) -> &'static str {
        match self {
            Condition::C => "C",
            Condition::P => "P",
            Condition::PH => "PH",
            Condition::R => "R",
            Condition::RH => "RH",
        }
    }
}

/// A survey respondent. Demographic fields are optional so geography-only data
/// can be fit with the baseline model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Respondent {
    pub id: String,
    pub home_block: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race: Option<Race>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub party: Option<Party>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub education: Option<Education>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homeowner: Option<Homeowner>,
    #[serde(default)]
    pub age_group: AgeGroup,
    #[serde(default)]
    pub retired: bool,
    #[serde(default)]
    pub tenure_years: f64,
    #[serde(default)]
    pub children: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<Condition>,
}

impl Respondent {
    /// Non-White, or Hispanic of any race.
    pub fn minority(&self) -> Option<bool> {
        self.race.map(|r| r != Race::White)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Full,
    #[default]
    Baseline,
    /// Full model without the individual covariates the census cannot supply.
    CensusOnly,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Full => "full",
            ModelKind::Baseline => "baseline",
            ModelKind::CensusOnly => "census_only",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Interact condition dummies with the same-race and same-party fractions.
    #[serde(default)]
    pub group_interactions: bool,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            group_interactions: false,
        }
    }

    fn demographic(&self) -> bool {
        self.kind != ModelKind::Baseline
    }

    fn individual(&self) -> bool {
        self.kind == ModelKind::Full
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<&str> = vec![
            "church",
            "log_dist_church",
            "park",
            "school",
            "log_dist_school",
            "same_block_group",
            "same_tract",
            "same_road_region",
            "same_tract_x_same_road_region",
            "population",
            "area",
        ];
        if self.individual() {
            names.extend(["children", "school_x_children", "log_dist_school_x_children"]);
        }
        if self.demographic() {
            names.extend([
                "frac_same_race",
                "minority",
                "frac_same_race_x_minority",
                "frac_same_party",
                "party_rep",
                "party_ind",
                "frac_same_party_x_party_rep",
                "frac_same_party_x_party_ind",
                "frac_same_ownership",
                "homeowner",
                "frac_same_ownership_x_homeowner",
                "frac_same_education",
                "college",
                "frac_same_education_x_college",
                "log_income",
                "log_income_x_college",
            ]);
        }
        if self.individual() {
            names.extend([
                "age_41_55",
                "age_56_65",
                "age_66_75",
                "age_76_plus",
                "retired",
                "tenure",
            ]);
        }
        let mut names: Vec<String> = names.into_iter().map(String::from).collect();
        if self.group_interactions {
            for c in Condition::TREATED {
                names.push(format!("group_{}", c.label()));
            }
            for c in Condition::TREATED {
                names.push(format!("frac_same_race_x_group_{}", c.label()));
            }
            for c in Condition::TREATED {
                names.push(format!("frac_same_party_x_group_{}", c.label()));
            }
        }
        names
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct GroupTotals {
    race: [f64; 4],
    population: f64,
    party: [f64; 3],
    education: [f64; 2],
    ownership: [f64; 2],
}

/// Computes covariates for (block, respondent, home) triples.
///
/// Zero-denominator fractions fall back to the block-group value, then to 0.5.
/// Missing block-group incomes fall back to the city-wide median.
#[derive(Clone, Debug)]
pub struct FeatureBuilder<'g> {
    graph: &'g BlockGraph,
    spec: ModelSpec,
    names: Vec<String>,
    group_of: Vec<usize>,
    groups: Vec<GroupTotals>,
    city_income: f64,
}

const MIN_FACILITY_DIST: f64 = 1.0;

impl<'g> FeatureBuilder<'g> {
    pub fn new(graph: &'g BlockGraph, spec: ModelSpec) -> Result<Self> {
        if spec.demographic() {
            let mut missing = Vec::new();
            let blocks = graph.blocks();
            if blocks.iter().any(|b| b.race_counts.is_none()) {
                missing.push("race_counts".to_string());
            }
            if blocks.iter().any(|b| b.party_counts.is_none()) {
                missing.push("party_counts".to_string());
            }
            if blocks.iter().any(|b| b.education_counts.is_none()) {
                missing.push("education_counts".to_string());
            }
            if blocks.iter().any(|b| b.ownership_counts.is_none()) {
                missing.push("ownership_counts".to_string());
            }
            if blocks.iter().all(|b| !valid_income(b.median_income)) {
                missing.push("median_income".to_string());
            }
            if !missing.is_empty() {
                return Err(Error::MissingColumns {
                    model: spec.kind.to_string(),
                    columns: missing,
                });
            }
        }

        let mut group_index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<GroupTotals> = Vec::new();
        let mut group_of = Vec::with_capacity(graph.len());
        for b in graph.blocks() {
            let next = groups.len();
            let g = *group_index.entry(b.block_group_id.as_str()).or_insert(next);
            if g == groups.len() {
                groups.push(GroupTotals::default());
            }
            group_of.push(g);
            let t = &mut groups[g];
            t.population += b.population;
            if let Some(r) = b.race_counts {
                for (acc, v) in t.race.iter_mut().zip([r.white, r.black, r.hispanic, r.other]) {
                    *acc += v;
                }
            }
            if let Some(p) = b.party_counts {
                for (acc, v) in t.party.iter_mut().zip([p.dem, p.rep, p.other]) {
                    *acc += v;
                }
            }
            if let Some(e) = b.education_counts {
                t.education[0] += e.college;
                t.education[1] += e.no_college;
            }
            if let Some(o) = b.ownership_counts {
                t.ownership[0] += o.owner;
                t.ownership[1] += o.renter;
            }
        }

        let mut incomes: Vec<f64> = graph
            .blocks()
            .iter()
            .filter_map(|b| b.median_income.filter(|&v| valid_income(Some(v))))
            .collect();
        incomes.sort_by(f64::total_cmp);
        let city_income = median_sorted(&incomes).unwrap_or(1.0);

        Ok(Self {
            graph,
            spec,
            names: spec.feature_names(),
            group_of,
            groups,
            city_income,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn graph(&self) -> &'g BlockGraph {
        self.graph
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Checks that the respondent carries every attribute the model consumes.
    pub fn check_respondent(&self, r: &Respondent) -> Result<()> {
        if !self.spec.demographic() {
            return Ok(());
        }
        let mut missing = Vec::new();
        if r.race.is_none() {
            missing.push("race".to_string());
        }
        if r.party.is_none() {
            missing.push("party".to_string());
        }
        if r.education.is_none() {
            missing.push("education".to_string());
        }
        if r.homeowner.is_none() {
            missing.push("homeowner".to_string());
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingColumns {
                model: format!("{} (respondent `{}`)", self.spec.kind, r.id),
                columns: missing,
            })
        }
    }

    fn fraction(&self, block: usize, pick: impl Fn(&GroupTotals) -> (f64, f64), own: (f64, f64)) -> f64 {
        let (num, den) = own;
        if den > 0.0 {
            return (num / den).clamp(0.0, 1.0);
        }
        let (gnum, gden) = pick(&self.groups[self.group_of[block]]);
        if gden > 0.0 {
            (gnum / gden).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }

    /// Feature vector for `block` as seen by `respondent` living in `home`,
    /// ordered as [`ModelSpec::feature_names`].
    pub fn features(&self, block: usize, respondent: &Respondent, home: usize) -> Vec<f64> {
        let b = self.graph.block(block);
        let h = self.graph.block(home);
        let ind = |v: bool| if v { 1.0 } else { 0.0 };
        let log_dist_church = b.dist_church.max(MIN_FACILITY_DIST).ln();
        let log_dist_school = b.dist_school.max(MIN_FACILITY_DIST).ln();
        let same_tract = ind(b.tract_id == h.tract_id);
        let same_road = ind(b.road_region_id == h.road_region_id);

        let mut x = Vec::with_capacity(self.names.len());
        x.extend([
            ind(b.has_church),
            log_dist_church,
            ind(b.has_park),
            ind(b.has_school),
            log_dist_school,
            ind(b.block_group_id == h.block_group_id),
            same_tract,
            same_road,
            same_tract * same_road,
            (b.population / 10_000.0).sqrt(),
            b.area.sqrt(),
        ]);

        let children = ind(respondent.children);
        if self.spec.individual() {
            x.extend([children, ind(b.has_school) * children, log_dist_school * children]);
        }

        let mut frac_race = 0.0;
        let mut frac_party = 0.0;
        if self.spec.demographic() {
            let race = respondent.race.unwrap_or(Race::White);
            let ri = race as usize;
            let rc = b.race_counts.unwrap_or_default();
            let own_race = [rc.white, rc.black, rc.hispanic, rc.other][ri];
            frac_race = self.fraction(block, |g| (g.race[ri], g.population), (own_race, b.population));
            let minority = ind(race != Race::White);

            let party = respondent.party.unwrap_or(Party::Ind);
            let pi = match party {
                Party::Dem => 0,
                Party::Rep => 1,
                Party::Ind => 2,
            };
            let pc = b.party_counts.unwrap_or_default();
            frac_party = self.fraction(
                block,
                |g| (g.party[pi], g.party.iter().sum()),
                ([pc.dem, pc.rep, pc.other][pi], pc.total()),
            );
            let rep = ind(party == Party::Rep);
            let indep = ind(party == Party::Ind);

            let owner = respondent.homeowner == Some(Homeowner::Owner);
            let oi = if owner { 0 } else { 1 };
            let oc = b.ownership_counts.unwrap_or_default();
            let frac_own = self.fraction(
                block,
                |g| (g.ownership[oi], g.ownership[0] + g.ownership[1]),
                ([oc.owner, oc.renter][oi], oc.total()),
            );

            let college = respondent.education == Some(Education::College);
            let ei = if college { 0 } else { 1 };
            let ec = b.education_counts.unwrap_or_default();
            let frac_edu = self.fraction(
                block,
                |g| (g.education[ei], g.education[0] + g.education[1]),
                ([ec.college, ec.no_college][ei], ec.total()),
            );
            let college = ind(college);
            let owner = ind(owner);

            let income = b
                .median_income
                .filter(|&v| valid_income(Some(v)))
                .unwrap_or(self.city_income);
            let log_income = income.ln();

            x.extend([
                frac_race,
                minority,
                frac_race * minority,
                frac_party,
                rep,
                indep,
                frac_party * rep,
                frac_party * indep,
                frac_own,
                owner,
                frac_own * owner,
                frac_edu,
                college,
                frac_edu * college,
                log_income,
                log_income * college,
            ]);
        }

        if self.spec.individual() {
            let age = respondent.age_group;
            x.extend([
                ind(age == AgeGroup::From41To55),
                ind(age == AgeGroup::From56To65),
                ind(age == AgeGroup::From66To75),
                ind(age == AgeGroup::Over75),
                ind(respondent.retired),
                respondent.tenure_years.max(0.0).sqrt(),
            ]);
        }

        if self.spec.group_interactions {
            let group = respondent.group.unwrap_or_default();
            let dummies: Vec<f64> = Condition::TREATED.iter().map(|&c| ind(group == c)).collect();
            x.extend(dummies.iter().copied());
            x.extend(dummies.iter().map(|d| d * frac_race));
            x.extend(dummies.iter().map(|d| d * frac_party));
        }

        debug_assert_eq!(x.len(), self.names.len());
        x
    }

    /// Features paired with their names.
    pub fn named_features(&self, block: usize, respondent: &Respondent, home: usize) -> Vec<(String, f64)> {
        self.names
            .iter()
            .cloned()
            .zip(self.features(block, respondent, home))
            .collect()
    }
}

fn valid_income(v: Option<f64>) -> bool {
    v.is_some_and(|v| v.is_finite() && v > 0.0)
}

fn median_sorted(v: &[f64]) -> Option<f64> {
    match v.len() {
        0 => None,
        n if n % 2 == 1 => Some(v[n / 2]),
        n => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

/// Floor applied to centroid distances before taking logs.
pub const MIN_SPATIAL_DIST: f64 = 1.0;

pub fn log_spatial_dist(meters: f64) -> f64 {
    meters.max(MIN_SPATIAL_DIST).ln()
}

/// One block-level observation of the exclusion GLMM.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationRow {
    pub respondent_index: usize,
    pub block: usize,
    /// `true` for boundary blocks (Y = 0).
    pub excluded: bool,
    pub log_spatial_dist: f64,
    pub features: Vec<f64>,
}

/// Thin QR factor of the centered columns `[log_spatial_dist, features...]`,
/// scaled so that `Q` has columns of norm `sqrt(n - 1)`.
#[derive(Clone, Debug)]
pub struct QrFactor {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub r_inv: DMatrix<f64>,
}

impl QrFactor {
    /// Natural coefficients (log distance first) to QR-space coefficients.
    pub fn to_qr(&self, natural: &[f64]) -> Vec<f64> {
        (&self.r * DVector::from_column_slice(natural)).as_slice().to_vec()
    }

    pub fn to_natural(&self, qr: &[f64]) -> Vec<f64> {
        (&self.r_inv * DVector::from_column_slice(qr)).as_slice().to_vec()
    }
}

#[derive(Clone, Debug)]
pub struct DesignMatrix {
    pub spec: ModelSpec,
    pub feature_names: Vec<String>,
    pub respondent_ids: Vec<String>,
    pub rows: Vec<ObservationRow>,
    /// Column means of `[log_spatial_dist, features...]`.
    pub centering: Vec<f64>,
    pub qr: Option<QrFactor>,
}

impl DesignMatrix {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_respondents(&self) -> usize {
        self.respondent_ids.len()
    }

    /// Column names of the QR-decomposed matrix.
    pub fn column_names(&self) -> Vec<String> {
        std::iter::once("log_spatial_dist".to_string())
            .chain(self.feature_names.iter().cloned())
            .collect()
    }

    fn column(&self, row: &ObservationRow, j: usize) -> f64 {
        if j == 0 {
            row.log_spatial_dist
        } else {
            row.features[j - 1]
        }
    }

    /// `intercept + [log d, x] . natural` for every row.
    pub fn linear_predictor_natural(&self, intercept: f64, natural: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| {
                intercept
                    + natural[0] * row.log_spatial_dist
                    + row.features.iter().zip(&natural[1..]).map(|(x, g)| x * g).sum::<f64>()
            })
            .collect()
    }

    /// `centered_intercept + Q . qr_coefs` for every row.
    pub fn linear_predictor_qr(&self, centered_intercept: f64, qr_coefs: &[f64]) -> Option<Vec<f64>> {
        let qr = self.qr.as_ref()?;
        let eta = &qr.q * DVector::from_column_slice(qr_coefs);
        Some(eta.iter().map(|v| v + centered_intercept).collect())
    }

    /// Writes the design as CSV for external cross-checking.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "respondent_id".to_string(),
            "block_index".to_string(),
            "excluded".to_string(),
            "log_spatial_dist".to_string(),
        ];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                self.respondent_ids[row.respondent_index].clone(),
                row.block.to_string(),
                (row.excluded as u8).to_string(),
                row.log_spatial_dist.to_string(),
            ];
            rec.extend(row.features.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds the design and centers and QR-decomposes its columns.
pub fn assemble_design(
    graph: &BlockGraph,
    responses: &[DrawnNeighborhood],
    respondents: &[Respondent],
    spec: ModelSpec,
) -> Result<DesignMatrix> {
    qr_reparameterize(assemble_rows(graph, responses, respondents, spec)?)
}

/// One observation row per non-home neighborhood block and per boundary block,
/// for every response. No centering or QR step.
///
/// Home blocks are included with probability one and carry no likelihood
/// information, so they get no row.
pub fn assemble_rows(
    graph: &BlockGraph,
    responses: &[DrawnNeighborhood],
    respondents: &[Respondent],
    spec: ModelSpec,
) -> Result<DesignMatrix> {
    let builder = FeatureBuilder::new(graph, spec)?;
    let by_id: HashMap<&str, &Respondent> = respondents.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut respondent_ids = Vec::with_capacity(responses.len());
    let mut rows = Vec::new();
    for (ri, response) in responses.iter().enumerate() {
        let respondent = by_id
            .get(response.respondent_id.as_str())
            .ok_or_else(|| Error::UnknownRespondent(response.respondent_id.clone()))?;
        builder.check_respondent(respondent)?;
        let home = graph.index_of(&respondent.home_block)?;
        let ordering = order_from(graph, home);
        let members = response
            .block_ids
            .iter()
            .map(|id| graph.index_of(id))
            .collect::<Result<Vec<_>>>()?;
        let boundary = boundary_set(graph, &ordering, &members).map_err(|e| match e {
            Error::NotContiguous { disconnected, .. } => Error::NotContiguous {
                subject: respondent.id.clone(),
                disconnected,
            },
            other => other,
        })?;
        let mut included: Vec<usize> = members.into_iter().filter(|&b| b != home).collect();
        included.sort_unstable_by_key(|&b| ordering.rank_of(b));
        included.dedup();
        let tagged = included
            .into_iter()
            .map(|b| (b, false))
            .chain(boundary.into_iter().map(|b| (b, true)));
        for (block, excluded) in tagged {
            rows.push(ObservationRow {
                respondent_index: ri,
                block,
                excluded,
                log_spatial_dist: log_spatial_dist(ordering.spatial_dist(block)),
                features: builder.features(block, respondent, home),
            });
        }
        respondent_ids.push(respondent.id.clone());
    }
    Ok(DesignMatrix {
        spec,
        feature_names: builder.names().to_vec(),
        respondent_ids,
        rows,
        centering: Vec::new(),
        qr: None,
    })
}

/// Centers `[log_spatial_dist, features...]` and stores a thin QR factor scaled
/// by `sqrt(n - 1)`. Rejects rank-deficient designs.
pub fn qr_reparameterize(mut design: DesignMatrix) -> Result<DesignMatrix> {
    let n = design.rows.len();
    let k = design.n_features() + 1;
    if n == 0 {
        design.centering = vec![0.0; k];
        design.qr = None;
        return Ok(design);
    }
    if n < k + 1 {
        return Err(Error::RankDeficient {
            columns: design.column_names(),
        });
    }
    let mut centering = vec![0.0; k];
    for row in &design.rows {
        for (j, c) in centering.iter_mut().enumerate() {
            *c += design.column(row, j);
        }
    }
    for c in &mut centering {
        *c /= n as f64;
    }
    let centered = DMatrix::from_fn(n, k, |i, j| design.column(&design.rows[i], j) - centering[j]);
    let col_norms: Vec<f64> = (0..k).map(|j| centered.column(j).norm()).collect();
    let qr = centered.qr();
    let mut q = qr.q();
    let mut r = qr.r();

    let scale_ref = col_norms.iter().copied().fold(0.0, f64::max).max(1e-300);
    let collinear: Vec<String> = (0..k)
        .filter(|&j| r[(j, j)].abs() <= 1e-9 * scale_ref.max(col_norms[j]))
        .map(|j| design.column_names()[j].clone())
        .collect();
    if !collinear.is_empty() {
        return Err(Error::RankDeficient { columns: collinear });
    }
    // Householder signs are arbitrary; make the diagonal positive.
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            r.row_mut(j).neg_mut();
            q.column_mut(j).neg_mut();
        }
    }
    let s = ((n - 1) as f64).sqrt();
    q *= s;
    r /= s;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient { columns: design.column_names() })?;
    design.centering = centering;
    design.qr = Some(QrFactor { q, r, r_inv });
    Ok(design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Point, RaceCounts};
    use crate::synth::rook_grid;

    fn respondent(race: Race) -> Respondent {
        Respondent {
            id: "r1".into(),
            home_block: "b0_0".into(),
            race: Some(race),
            party: Some(Party::Dem),
            education: Some(Education::College),
            homeowner: Some(Homeowner::Owner),
            age_group: AgeGroup::From41To55,
            retired: false,
            tenure_years: 9.0,
            children: true,
            group: None,
        }
    }

    fn demographic_grid() -> BlockGraph {
        let g = rook_grid(2, 2, 100.0);
        let blocks = g
            .blocks()
            .iter()
            .cloned()
            .map(|mut b| {
                b.race_counts = Some(RaceCounts {
                    white: 80.0,
                    black: 10.0,
                    hispanic: 10.0,
                    other: 0.0,
                });
                b.population = 100.0;
                b.party_counts = Some(Default::default());
                b.education_counts = Some(Default::default());
                b.ownership_counts = Some(Default::default());
                b.median_income = Some(50_000.0);
                b
            })
            .collect();
        let edges: Vec<(String, String)> =
            g.edges().map(|(a, b)| (g.id(a).to_string(), g.id(b).to_string())).collect();
        BlockGraph::build(blocks, &edges).unwrap()
    }

    fn feature(b: &FeatureBuilder, block: usize, r: &Respondent, name: &str) -> f64 {
        let i = b.names().iter().position(|n| n == name).unwrap();
        b.features(block, r, 0)[i]
    }

    #[test]
    fn population_and_area_transforms() {
        let mut g = rook_grid(1, 2, 100.0);
        let mut blocks = g.blocks().to_vec();
        blocks[1].population = 2_500.0;
        blocks[1].area = 4.0;
        g = BlockGraph::build(blocks, &[("b0_0", "b0_1")]).unwrap();
        let b = FeatureBuilder::new(&g, ModelSpec::new(ModelKind::Baseline)).unwrap();
        let r = respondent(Race::White);
        assert_eq!(feature(&b, 1, &r, "population"), 0.5);
        assert_eq!(feature(&b, 1, &r, "area"), 2.0);
    }

    #[test]
    fn same_race_fraction() {
        let g = demographic_grid();
        let b = FeatureBuilder::new(&g, ModelSpec::new(ModelKind::Full)).unwrap();
        let white = respondent(Race::White);
        assert!((feature(&b, 1, &white, "frac_same_race") - 0.8).abs() < 1e-15);
        assert_eq!(feature(&b, 1, &white, "minority"), 0.0);
        let other = respondent(Race::Other);
        assert_eq!(feature(&b, 1, &other, "frac_same_race"), 0.0);
        assert_eq!(feature(&b, 1, &other, "frac_same_race_x_minority"), 0.0);
    }

    #[test]
    fn empty_denominators_fall_back() {
        let g = demographic_grid();
        let b = FeatureBuilder::new(&g, ModelSpec::new(ModelKind::Full)).unwrap();
        // Party counts are all zero in this block group, so no fallback exists.
        assert_eq!(feature(&b, 1, &respondent(Race::White), "frac_same_party"), 0.5);

        let mut blocks = g.blocks().to_vec();
        blocks[1].population = 0.0;
        blocks[1].race_counts = Some(RaceCounts::default());
        let edges: Vec<(String, String)> =
            g.edges().map(|(a, b)| (g.id(a).to_string(), g.id(b).to_string())).collect();
        let g2 = BlockGraph::build(blocks, &edges).unwrap();
        let b2 = FeatureBuilder::new(&g2, ModelSpec::new(ModelKind::Full)).unwrap();
        // Block group: three blocks at 80% White.
        assert!((feature(&b2, 1, &respondent(Race::White), "frac_same_race") - 0.8).abs() < 1e-12);
    }

    #[test]
    fn facility_distance_clamped() {
        let mut blocks = rook_grid(1, 2, 100.0).blocks().to_vec();
        blocks[1].dist_church = 0.0;
        let g = BlockGraph::build(blocks, &[("b0_0", "b0_1")]).unwrap();
        let b = FeatureBuilder::new(&g, ModelSpec::new(ModelKind::Baseline)).unwrap();
        assert_eq!(feature(&b, 1, &respondent(Race::White), "log_dist_church"), 0.0);
    }

    #[test]
    fn full_model_requires_demographic_columns() {
        let g = rook_grid(2, 2, 100.0);
        let err = FeatureBuilder::new(&g, ModelSpec::new(ModelKind::Full)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("race_counts") && msg.contains("median_income"), "{msg}");
        assert!(FeatureBuilder::new(&g, ModelSpec::new(ModelKind::Baseline)).is_ok());
    }

    #[test]
    fn baseline_is_prefix_subset_of_full() {
        let g = demographic_grid();
        let full = FeatureBuilder::new(&g, ModelSpec::new(ModelKind::Full)).unwrap();
        let base = FeatureBuilder::new(&g, ModelSpec::new(ModelKind::Baseline)).unwrap();
        let census = FeatureBuilder::new(&g, ModelSpec::new(ModelKind::CensusOnly)).unwrap();
        let r = respondent(Race::Black);
        let full_named: HashMap<String, f64> = full.named_features(3, &r, 0).into_iter().collect();
        for (name, v) in base.named_features(3, &r, 0).into_iter().chain(census.named_features(3, &r, 0)) {
            assert_eq!(full_named[&name], v, "{name}");
        }
        assert!(base.names().len() < census.names().len());
        assert!(census.names().len() < full.names().len());
    }

    #[test]
    fn home_only_response_on_path() {
        let blocks = ["A", "B", "C"]
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let mut b = rook_grid(1, 1, 1.0).blocks()[0].clone();
                b.id = id.to_string();
                b.centroid = Point::new(100.0 * i as f64, 0.0);
                b
            })
            .collect();
        let g = BlockGraph::build(blocks, &[("A", "B"), ("B", "C")]).unwrap();
        let mut r = respondent(Race::White);
        r.home_block = "A".into();
        let resp = DrawnNeighborhood::new("r1", vec!["A".to_string()]);
        let design = assemble_rows(&g, &[resp.clone()], &[r.clone()], ModelSpec::default()).unwrap();
        // A is the home block (no row); B is the only boundary block.
        assert_eq!(design.rows.len(), 1);
        assert_eq!(design.rows[0].block, 1);
        assert!(design.rows[0].excluded);
        assert!((design.rows[0].log_spatial_dist - 100f64.ln()).abs() < 1e-12);
        // A single row cannot support the QR step.
        let err = assemble_design(&g, &[resp], &[r], ModelSpec::default()).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn unknown_respondent_rejected() {
        let g = rook_grid(2, 2, 100.0);
        let resp = DrawnNeighborhood::new("ghost", vec!["b0_0".to_string()]);
        let err = assemble_design(&g, &[resp], &[], ModelSpec::default()).unwrap_err();
        assert!(matches!(err, Error::UnknownRespondent(id) if id == "ghost"));
    }

    fn design_from(columns: &[Vec<f64>]) -> DesignMatrix {
        let n = columns[0].len();
        let rows = (0..n)
            .map(|i| ObservationRow {
                respondent_index: 0,
                block: i,
                excluded: i % 2 == 0,
                log_spatial_dist: columns[0][i],
                features: columns[1..].iter().map(|c| c[i]).collect(),
            })
            .collect();
        DesignMatrix {
            spec: ModelSpec::default(),
            feature_names: (1..columns.len()).map(|j| format!("x{j}")).collect(),
            respondent_ids: vec!["r".into()],
            rows,
            centering: vec![],
            qr: None,
        }
    }

    #[test]
    fn orthogonal_design_gives_diagonal_map() {
        let a = vec![1.0, -1.0, 1.0, -1.0];
        let b = vec![1.0, 1.0, -1.0, -1.0];
        let d = qr_reparameterize(design_from(&[a.clone(), b.clone()])).unwrap();
        let qr = d.qr.as_ref().unwrap();
        assert!(qr.r[(0, 1)].abs() < 1e-12);
        let s = 3f64.sqrt();
        for i in 0..4 {
            assert!((qr.q[(i, 0)] - a[i] / 2.0 * s).abs() < 1e-12);
            assert!((qr.q[(i, 1)] - b[i] / 2.0 * s).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let a = vec![1.0, 2.0, 3.0, 5.0, 8.0];
        let b = vec![0.0, 1.0, 0.0, 1.0, 1.0];
        let err = qr_reparameterize(design_from(&[a, b.clone(), b])).unwrap_err();
        match err {
            Error::RankDeficient { columns } => assert_eq!(columns, vec!["x2".to_string()]),
            e => panic!("{e}"),
        }
    }
}
