use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nbhd::consensus::{build_consensus, consensus_curve, default_thresholds, ConsensusConfig};
use nbhd::covariates::{assemble_design, FeatureBuilder, ModelKind, ModelSpec, Respondent};
use nbhd::evaluation::{
    aggregate_demographic_shift, f1_difference_summary, write_shift_csv, Baseline, CircleRadius, EvalInput,
    EvalReport, Split,
};
use nbhd::generator::{predict_all, simulate_responses, SimulatedNeighborhood, SimulationConfig};
use nbhd::graph::BlockGraph;
use nbhd::inference::{effect_estimates, fit, write_effects_csv, FitConfig, PosteriorApprox};
use nbhd::io::{
    graph_edges, ingest_response, load_graph, read_json, read_jsonl, read_respondents, read_responses,
    split_train_test, write_json, write_jsonl, DrawnNeighborhood, ResponseRecord, SplitManifest, TrainSize,
};
use nbhd::synth::{known_params, synth_city, synth_respondents, RacePattern, SyntheticCity};

#[derive(Parser)]
#[command(name = "nbhd", version, about = "Subjective neighborhoods on census-block graphs")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct City {
    /// Blocks file (.json, or CSV otherwise).
    #[arg(long)]
    blocks: PathBuf,
    /// Rook-adjacency edges file (.json, or CSV otherwise).
    #[arg(long)]
    edges: PathBuf,
}

impl City {
    fn load(&self) -> Result<BlockGraph> {
        load_graph(&self.blocks, &self.edges)
            .with_context(|| format!("loading {} and {}", self.blocks.display(), self.edges.display()))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Full,
    Baseline,
    CensusOnly,
}

impl From<Model> for ModelKind {
    fn from(m: Model) -> Self {
        match m {
            Model::Full => ModelKind::Full,
            Model::Baseline => ModelKind::Baseline,
            Model::CensusOnly => ModelKind::CensusOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Pattern {
    Gradient,
    SplitDiversity,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Circle,
    Tract,
    Zcta,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Circle => Baseline::Circle,
            BaselineArg::Tract => Baseline::Tract,
            BaselineArg::Zcta => Baseline::Zcta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RadiusArg {
    Prediction,
    Drawn,
}

#[derive(Subcommand)]
enum Command {
    /// Check a city and, optionally, respondents and responses; exits nonzero on any rejection.
    Validate {
        #[command(flatten)]
        city: City,
        #[arg(long, requires = "responses")]
        respondents: Option<PathBuf>,
        #[arg(long, requires = "respondents")]
        responses: Option<PathBuf>,
    },
    /// Write a synthetic city, respondents, and responses drawn from known parameters.
    Simulate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15)]
        rows: usize,
        #[arg(long, default_value_t = 15)]
        cols: usize,
        #[arg(long, default_value_t = 150)]
        respondents: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.4)]
        alpha: f64,
        /// Meters.
        #[arg(long, default_value_t = 500.0)]
        length_scale: f64,
        /// Respondent-effect scale; 0 for none.
        #[arg(long, default_value_t = 0.3)]
        sigma: f64,
        /// Linear-predictor coefficient on the same-race fraction.
        #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
        same_race: f64,
        /// Linear-predictor coefficient on the same-party fraction.
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        same_party: f64,
        #[arg(long, value_enum, default_value_t = Pattern::Gradient)]
        pattern: Pattern,
        /// Geography only: no demographic counts, baseline-model truth.
        #[arg(long)]
        no_demographics: bool,
    },
    /// Fit the model and write the posterior approximation as JSON.
    Fit {
        #[command(flatten)]
        city: City,
        #[arg(long)]
        respondents: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, value_enum, default_value_t = Model::Full)]
        model: Model,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training responses: a count, or a fraction when written with a decimal point.
        #[arg(long, default_value = "0.8")]
        train: TrainSize,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long)]
        no_random_effects: bool,
        /// Interact condition dummies with the same-race and same-party fractions.
        #[arg(long)]
        group_interactions: bool,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the train/test manifest.
        #[arg(long)]
        split: PathBuf,
    },
    /// Margin-scale effect report (CSV) from a fit.
    Effects {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior predictive neighborhoods as JSON lines.
    Predict {
        #[command(flatten)]
        city: City,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        respondents: PathBuf,
        /// Only predict for respondents in this manifest.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        sims: usize,
        /// Draw new respondent effects even for fitted respondents.
        #[arg(long)]
        fresh_effects: bool,
        #[arg(long)]
        max_blocks: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against drawn neighborhoods and baselines.
    Evaluate {
        #[command(flatten)]
        city: City,
        #[arg(long)]
        respondents: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Repeat to compare against several baselines.
        #[arg(long, value_enum, default_values_t = [BaselineArg::Circle])]
        baseline: Vec<BaselineArg>,
        #[arg(long, value_enum, default_value_t = RadiusArg::Prediction)]
        circle_radius: RadiusArg,
        /// Label for the model column.
        #[arg(long, default_value = "full")]
        model_name: String,
        /// Per-respondent CSV.
        #[arg(long)]
        out: PathBuf,
        /// City-level JSON summary.
        #[arg(long)]
        summary: PathBuf,
    },
    /// Consensus community around an anchor block.
    Consensus {
        #[command(flatten)]
        city: City,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        anchor: String,
        #[arg(long, default_value_t = 100)]
        residents: usize,
        #[arg(long, default_value_t = 20)]
        sims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Share threshold for the reported consensus set.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        /// Consensus-size curve CSV.
        #[arg(long)]
        curve: PathBuf,
    },
    /// Full-minus-baseline composition of predicted neighborhoods by local-diversity tercile.
    AggregateShift {
        #[command(flatten)]
        city: City,
        #[arg(long)]
        respondents: PathBuf,
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// Miles.
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Validate {
            city,
            respondents,
            responses,
        } => validate(&city, respondents.as_deref().zip(responses.as_deref())),
        Command::Simulate {
            out,
            rows,
            cols,
            respondents,
            seed,
            alpha,
            length_scale,
            sigma,
            same_race,
            same_party,
            pattern,
            no_demographics,
        } => {
            let config = SyntheticCity {
                demographics: !no_demographics,
                race_pattern: match pattern {
                    Pattern::Gradient => RacePattern::Gradient,
                    Pattern::SplitDiversity => RacePattern::SplitDiversity,
                },
                ..SyntheticCity::grid(rows, cols)
            };
            let graph = synth_city(&config, seed)?;
            let people = synth_respondents(&graph, respondents, seed);
            let (spec, nonzero) = if no_demographics {
                (ModelSpec::new(ModelKind::Baseline), vec![])
            } else {
                (
                    ModelSpec::new(ModelKind::Full),
                    vec![("frac_same_race", same_race), ("frac_same_party", same_party)],
                )
            };
            let builder = FeatureBuilder::new(&graph, spec)?;
            let truth = known_params(builder.names(), alpha, length_scale, (sigma > 0.0).then_some(sigma), &nonzero)?;
            let drawn = simulate_responses(&builder, &people, &truth, seed)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_json(&out.join("blocks.json"), graph.blocks())?;
            write_json(&out.join("edges.json"), &graph_edges(&graph))?;
            write_json(&out.join("respondents.json"), &people)?;
            let records: Vec<ResponseRecord> = drawn.iter().map(ResponseRecord::from).collect();
            write_json(&out.join("responses.json"), &records)?;
            write_json(
                &out.join("truth.json"),
                &Truth {
                    model: spec.kind,
                    feature_names: builder.names(),
                    params: &truth,
                },
            )?;
            eprintln!(
                "wrote {} blocks, {} respondents ({} usable responses) to {}",
                graph.len(),
                people.len(),
                drawn.iter().filter(|d| d.usable).count(),
                out.display()
            );
            Ok(())
        }
        Command::Fit {
            city,
            respondents,
            responses,
            model,
            seed,
            train,
            draws,
            no_random_effects,
            group_interactions,
            out,
            split,
        } => {
            let graph = city.load()?;
            let people = read_respondents(&respondents)?;
            let drawn = ingest_all(&graph, &people, &read_responses(&responses)?)?;
            let usable: Vec<DrawnNeighborhood> = drawn.into_iter().filter(|d| d.usable).collect();
            let (train_set, test_set) = split_train_test(&usable, train, seed)?;
            write_json(
                &split,
                &SplitManifest {
                    seed,
                    train: train_set.iter().map(|d| d.respondent_id.clone()).collect(),
                    test: test_set.iter().map(|d| d.respondent_id.clone()).collect(),
                },
            )?;
            let spec = ModelSpec {
                kind: model.into(),
                group_interactions,
            };
            let design = assemble_design(&graph, &train_set, &people, spec)?;
            eprintln!(
                "fitting {} model: {} respondents, {} rows, {} features",
                spec.kind,
                design.n_respondents(),
                design.rows.len(),
                design.n_features()
            );
            let approx = fit(
                &design,
                &FitConfig {
                    seed,
                    n_draws: draws,
                    random_effects: !no_random_effects,
                    ..FitConfig::default()
                },
            )?;
            for w in &approx.diagnostics.warnings {
                eprintln!("warning: {w}");
            }
            for key in ["alpha", "length_scale", "sigma"] {
                if let Some(s) = approx.summary(key) {
                    eprintln!("{key}: median {:.4} (95% {:.4} to {:.4})", s.median, s.q025, s.q975);
                }
            }
            write_json(&out, &approx)?;
            Ok(())
        }
        Command::Effects { fit, out } => {
            let approx: PosteriorApprox = read_json(&fit)?;
            write_effects_csv(&effect_estimates(&approx), create(&out)?)?;
            Ok(())
        }
        Command::Predict {
            city,
            fit,
            respondents,
            split,
            sims,
            fresh_effects,
            max_blocks,
            seed,
            out,
        } => {
            let graph = city.load()?;
            let approx: PosteriorApprox = read_json(&fit)?;
            let mut people = read_respondents(&respondents)?;
            if let Some(path) = split {
                let manifest: SplitManifest = read_json(&path)?;
                people.retain(|r| manifest.is_train(&r.id) || manifest.test.contains(&r.id));
            }
            let builder = FeatureBuilder::new(&graph, approx.spec)?;
            let predictions = predict_all(
                &builder,
                &people,
                &approx,
                &SimulationConfig {
                    n_sims: sims,
                    seed,
                    max_blocks,
                    fresh_random_effects: fresh_effects,
                },
            )?;
            let flat: Vec<SimulatedNeighborhood> = predictions.into_iter().flatten().collect();
            let truncated = flat.iter().filter(|s| s.truncated).count();
            if truncated > 0 {
                eprintln!("warning: {truncated} of {} predictions hit the block cap", flat.len());
            }
            write_jsonl(&out, &flat)?;
            Ok(())
        }
        Command::Evaluate {
            city,
            respondents,
            responses,
            predictions,
            split,
            baseline,
            circle_radius,
            model_name,
            out,
            summary,
        } => {
            let graph = city.load()?;
            let people = read_respondents(&respondents)?;
            let drawn: Vec<DrawnNeighborhood> = ingest_all(&graph, &people, &read_responses(&responses)?)?
                .into_iter()
                .filter(|d| d.usable)
                .collect();
            let manifest: SplitManifest = read_json(&split)?;
            let grouped = group_predictions(read_jsonl(&predictions)?);
            let input = EvalInput {
                graph: &graph,
                respondents: &people,
                drawn: &drawn,
                predictions: &grouped,
                model: &model_name,
                circle_radius: match circle_radius {
                    RadiusArg::Prediction => CircleRadius::Prediction,
                    RadiusArg::Drawn => CircleRadius::Drawn,
                },
            };
            let split_of = |rid: &str| {
                if manifest.is_train(rid) {
                    Some(Split::InSample)
                } else if manifest.test.iter().any(|t| t == rid) {
                    Some(Split::OutOfSample)
                } else {
                    None
                }
            };
            let mut report = EvalReport { rows: Vec::new() };
            for b in baseline {
                report.rows.extend(f1_difference_summary(&input, b.into(), split_of)?.rows);
            }
            report.write_csv(create(&out)?)?;
            let s = report.summary(&model_name);
            for row in &s.splits {
                eprintln!(
                    "{} vs {}: {} respondents, median F1 difference {:.4}",
                    row.split, row.baseline, row.n_respondents, row.median_f1_diff
                );
            }
            write_json(&summary, &s)?;
            Ok(())
        }
        Command::Consensus {
            city,
            fit,
            anchor,
            residents,
            sims,
            seed,
            threshold,
            out,
            curve,
        } => {
            let graph = city.load()?;
            let approx: PosteriorApprox = read_json(&fit)?;
            let builder = FeatureBuilder::new(&graph, approx.spec)?;
            let map = build_consensus(
                &builder,
                &anchor,
                &approx,
                &ConsensusConfig {
                    n_residents: residents,
                    sims_per_resident: sims,
                    seed,
                    ..ConsensusConfig::default()
                },
            )?;
            let c = consensus_curve(&map, &default_thresholds())?;
            if !c.is_non_increasing() {
                bail!("consensus curve is not monotone: {:?}", c.sizes);
            }
            let disconnected = map.disconnected_at(&graph, threshold)?;
            if !disconnected.is_empty() {
                eprintln!(
                    "note: {} blocks of the consensus set at {threshold} are not connected to the anchor",
                    disconnected.len()
                );
            }
            write_json(
                &out,
                &ConsensusExport {
                    threshold,
                    consensus: map.at_threshold(threshold),
                    disconnected,
                    map: &map,
                },
            )?;
            c.write_csv(create(&curve)?)?;
            Ok(())
        }
        Command::AggregateShift {
            city,
            respondents,
            full,
            baseline,
            radius,
            out,
        } => {
            let graph = city.load()?;
            let people = read_respondents(&respondents)?;
            let mut full = by_respondent(read_jsonl(&full)?);
            let mut base = by_respondent(read_jsonl(&baseline)?);
            let (mut kept, mut f, mut b) = (Vec::new(), Vec::new(), Vec::new());
            for r in people {
                if let (Some(x), Some(y)) = (full.remove(&r.id), base.remove(&r.id)) {
                    kept.push(r);
                    f.push(x);
                    b.push(y);
                }
            }
            if kept.is_empty() {
                bail!("no respondent has predictions in both files");
            }
            let rows = aggregate_demographic_shift(&graph, &f, &b, &kept, radius)?;
            write_shift_csv(&rows, create(&out)?)?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct Truth<'a> {
    model: ModelKind,
    feature_names: &'a [String],
    params: &'a nbhd::inference::NaturalParams,
}

#[derive(Serialize)]
struct ConsensusExport<'a> {
    threshold: f64,
    consensus: Vec<String>,
    /// Members of `consensus` cut off from the anchor.
    disconnected: Vec<String>,
    #[serde(flatten)]
    map: &'a nbhd::consensus::ConsensusMap,
}

#[derive(Serialize)]
struct ValidationReport {
    blocks: usize,
    edges: usize,
    responses: usize,
    usable: usize,
    rejected: Vec<Rejection>,
}

#[derive(Serialize)]
struct Rejection {
    respondent_id: String,
    error: String,
}

fn validate(city: &City, survey: Option<(&Path, &Path)>) -> Result<()> {
    let graph = city.load()?;
    let mut report = ValidationReport {
        blocks: graph.len(),
        edges: graph.edge_count(),
        responses: 0,
        usable: 0,
        rejected: Vec::new(),
    };
    if let Some((respondents, responses)) = survey {
        let people = read_respondents(respondents)?;
        let by_id: HashMap<String, Respondent> = people.into_iter().map(|r| (r.id.clone(), r)).collect();
        let records = read_responses(responses)?;
        report.responses = records.len();
        for rec in &records {
            match ingest_response(&graph, &by_id, rec) {
                Ok(d) => report.usable += d.usable as usize,
                Err(e) => report.rejected.push(Rejection {
                    respondent_id: rec.respondent_id.clone(),
                    error: e.to_string(),
                }),
            }
        }
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.rejected.is_empty() {
        bail!("{} of {} responses rejected", report.rejected.len(), report.responses);
    }
    Ok(())
}

fn ingest_all(graph: &BlockGraph, people: &[Respondent], records: &[ResponseRecord]) -> Result<Vec<DrawnNeighborhood>> {
    let by_id: HashMap<String, Respondent> = people.iter().map(|r| (r.id.clone(), r.clone())).collect();
    records
        .iter()
        .map(|rec| {
            ingest_response(graph, &by_id, rec).with_context(|| format!("response of `{}`", rec.respondent_id))
        })
        .collect()
}

/// Groups predictions by respondent, in order of first appearance.
fn group_predictions(flat: Vec<SimulatedNeighborhood>) -> Vec<Vec<SimulatedNeighborhood>> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut out: Vec<Vec<SimulatedNeighborhood>> = Vec::new();
    for s in flat {
        let i = *index.entry(s.respondent_id.clone()).or_insert_with(|| {
            out.push(Vec::new());
            out.len() - 1
        });
        out[i].push(s);
    }
    out
}

fn by_respondent(flat: Vec<SimulatedNeighborhood>) -> BTreeMap<String, Vec<SimulatedNeighborhood>> {
    let mut out: BTreeMap<String, Vec<SimulatedNeighborhood>> = BTreeMap::new();
    for s in flat {
        out.entry(s.respondent_id.clone()).or_default().push(s);
    }
    out
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}
