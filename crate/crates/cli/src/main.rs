//! `abcd`: command-line front end for anchoring-based causal designs.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use abcd_core::datamodel::BeliefTransform;
use abcd_core::design::{AnchorRule, AnchorScale};
use abcd_core::iv::InstrumentScheme;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "abcd", version, about = "Design and analyze anchoring-based causal experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load, exclude and transform data; write it back in the standard layout.
    Ingest(DataOpts),
    /// Belief and outcome summaries by anchor condition.
    Describe(DataOpts),
    /// First-stage regression, F-statistic and weak-instrument gate.
    FirstStage(DataOpts),
    /// OLS and gated 2SLS estimates for every outcome.
    Iv(DataOpts),
    /// Placebo matrix across experiments run on the same participants.
    Placebo(DataOpts),
    /// Instantaneous versus lagged anchoring effects.
    Decay(DecayOpts),
    /// Recommend a low/high anchor pair.
    DesignAnchors(DesignOpts),
    /// Generate a synthetic experiment, optionally with a Monte Carlo study.
    Simulate(SimulateOpts),
    /// Kernel densities, effect bars and a local-linear anchor response curve.
    Plot(PlotOpts),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Ingest(_) => "ingest",
            Self::Describe(_) => "describe",
            Self::FirstStage(_) => "first-stage",
            Self::Iv(_) => "iv",
            Self::Placebo(_) => "placebo",
            Self::Decay(_) => "decay",
            Self::DesignAnchors(_) => "design-anchors",
            Self::Simulate(_) => "simulate",
            Self::Plot(_) => "plot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Coding {
    Binary,
    Dummies,
    Continuous,
}

impl From<Coding> for InstrumentScheme {
    fn from(c: Coding) -> Self {
        match c {
            Coding::Binary => Self::BinaryHighLow,
            Coding::Dummies => Self::DummiesWithReference,
            Coding::Continuous => Self::Continuous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    Log10p1,
}

impl From<Transform> for BeliefTransform {
    fn from(t: Transform) -> Self {
        match t {
            Transform::Identity => Self::Identity,
            Transform::Log10p1 => Self::Log10Plus1,
        }
    }
}

impl From<Transform> for AnchorScale {
    fn from(t: Transform) -> Self {
        match t {
            Transform::Identity => Self::Raw,
            Transform::Log10p1 => Self::Log10Plus1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    /// 5th and 95th percentiles of the no-anchor baseline.
    Percentile,
    /// Extrema of a cubic fitted to multivalued pilot data.
    Extrema,
}

impl From<Rule> for AnchorRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Percentile => Self::PercentileRule,
            Rule::Extrema => Self::CurveExtrema,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunOpts {
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "abcd-out")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Random seed; falls back to ABCD_SEED.
    #[arg(long, env = "ABCD_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataOpts {
    /// Input CSV. Repeat for several experiments or survey waves.
    #[arg(long = "data", value_name = "CSV", required = true)]
    pub data: Vec<PathBuf>,
    /// Column-mapping JSON, one per --data or one shared. Inferred from the
    /// CSV header when omitted (id, anchor, belief, wave, day; other columns
    /// are outcomes).
    #[arg(long = "schema", value_name = "JSON")]
    pub schema: Vec<PathBuf>,
    /// Belief column, overriding the schema.
    #[arg(long)]
    pub belief: Option<String>,
    /// Outcome to analyze; repeatable. Defaults to every outcome.
    #[arg(long = "outcome")]
    pub outcome: Vec<String>,
    /// Covariate to adjust for; repeatable.
    #[arg(long = "covariate")]
    pub covariate: Vec<String>,
    /// Instrument coding; chosen from the anchor conditions when omitted.
    #[arg(long, value_enum)]
    pub coding: Option<Coding>,
    /// Drop records whose raw belief exceeds this value.
    #[arg(long = "exclude-above", value_name = "VALUE")]
    pub exclude_above: Option<f64>,
    /// Belief transform applied after exclusions.
    #[arg(long, value_enum, default_value_t = Transform::Identity)]
    pub transform: Transform,
    /// Beliefs are percentages; label effects in pp.
    #[arg(long)]
    pub percent: bool,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecayOpts {
    #[command(flatten)]
    pub data: DataOpts,
    /// Lag bins in days, e.g. `5-9,10-14`.
    #[arg(long, default_value = "5-9,10-14")]
    pub bins: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DesignOpts {
    #[command(flatten)]
    pub data: DataOpts,
    #[arg(long, value_enum, default_value_t = Rule::Percentile)]
    pub rule: Rule,
    /// Multivalued pilot CSV for the extrema rule; defaults to --data.
    #[arg(long, value_name = "CSV")]
    pub pilot: Option<PathBuf>,
    #[arg(long = "pilot-schema", value_name = "JSON")]
    pub pilot_schema: Option<PathBuf>,
    /// Anchor scale of the fitted response curve.
    #[arg(long, value_enum, default_value_t = Transform::Identity)]
    pub scale: Transform,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateOpts {
    /// Simulation config JSON; missing fields take defaults.
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Survey-wave lags in days since exposure, e.g. `0,8.8`.
    #[arg(long, default_value = "0")]
    pub waves: String,
    /// Also run a Monte Carlo study with this many replicates.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlotOpts {
    #[command(flatten)]
    pub data: DataOpts,
    /// Also render SVG figures.
    #[arg(long)]
    pub svg: bool,
    /// Kernel bandwidth; Silverman's rule when omitted.
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let outcome = match &cli.command {
        Command::Ingest(o) => commands::ingest(name, o),
        Command::Describe(o) => commands::describe(name, o),
        Command::FirstStage(o) => commands::first_stage(name, o),
        Command::Iv(o) => commands::iv(name, o),
        Command::Placebo(o) => commands::placebo(name, o),
        Command::Decay(o) => commands::decay(name, o),
        Command::DesignAnchors(o) => commands::design_anchors(name, o),
        Command::Simulate(o) => commands::simulate(name, o),
        Command::Plot(o) => commands::plot(name, o),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let block = serde_json::json!({
                "error": { "command": name, "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{block}");
            ExitCode::FAILURE
        }
    }
}
