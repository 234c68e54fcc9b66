//! `vata` command line: one subcommand per pipeline stage, all driven by a
//! JSON config inside a work directory.
//!
//! Failures print a single JSON line on stderr,
//! `{"error":"data","code":3,"message":"..."}`, and exit with the code
//! (2 config, 3 data, 4 numeric).

pub mod config;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use vata_core::{Error, ErrorKind, Result};

pub use config::Config;
pub use stages::ModelKind;

#[derive(Debug, Parser)]
#[command(name = "vata", version, about = "Visual thermal-affordance pipeline")]
pub struct Cli {
    /// Directory holding every input and output file.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Pipeline config; defaults to <workdir>/config.json.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces the config seed for this run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic population, survey log, comfort walk and latent truth.
    Synth,
    /// K-means labels written back into features.csv.
    Cluster,
    /// Stratified survey sample, manifest and coverage report.
    Sample,
    /// TrueSkill scores for every indicator.
    Score,
    /// Elastic-net models and their reports.
    FitEnrm,
    /// Two-task network, training history and gradient check.
    TrainMtnnl,
    /// VATA per image for a features file.
    Predict {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mtnnl")]
        model: ModelKind,
    },
    /// EMA fits and multivariate model comparison against comfort.
    Validate,
    /// Hexagon GeoJSON of mean predicted VATA.
    Map,
    /// Runs the survey service on the work directory's manifest.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        /// Append-only response log; defaults to <workdir>/survey-log.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Collates the JSON reports into summary.json.
    Report,
}

pub fn run(cli: Cli) -> Result<()> {
    let wd = cli.workdir;
    if !wd.is_dir() {
        return Err(Error::Config(format!("workdir {} is not a directory", wd.display())));
    }
    let cfg_path = cli.config.unwrap_or_else(|| wd.join("config.json"));
    let cfg = Config::load(&cfg_path, cli.seed)?;
    match cli.command {
        Command::Synth => stages::synth(&cfg, &wd),
        Command::Cluster => stages::cluster(&cfg, &wd),
        Command::Sample => stages::sample(&cfg, &wd),
        Command::Score => stages::score(&cfg, &wd),
        Command::FitEnrm => stages::fit_enrm(&cfg, &wd),
        Command::TrainMtnnl => stages::train_mtnnl(&cfg, &wd),
        Command::Predict { features, out, model } => stages::predict(&wd, features, out, model),
        Command::Validate => stages::validate(&cfg, &wd),
        Command::Map => stages::map(&cfg, &wd),
        Command::Serve { port, log } => stages::serve(&cfg, &wd, port, log),
        Command::Report => stages::report(&cfg, &wd),
    }
}

pub fn error_line(kind: ErrorKind, message: &str) -> String {
    json!({ "error": kind.as_str(), "code": kind.exit_code(), "message": message }).to_string()
}
