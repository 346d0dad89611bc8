//! `add`: search, retrain, evaluate and inspect forgery detectors.

use std::fs;
use std::path::{Path, PathBuf};

use add_core::cell::Genotype;
use add_core::data::write_ppm;
use add_core::experiment::{run_eval, run_retrain, run_search, ExperimentConfig};
use add_core::maskgen::{mask_from_landmarks, LandmarkSet, Point};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

/// Environment variable that overrides the seed of an experiment config.
const SEED_VAR: &str = "ADD_SEED";

#[derive(Parser)]
#[command(name = "add", version, about = "Differentiable cell search for forgery detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a cell genotype; writes genotype.json, cell.dot, alpha_history.csv, metrics.csv.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector from a genotype; writes checkpoint.addc, metrics.csv, report.json.
    Retrain {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset spec JSON or a PPM directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize the convex hull of a landmark file into a binary PPM mask.
    Genmask {
        #[arg(long)]
        landmarks: PathBuf,
        /// Mask size as HxW, e.g. 32x32.
        #[arg(long, value_parser = parse_size)]
        size: [usize; 2],
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a genotype as a Graphviz digraph.
    ExportDot {
        #[arg(long)]
        genotype: PathBuf,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a preset experiment config as JSON.
    Preset {
        #[arg(value_enum)]
        name: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    PaperScale,
}

fn parse_size(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size {v:?}: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("mask size must be positive".into());
    }
    Ok([h, w])
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Ok(seed) = std::env::var(SEED_VAR) {
        config.seed = seed
            .trim()
            .parse()
            .with_context(|| format!("{SEED_VAR}={seed:?} is not an unsigned integer"))?;
        log::info!("seed overridden by {SEED_VAR}: {}", config.seed);
    }
    Ok(config)
}

/// Landmark files: a bare point list or an object with a `points` field.
#[derive(Deserialize)]
#[serde(untagged)]
enum LandmarkFile {
    Points(Vec<Point>),
    Object { points: Vec<Point> },
}

fn genmask(landmarks: &Path, size: [usize; 2], out: &Path) -> Result<()> {
    let text = fs::read_to_string(landmarks).with_context(|| format!("reading {}", landmarks.display()))?;
    let file: LandmarkFile =
        serde_json::from_str(&text).with_context(|| format!("parsing landmarks in {}", landmarks.display()))?;
    let points = match file {
        LandmarkFile::Points(p) | LandmarkFile::Object { points: p } => p,
    };
    let mask = mask_from_landmarks(&LandmarkSet {
        points,
        image_size: size,
    })?;
    let plane = mask.data();
    let rgb: Vec<f32> = plane.iter().chain(plane).chain(plane).copied().collect();
    write_ppm(out, &rgb, size[0], size[1])?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search { config, out } => {
            let config = load_config(&config)?;
            let outcome = run_search(&config, &out)?;
            println!("{}", outcome.genotype.to_json());
        }
        Command::Retrain { genotype, config, out } => {
            let config = load_config(&config)?;
            let genotype = Genotype::load(&genotype)?;
            let report = run_retrain(&config, &genotype, &out)?;
            println!("test acc {:.4} auc {}", report.acc, fmt_auc(report.auc));
        }
        Command::Eval { checkpoint, data, out } => {
            let report = run_eval(&checkpoint, &data, &out)?;
            println!("acc {:.4} auc {}", report.acc, fmt_auc(report.auc));
        }
        Command::Genmask { landmarks, size, out } => genmask(&landmarks, size, &out)?,
        Command::ExportDot { genotype, out } => {
            let dot = Genotype::load(&genotype)?.to_dot();
            match out {
                Some(path) => fs::write(&path, dot).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{dot}"),
            }
        }
        Command::Preset { name } => {
            let config = match name {
                Preset::Desk => ExperimentConfig::desk(),
                Preset::PaperScale => ExperimentConfig::paper_scale(),
            };
            println!("{}", config.to_json());
        }
    }
    Ok(())
}

fn fmt_auc(auc: Option<f64>) -> String {
    auc.map_or_else(|| "undefined".into(), |a| format!("{a:.4}"))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
