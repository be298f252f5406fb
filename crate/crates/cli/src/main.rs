use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use shapebias::oneshot::DistanceKind;
use shapebias::Result;

use shapebias_cli::commands::{self, ProbeSource};
use shapebias_cli::config::RunConfig;
use shapebias_cli::report::ReportOptions;

#[derive(Parser)]
#[command(name = "shapebias", version, about = "Shape-bias experiments on synthetic stimuli")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distance {
    Euclidean,
    Cosine,
}

impl From<Distance> for DistanceKind {
    fn from(d: Distance) -> Self {
        match d {
            Distance::Euclidean => DistanceKind::Euclidean,
            Distance::Cosine => DistanceKind::CosineDistance,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the probe triples and the labeled training/test worlds as PPM files.
    GenStimuli {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one embedder; prints step, loss and accuracy per checkpoint.
    TrainEmbedder {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one Matching Network on features of a trained embedder.
    TrainMn {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure B_s of one checkpoint (embedder or MN) or of precomputed features.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        checkpoint: Option<PathBuf>,
        /// CSV of `triple_id,role,x0,x1,...` rows, probed by nearest neighbor.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Triple manifest; the configured synthetic triples by default.
        #[arg(long, conflicts_with = "features")]
        manifest: Option<PathBuf>,
        /// Embedder for an MN checkpoint, overriding its sidecar.
        #[arg(long, conflicts_with = "features")]
        embedder: Option<PathBuf>,
        #[arg(long, value_enum)]
        distance: Option<Distance>,
    },
    /// Run the seed sweep and write records.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, value_enum)]
        distance: Option<Distance>,
    },
    /// Summary statistics of a records file.
    Stats {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
    },
    /// CSV tables and SVG plots from a records file.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        bandwidth: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenStimuli { config, out } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            commands::gen_stimuli(&cfg, &cfg.out_dir(out.as_deref()))
        }
        Command::TrainEmbedder { config, seed, out } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            commands::train_embedder(&cfg, seed, &cfg.out_dir(out.as_deref())).map(drop)
        }
        Command::TrainMn { config, embedder, seed, out } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            commands::train_mn(&cfg, &embedder, seed, &cfg.out_dir(out.as_deref())).map(drop)
        }
        Command::Probe { config, checkpoint, features, manifest, embedder, distance } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let source = match (&checkpoint, &features) {
                (_, Some(f)) => ProbeSource::Features(f),
                (Some(c), None) => ProbeSource::Checkpoint {
                    path: c,
                    embedder: embedder.as_deref(),
                    manifest: manifest.as_deref(),
                },
                (None, None) => unreachable!("clap requires one source"),
            };
            let (bias, ties, n) = commands::probe(&cfg, source, distance.map(Into::into))?;
            println!("B_s\t{bias:.6}\tties\t{ties}\tn\t{n}");
            Ok(())
        }
        Command::Sweep { config, out, jobs, distance } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            commands::sweep(&cfg, &cfg.out_dir(out.as_deref()), jobs, distance.map(Into::into)).map(drop)
        }
        Command::Stats { records, dataset } => {
            for line in commands::stats(&records, dataset.as_deref())? {
                println!("{line}");
            }
            Ok(())
        }
        Command::Report { records, out, config, dataset, bandwidth } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            if let Some(h) = bandwidth {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(shapebias::Error::Contract(format!("--bandwidth must be positive, got {h}")));
                }
            }
            let opts = ReportOptions {
                dataset: dataset.or(cfg.report.dataset.clone()),
                bandwidth: bandwidth.or(cfg.report.bandwidth),
                kde_points: cfg.report.kde_points,
            };
            for path in commands::report(&records, &out, &opts)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
