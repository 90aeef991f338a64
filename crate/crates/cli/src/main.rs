use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "roadseg", version, about = "Adversarial domain adaptation for road segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and a manifest.
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, value_enum)]
        domain: DomainArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train on a labeled source set and an unlabeled target set.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Labeled target scenes used only for the probe IoU column.
        #[arg(long)]
        probe: Option<PathBuf>,
    },
    /// Segment one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment every scene of a manifest and score it.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score predicted masks against ground truth with matching file names.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Pyramid KDE log-likelihood of an image under a set of training images.
    Loglik {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long)]
        report: PathBuf,
        /// Bandwidths per level, coarse first; the median heuristic otherwise.
        #[arg(long, value_delimiter = ',')]
        sigma: Option<Vec<f64>>,
        #[arg(long)]
        unnormalized: bool,
    },
    /// Print a checkpoint header as JSON.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen { out, count, domain, seed, size } => {
            let domain = match domain {
                DomainArg::Source => roadseg::data::Domain::Source,
                DomainArg::Target => roadseg::data::Domain::Target,
            };
            commands::datagen(&out, count, domain, seed, size)
        }
        Command::Train { config, source, target, out, log, probe } => {
            commands::train(&config, &source, &target, &out, &log, probe.as_deref())
        }
        Command::Infer { ckpt, image, out } => commands::infer(&ckpt, &image, &out),
        Command::Eval { ckpt, manifest, report } => commands::eval(&ckpt, &manifest, &report),
        Command::Metrics { pred, gt, report } => commands::metrics(&pred, &gt, &report),
        Command::Loglik { train, image, levels, report, sigma, unnormalized } => {
            commands::loglik(&train, &image, levels, &report, sigma.as_deref(), !unnormalized)
        }
        Command::Inspect { ckpt } => commands::inspect(&ckpt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
