#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "vtpalm",
    version,
    about = "Proximity ranging, tactile reconstruction and grasp simulation"
)]
pub struct Cli {
    /// Seed for every random draw; echoed into the output manifest.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Worker threads for data-parallel steps. Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "vtpalm-out")]
    pub out: PathBuf,

    /// Root for relative input paths that do not exist in the working directory.
    #[arg(long, global = true, env = "VTPALM_DATA_DIR", hide_env_values = true)]
    pub data_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    Roughness,
    Texture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderKind {
    /// One sphere press plus its no-contact reference.
    Press,
    /// A calibration set of presses with a press manifest.
    Presses,
    /// Band-limited random roughness.
    Rough,
    /// Regular dimple pattern.
    Dimples,
    /// Synthetic proximity calibration samples (CSV).
    ProximitySamples,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the distance model to calibration samples.
    FitProximity {
        samples: PathBuf,
        /// Keep samples nearer than 10 cm in the fit.
        #[arg(long)]
        all: bool,
    },
    /// Build the gradient dataset from a press manifest and train the mapper.
    CalibrateTactile {
        manifest: PathBuf,
        /// key=value training overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fraction of the contact radius that supplies labels.
        #[arg(long, default_value_t = vtpalm::tactile_calib::DEFAULT_CLAMP_FRACTION)]
        clamp: f64,
        /// Keep the early-stopped weights as trained, without the output-layer refit.
        #[arg(long)]
        no_refit: bool,
    },
    /// Recover a height map from one tactile frame.
    Reconstruct {
        image: PathBuf,
        reference: PathBuf,
        weights: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        pitch: f64,
    },
    /// Roughness spectra or texture features of one or more images.
    Analyze {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Subtracted from every image before analysis.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = vtpalm::texture::DEFAULT_CUTOFF)]
        cutoff: f64,
        #[arg(long, default_value_t = 32)]
        tile: usize,
    },
    /// Run the approach, switch, contact and grasp scenario.
    SimulateGrasp {
        scenario: PathBuf,
        model: PathBuf,
        weights: PathBuf,
    },
    /// Synthetic data generators.
    Render {
        #[arg(long, value_enum)]
        kind: RenderKind,
        /// key=value generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(manifest) => {
            log::info!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
