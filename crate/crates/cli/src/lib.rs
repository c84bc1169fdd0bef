//! Command-line harness: configuration, run outputs and one subcommand per experiment.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod experiments;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use artifacts::{Manifest, OutputDir, MANIFEST};
pub use config::ExperimentConfig;
pub use error::HarnessError;
pub use experiments::{run_experiment, Experiment, Method, RunOptions};

pub const THREADS_ENV: &str = "QUANTLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "quantlab", version, about = "Quantization smoothness experiments on small byte-level language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated bit widths, e.g. 8,4,3,2.
    #[arg(long, value_delimiter = ',')]
    pub bits: Option<Vec<u8>>,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct WithMethod {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Default,
    Toy,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Full-precision, ternary and regularized ternary training.
    Train(Common),
    /// Post-training quantization sweep over bit widths.
    Quantize(WithMethod),
    /// Smoothness reports and score distributions across bit widths.
    Smoothness(WithMethod),
    /// Reverse-perplexity curves against the full-precision reference.
    Rppl(WithMethod),
    /// Input-gradient norms at every block tap, full precision vs ternary.
    GradientProfile(Common),
    /// Forward/backward preservation along the interpolation between two quantized solutions.
    Anisotropy(Common),
    /// Rank profile of calibration activations and gradients per projection.
    Feasibility(Common),
    /// Held-out loss and distillation terms across gradient-term weights.
    #[command(name = "ablate-alpha1")]
    AblateAlpha1(Common),
    /// Regularizing layer 0 vs layer 1 during ternary training.
    AblateRegLayer(Common),
    /// Re-run the experiment recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a config preset as TOML.
    Config {
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
    },
}

/// What a command resolved to before anything runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Run {
        experiment: Experiment,
        config: Box<ExperimentConfig>,
        options: RunOptions,
        out: PathBuf,
    },
    Print(String),
}

fn resolve(experiment: Experiment, common: &Common, method: Option<Method>) -> Result<Plan, HarnessError> {
    let config = ExperimentConfig::load(&common.config)?;
    let bits = match (&common.bits, experiment.uses_bits()) {
        (Some(_), false) => {
            return Err(HarnessError::Usage(format!("`{}` does not take --bits", experiment.name())))
        }
        (Some(b), true) => b.clone(),
        (None, true) => config.bits.clone(),
        (None, false) => Vec::new(),
    };
    let mut check = config.clone();
    check.bits = bits.clone();
    check.validate()?;
    let seeds = common.seed.map_or_else(|| config.seeds.clone(), |s| vec![s]);
    let method = experiment.uses_method().then(|| method.unwrap_or_default());
    let out = common.out.clone().unwrap_or_else(|| config.output_dir.clone());
    Ok(Plan::Run {
        experiment,
        config: Box::new(config),
        options: RunOptions { seeds, bits, method },
        out,
    })
}

pub fn plan(command: &Command) -> Result<Plan, HarnessError> {
    let with = |e, m: &WithMethod| resolve(e, &m.common, m.method);
    match command {
        Command::Train(c) => resolve(Experiment::Train, c, None),
        Command::Quantize(m) => with(Experiment::Quantize, m),
        Command::Smoothness(m) => with(Experiment::Smoothness, m),
        Command::Rppl(m) => with(Experiment::Rppl, m),
        Command::GradientProfile(c) => resolve(Experiment::GradientProfile, c, None),
        Command::Anisotropy(c) => resolve(Experiment::Anisotropy, c, None),
        Command::Feasibility(c) => resolve(Experiment::Feasibility, c, None),
        Command::AblateAlpha1(c) => resolve(Experiment::AblateAlpha1, c, None),
        Command::AblateRegLayer(c) => resolve(Experiment::AblateRegLayer, c, None),
        Command::Replay { manifest, out } => {
            let m = Manifest::load(manifest)?;
            let experiment = Experiment::from_name(&m.subcommand)
                .ok_or_else(|| HarnessError::Config(format!("unknown subcommand `{}` in manifest", m.subcommand)))?;
            let method = match &m.method {
                Some(name) => Some(
                    Method::from_str(name, false).map_err(|_| HarnessError::Config(format!("unknown method `{name}`")))?,
                ),
                None => None,
            };
            let out = out.clone().unwrap_or_else(|| m.config.output_dir.clone());
            Ok(Plan::Run {
                experiment,
                config: Box::new(m.config),
                options: RunOptions {
                    seeds: m.seeds,
                    bits: m.bits,
                    method,
                },
                out,
            })
        }
        Command::Config { preset } => Ok(Plan::Print(match preset {
            Preset::Default => ExperimentConfig::default(),
            Preset::Toy => ExperimentConfig::toy(),
        }
        .to_toml())),
    }
}

/// Runs one experiment into `out`, which only appears if the run succeeds.
pub fn execute(experiment: Experiment, config: &ExperimentConfig, options: &RunOptions, out: &Path) -> Result<PathBuf, HarnessError> {
    let hash = config.hash();
    let mut dir = OutputDir::create(out, &hash)?;
    run_experiment(experiment, config, options, &mut dir)?;
    let manifest = Manifest {
        subcommand: experiment.name().to_string(),
        config_sha256: hash,
        seeds: options.seeds.clone(),
        bits: options.bits.clone(),
        method: options.method.map(|m| m.name().to_string()),
        versions: artifacts::Versions {
            quantlab: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: quantlab_core::checkpoint::VERSION,
        },
        files: Vec::new(),
        config: config.clone(),
    };
    dir.commit(manifest)
}

/// Caps the global worker pool from `QUANTLAB_THREADS` when set.
pub fn configure_threads() -> Result<(), HarnessError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool that already exists (tests, repeated calls) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs a parsed command and returns the text to print.
pub fn run(cli: &Cli) -> Result<String, HarnessError> {
    configure_threads()?;
    match plan(&cli.command)? {
        Plan::Print(text) => Ok(text),
        Plan::Run {
            experiment,
            config,
            options,
            out,
        } => {
            let path = execute(experiment, &config, &options, &out)?;
            Ok(format!("{}\n", path.display()))
        }
    }
}
