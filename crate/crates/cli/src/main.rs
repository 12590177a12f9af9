//! `fact`: phantoms, projections, meta-training, reconstruction and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, MetaArgs, PhantomArgs, ProjectArgs, ReconstructArgs};
use config::{Profile, RunConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "fact", version, about = "Neural attenuation field reconstruction for sparse-view cone-beam CT")]
struct Cli {
    /// Worker threads; 1 gives bit-identical artifacts across runs [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Built-in settings to start from
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
    /// JSON file merged over the profile; unknown keys are rejected
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize an analytic phantom into a volume directory
    Phantom(PhantomArgs),
    /// Simulate cone-beam projections of a volume
    Project(ProjectArgs),
    /// Meta-learn a field initialization from a corpus of bundles
    Meta(MetaArgs),
    /// Reconstruct a volume from a projection bundle
    Reconstruct(ReconstructArgs),
    /// Score reconstructions against a ground-truth volume
    Evaluate(EvaluateArgs),
    /// Print the resolved configuration as JSON
    ShowConfig,
}

/// Marks errors raised while assembling the run configuration.
#[derive(Debug)]
struct ConfigStage;

impl std::fmt::Display for ConfigStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("configuration error")
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigStage>().is_some() {
        return EXIT_CONFIG;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fact_core::Error>() {
            use fact_core::Error::*;
            return match e {
                InvalidConfig(_) => EXIT_CONFIG,
                Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_DATA,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<glob::GlobError>() {
            return EXIT_DATA;
        }
    }
    EXIT_CONFIG
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("setting up the worker pool")
            .context(ConfigStage)?;
    }
    let cfg = RunConfig::load(cli.profile, cli.config.as_deref()).context(ConfigStage)?;
    match &cli.command {
        Command::Phantom(a) => commands::phantom(&cfg, a),
        Command::Project(a) => commands::project(&cfg, a),
        Command::Meta(a) => commands::meta(&cfg, a),
        Command::Reconstruct(a) => commands::reconstruct(&cfg, a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_error_class() {
        let cfg = anyhow::Error::new(fact_core::Error::InvalidConfig("x".into()));
        assert_eq!(exit_code(&cfg), EXIT_CONFIG);
        let div = anyhow::Error::new(fact_core::Error::Divergence { stage: "epoch", step: 3 }).context("training");
        assert_eq!(exit_code(&div), EXIT_DIVERGENCE);
        let io = anyhow::Error::new(std::io::Error::other("gone")).context("reading");
        assert_eq!(exit_code(&io), EXIT_DATA);
        let staged = anyhow::Error::new(std::io::Error::other("gone")).context(ConfigStage);
        assert_eq!(exit_code(&staged), EXIT_CONFIG);
    }
}
