use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mobexp_core::config::RunConfig;
use mobexp_core::pipeline::{Pipeline, Stage};

/// Mobility-aware ozone exposure pipeline.
#[derive(Debug, Parser)]
#[command(name = "mobexp", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 is the deterministic reference mode, 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known truth.
    Synth,
    /// Fit the spatio-temporal model to the training monitors.
    Fit,
    /// Predict at the hold-out monitors and score the predictions.
    Validate,
    /// Predict hourly ozone at every tower over the exposure window.
    Predict,
    /// Rebuild trajectories and night-time towers from hand-offs.
    Mobility,
    /// Assign dynamic and static exposure and summarize the bias.
    Expose,
    /// Write the plot-ready tables.
    Report,
    /// Run every stage in order.
    All,
    /// Export design matrices for auditing.
    Covariates {
        #[command(subcommand)]
        action: CovariatesAction,
    },
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Subcommand)]
enum CovariatesAction {
    Export {
        #[arg(long, value_enum, default_value_t = Sites::Monitors)]
        sites: Sites,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sites {
    Monitors,
    Towers,
}

fn load(g: &Global) -> mobexp_core::Result<Pipeline> {
    let (mut cfg, text) = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => (RunConfig::default(), String::new()),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    Pipeline::new(cfg, text)
}

fn run(cli: &Cli) -> mobexp_core::Result<()> {
    let p = load(&cli.global)?;
    let stages: Vec<Stage> = match &cli.command {
        Command::Synth => vec![Stage::Synth],
        Command::Fit => vec![Stage::Fit],
        Command::Validate => vec![Stage::Validate],
        Command::Predict => vec![Stage::Predict],
        Command::Mobility => vec![Stage::Mobility],
        Command::Expose => vec![Stage::Expose],
        Command::Report => vec![Stage::Report],
        Command::All => Stage::ALL.to_vec(),
        Command::Covariates {
            action: CovariatesAction::Export { sites },
        } => {
            let out = p.export_design(matches!(sites, Sites::Towers))?;
            println!("{}", out.display());
            return Ok(());
        }
        Command::Config => {
            print!("{}", toml::to_string(&p.cfg).map_err(|e| mobexp_core::Error::Invalid(e.to_string()))?);
            return Ok(());
        }
    };
    for s in stages {
        let meta = p.run(s)?;
        println!("{}: {} outputs in {}", s.as_str(), meta.outputs.len(), p.stage_dir(s).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
