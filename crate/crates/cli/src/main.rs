//! Experiment driver for federated actor-critic simulations. Every
//! subcommand takes a TOML experiment file, a base seed, and an output
//! directory; outputs are a function of exactly those three inputs, so
//! rerunning a command reproduces its files byte for byte.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sfac_cli::config::ExperimentSpec;
use sfac_cli::{plot, runner};

#[derive(Parser)]
#[command(
    name = "sfac",
    about = "Federated actor-critic experiments on synthetic MDP families",
    after_help = "Worker threads are taken from SFAC_WORKERS when set, \
                  otherwise from the number of available CPUs."
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment description in TOML.
    #[arg(long)]
    config: PathBuf,
    /// Base seed; replica seeds are derived from it deterministically.
    #[arg(long)]
    seed: u64,
    /// Directory to write results into (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Commands {
    /// Run the configured algorithm on one generated family.
    Run(CommonArgs),
    /// Rerun the experiment for each agent count in [sweep].agents.
    SweepAgents(CommonArgs),
    /// Rerun the experiment for each level in [sweep].heterogeneity.
    SweepHeterogeneity(CommonArgs),
    /// Run the configured algorithm and its comparison baseline on a
    /// matched sampling budget.
    Baseline(CommonArgs),
    /// Render the [plot] section to SVG. The seed argument is accepted
    /// for interface uniformity and has no effect on the output.
    Plot(CommonArgs),
}

fn load(args: &CommonArgs) -> Result<ExperimentSpec> {
    ExperimentSpec::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Commands::Run(args) => {
            let spec = load(args)?;
            runner::cmd_run(&spec, args.seed, &args.out)
        }
        Commands::SweepAgents(args) => {
            let spec = load(args)?;
            runner::cmd_sweep_agents(&spec, args.seed, &args.out)
        }
        Commands::SweepHeterogeneity(args) => {
            let spec = load(args)?;
            runner::cmd_sweep_heterogeneity(&spec, args.seed, &args.out)
        }
        Commands::Baseline(args) => {
            let spec = load(args)?;
            runner::cmd_baseline(&spec, args.seed, &args.out)
        }
        Commands::Plot(args) => {
            let spec = load(args)?;
            let Some(plot_spec) = &spec.plot else {
                bail!(
                    "{} has no [plot] section, which the plot subcommand requires",
                    args.config.display()
                );
            };
            let path = plot::cmd_plot(plot_spec, &spec.name, &args.out)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}
