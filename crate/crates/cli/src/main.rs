use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use partial_bnn::ucda::UcdaTag;
use partial_bnn_cli::{CertRequest, CliError, LoadedConfig, RunOptions, StageSelection};

#[derive(Parser)]
#[command(name = "partial-bnn", version, about = "Partially stochastic Bayesian neural network experiments")]
struct Cli {
    /// Worker threads for seeds and HMC chains.
    #[arg(long, env = "PARTIAL_BNN_THREADS", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(short, long)]
    config: PathBuf,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum TagArg {
    A,
    B,
    C,
    D,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config.
    Run(ExperimentArgs),
    /// Run a config over its `sweep` subset sizes.
    Sweep(ExperimentArgs),
    /// MAP, partition from the MAP network, then the posterior backend.
    TwoStage {
        #[command(flatten)]
        args: ExperimentArgs,
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Chain agreement on stored per-chain predictions.
    Diagnose {
        #[arg(long, num_args = 1.., required = true)]
        chains: Vec<PathBuf>,
        /// Class labels, one per line, for per-chain accuracy.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recovery certificate for a constructive architecture.
    UcdaCert {
        #[arg(long, value_enum)]
        tag: TagArg,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        m: usize,
        /// Width of the arbitrary downstream layer.
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        hidden_layers: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        /// Noise radius; several values give one certificate each.
        #[arg(long, num_args = 1.., default_values_t = [5.0])]
        lambda: Vec<f64>,
        /// Input box as `lo,hi`.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [-1.0, 1.0])]
        input_box: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(args: &ExperimentArgs) -> Result<(LoadedConfig, RunOptions), CliError> {
    let loaded = LoadedConfig::from_path(&args.config)?;
    Ok((
        loaded,
        RunOptions {
            seed: args.seed,
            out: args.out.clone(),
        },
    ))
}

fn summarize(result: &partial_bnn_cli::SeedOutput) {
    for r in &result.records {
        println!(
            "seed {} {:<9} {:<7} k={:<6} nll={:.4}",
            r.seed,
            r.stage.as_str(),
            r.backend,
            r.k,
            r.metrics.nll
        );
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    partial_bnn_cli::init_thread_pool(cli.threads)?;
    match cli.command {
        Command::Run(args) => {
            let (loaded, opts) = load(&args)?;
            summarize(&partial_bnn_cli::run(&loaded, &opts)?);
        }
        Command::Sweep(args) => {
            let (loaded, opts) = load(&args)?;
            summarize(&partial_bnn_cli::sweep(&loaded, &opts)?);
        }
        Command::TwoStage { args, stage } => {
            let (loaded, opts) = load(&args)?;
            let stage = match stage {
                StageArg::One => StageSelection::First,
                StageArg::Two => StageSelection::Second,
                StageArg::Both => StageSelection::Both,
            };
            summarize(&partial_bnn_cli::two_stage(&loaded, &opts, stage)?);
        }
        Command::Diagnose { chains, labels, seed } => {
            let labels = labels.map(|p| partial_bnn_cli::read_labels(&p)).transpose()?;
            let report = partial_bnn_cli::diagnose_chains(&chains, labels.as_deref(), seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::UcdaCert {
            tag,
            d,
            m,
            width,
            hidden_layers,
            trials,
            lambda,
            input_box,
            seed,
        } => {
            let tag = match tag {
                TagArg::A => UcdaTag::A,
                TagArg::B => UcdaTag::B,
                TagArg::C => UcdaTag::C,
                TagArg::D => UcdaTag::D,
            };
            let certs = partial_bnn_cli::ucda_cert(&CertRequest {
                tag,
                d,
                m,
                width,
                hidden_layers,
                trials,
                lambdas: lambda,
                input_box: (input_box[0], input_box[1]),
                seed,
            })?;
            let text = if certs.len() == 1 {
                serde_json::to_string_pretty(&certs[0])?
            } else {
                serde_json::to_string_pretty(&certs)?
            };
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
