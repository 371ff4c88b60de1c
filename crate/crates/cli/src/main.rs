//! `textrec`: the config-driven pipeline from synthetic logs to metrics.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "textrec", version, about = "Joint LM and recommendation training over behavior text")]
struct Cli {
    /// Run configuration (TOML). Every field has a default.
    #[arg(long, short, global = true, default_value = "textrec.toml")]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true, env = "TEXTREC_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-service behavior logs.
    SynthGen,
    /// Train the byte-level BPE vocabulary on every dataset's item text.
    TokenizerTrain,
    /// Filter, split and tokenize every dataset.
    CorpusBuild,
    /// Train a model on the target task in the configured mode.
    Train,
    /// Pretrain a shared backbone on the pretraining and agnostic datasets.
    PretrainMultitask,
    /// Extract frozen user and item features for the target task.
    Features,
    /// Fit a linear probe on the extracted features.
    Probe,
    /// Rank held-out items and write Recall@k and NDCG@k.
    Eval,
    /// Estimate the leading Hessian eigenvalues of the trained model.
    Hessian,
    /// Aggregate metrics and losses of finished runs into mean ± std tables.
    Report {
        /// Run directories to aggregate.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
    /// Print the resolved configuration and exit.
    ShowConfig,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = if cli.config.exists() {
        RunConfig::load(&cli.config)?
    } else if cli.config.as_os_str() == "textrec.toml" {
        RunConfig::default()
    } else {
        return Err(CliError::Config(format!("config file {} not found", cli.config.display())));
    };
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    config.resolve()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load(&cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let run = Run::new(config)?;
    match &cli.command {
        Command::SynthGen => commands::synth_gen(&run),
        Command::TokenizerTrain => commands::tokenizer_train(&run),
        Command::CorpusBuild => commands::corpus_build(&run),
        Command::Train => commands::train_cmd(&run),
        Command::PretrainMultitask => commands::pretrain_cmd(&run),
        Command::Features => commands::features(&run),
        Command::Probe => commands::probe(&run),
        Command::Eval => commands::eval(&run),
        Command::Hessian => commands::hessian(&run),
        Command::Report { runs } => report::report(&run, runs),
        Command::ShowConfig => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TEXTREC_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
