use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ecg_mllm::trainer::Stage;
use ecg_mllm_cli::{CliError, Command, ReportFormat, RunConfig, Runner};

#[derive(Parser)]
#[command(name = "ecgmllm", version, about = "Synthetic ECG question answering pipeline")]
struct Args {
    /// TOML run configuration; every table is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for data, models and reports.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    report: Format,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Jsonl,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize waveforms, reports and QA items.
    GenData,
    /// Normal-ECG ratio per verify template.
    BiasReport,
    /// Subject split, paraphrase re-rendering and the balanced stage-1 set.
    BuildDebias,
    /// Contrastive encoder pretraining and base LM text pretraining.
    PretrainEncoder,
    /// Instruction tuning of the projection and LoRA adapters.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
    },
    /// Exact-match accuracy per subset on the test split.
    Eval,
    /// AUC per label from yes/no log-odds on held-out records.
    ZeroShot,
    /// Accuracy with each test ECG swapped for a random one.
    RandomEcgTest,
}

fn run(args: Args) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
        config.normalize();
        config.validate()?;
    }
    let command = match args.command {
        Cmd::GenData => Command::GenData,
        Cmd::BiasReport => Command::BiasReport,
        Cmd::BuildDebias => Command::BuildDebias,
        Cmd::PretrainEncoder => Command::PretrainEncoder,
        Cmd::Train { stage } => Command::Train(Stage::from_number(stage).map_err(CliError::from)?),
        Cmd::Eval => Command::Eval,
        Cmd::ZeroShot => Command::ZeroShot,
        Cmd::RandomEcgTest => Command::RandomEcgTest,
    };
    let format = match args.report {
        Format::Table => ReportFormat::Table,
        Format::Jsonl => ReportFormat::Jsonl,
    };
    Runner::new(config, &args.out, format).run(command)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if args.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
