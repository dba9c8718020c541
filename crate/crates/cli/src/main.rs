mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "spikformer", version, about = "Train, evaluate and profile spiking transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `synth:<classes>x<count>[@seed]` or `idx:<dir>` / `idx:<images>,<labels>[,<test images>,<test labels>]`
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the `seed` key of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// Which split to score.
        #[arg(long, value_enum, default_value_t = commands::Split::Test)]
        split: commands::Split,
    },
    /// Per-layer firing rates, operation counts and energy of a checkpoint.
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Test samples to run through the model.
        #[arg(long, default_value_t = 256)]
        limit: usize,
    },
    /// Train one attention variant and append its row to `ablation.csv`.
    Ablate {
        #[arg(long)]
        variant: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write one head's attention map and attention output as CSV and PGM.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PGM (P5) or PPM (P6) image matching the model input.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        block: usize,
        #[arg(long)]
        head: usize,
        #[arg(long = "t")]
        step: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SPIKEFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("SPIKEFORMER_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Train { config, data, out, seed } => commands::train(&config, &data, &out, seed),
        Command::Eval { checkpoint, data, split } => commands::eval(&checkpoint, &data, split),
        Command::Profile {
            checkpoint,
            data,
            out,
            limit,
        } => commands::profile(&checkpoint, &data, &out, limit),
        Command::Ablate {
            variant,
            config,
            data,
            out,
            seed,
        } => commands::ablate(&variant, &config, &data, &out, seed),
        Command::ExportAttn {
            checkpoint,
            input,
            block,
            head,
            step,
            out,
        } => commands::export_attn(&checkpoint, &input, block, head, step, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
