use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wsdt_cli::commands::{self, CliError, CliResult, EXIT_USAGE};
use wsdt_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "wsdt", version, about = "Wavelet-spectrum diffusion super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-level Haar transform of a PPM/PGM image. Writes a per-band
    /// normalized visualization to --out and the exact spectrum to <out>.f32.
    Dwt {
        input: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuilds the original image from a `.f32` spectrum sidecar.
    Idwt {
        sidecar: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes the synthetic HR/LR pairs described by a run config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a model; writes checkpoint.wsdt and loss.jsonl into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolves an LR image (or a directory of them).
    Sample {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR / SSIM / consistency of SR images against HR and LR references.
    Eval {
        sr: PathBuf,
        hr: PathBuf,
        lr: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints a desk-scale run config to start from.
    Config,
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Dwt { input, levels, out } => commands::dwt(&input, levels, &out),
        Command::Idwt { sidecar, out } => commands::idwt(&sidecar, &out),
        Command::GenData { config, seed, out } => commands::gen_data(&RunConfig::load(&config)?, seed, &out),
        Command::Train {
            config,
            seed,
            checkpoint,
            out,
        } => commands::train(&RunConfig::load(&config)?, seed, checkpoint.as_deref(), &out),
        Command::Sample {
            input,
            checkpoint,
            seed,
            out,
        } => commands::sample(&checkpoint, &input, seed, &out),
        Command::Eval { sr, hr, lr, out } => {
            let report = commands::eval(&sr, &hr, &lr)?;
            print!("{}", commands::format_report(&report));
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&report).map_err(wsdt::Error::from)?;
                std::fs::write(path, json)?;
            }
            Ok(())
        }
        Command::Config => {
            let json = serde_json::to_string_pretty(&RunConfig::desk()).map_err(wsdt::Error::from)?;
            println!("{json}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}
