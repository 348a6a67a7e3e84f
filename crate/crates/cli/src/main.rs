use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use streamvc::evalcli::{self, ConvertMode, ConvertOptions, EvalError};
use streamvc::ArchitectureConfig;

#[derive(Parser)]
#[command(name = "streamvc", version, about = "Streaming voice conversion runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Offline,
    Streaming,
}

#[derive(Subcommand)]
enum Command {
    /// Convert SOURCE to the voice of TARGET.
    Convert {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "offline")]
        mode: Mode,
        /// Whiten f0 with the source's utterance statistics in both modes.
        #[arg(long)]
        freeze_whitening: bool,
    },
    /// Export per-frame Yin analysis and energy as CSV.
    Pitch {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Pearson correlation of two f0 contours over jointly voiced frames.
    Pcc {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Measure per-frame streaming compute.
    Profile {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
    },
    /// Write deterministic random weights.
    Genweights {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Scale of the content encoder, speaker encoder and decoder.
        #[arg(long, value_parser = parse_scale, default_value = "64,32,40")]
        scale: [usize; 3],
    },
}

fn parse_scale(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [c, s, d] if c > 0 && s > 0 && d > 0 => Ok([c, s, d]),
        _ => Err("expected three positive integers C,S,D".into()),
    }
}

fn run(cmd: Command) -> Result<String, EvalError> {
    match cmd {
        Command::Convert {
            source,
            target,
            weights,
            out,
            mode,
            freeze_whitening,
        } => evalcli::run_convert(&ConvertOptions {
            source,
            target,
            weights,
            out,
            mode: match mode {
                Mode::Offline => ConvertMode::Offline,
                Mode::Streaming => ConvertMode::Streaming,
            },
            freeze_whitening,
        }),
        Command::Pitch { input, csv } => evalcli::run_pitch(&input, &csv),
        Command::Pcc { a, b } => evalcli::run_pcc(&a, &b),
        Command::Profile { weights, seconds } => evalcli::run_profile(&weights, seconds),
        Command::Genweights { seed, out, scale } => {
            let [c, s, d] = scale;
            let cfg = ArchitectureConfig::scaled(c, s, d);
            evalcli::run_genweights(seed, &cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
