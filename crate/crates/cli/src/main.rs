use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdcodec::Result;
use sdcodec_cli::{load_model, parse_sources, EvalArgs};

#[derive(Parser)]
#[command(name = "sdcodec", version, about = "Source-disentangled neural audio codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic three-source stem corpus and its manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_items: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Length of every stem in seconds.
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `paths.run_dir` from the config.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Encode a WAV file into an SDC1 bitstream.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `all` or a comma-separated subset of speech,music,sfx.
        #[arg(long, default_value = "all")]
        sources: String,
    },
    /// Decode an SDC1 bitstream; the output is the sum of the chosen sources.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `all` (every source in the stream) or a comma-separated subset.
        #[arg(long, default_value = "all")]
        sources: String,
    },
    /// Split a mixture into one WAV per source.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score resynthesis and separation on mixtures built from a manifest.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Bypass the codec: decoded stems are the reference stems.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        segment_s: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData {
            out,
            n_items,
            seed,
            duration,
        } => {
            let path = sdcodec_cli::synth_data(&out, n_items, seed, duration)?;
            println!("{}", path.display());
        }
        Command::Train {
            config,
            run_dir,
            resume,
        } => {
            let root = sdcodec_cli::train(&config, run_dir.as_deref(), resume)?;
            println!("{}", root.display());
        }
        Command::Encode {
            checkpoint,
            input,
            output,
            sources,
        } => {
            let sources = parse_sources(&sources)?;
            let model = load_model(&checkpoint)?;
            let n = sdcodec_cli::encode(&model, &input, &output, sources)?;
            log::info!("wrote {n} bytes to {}", output.display());
        }
        Command::Decode {
            checkpoint,
            input,
            output,
            sources,
        } => {
            let sources = parse_sources(&sources)?;
            let model = load_model(&checkpoint)?;
            sdcodec_cli::decode(&model, &input, &output, sources)?;
        }
        Command::Separate {
            checkpoint,
            input,
            out_dir,
        } => {
            let model = load_model(&checkpoint)?;
            for p in sdcodec_cli::separate(&model, &input, &out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            oracle: _,
            manifest,
            report,
            segment_s,
            seed,
        } => {
            let model = checkpoint.as_deref().map(load_model).transpose()?;
            let r = sdcodec_cli::eval(&EvalArgs {
                model: model.as_ref(),
                manifest: &manifest,
                report: &report,
                segment_s,
                seed,
            })?;
            print!("{}", r.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
