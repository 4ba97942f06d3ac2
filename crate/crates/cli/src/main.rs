mod commands;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nowcast_core::metrics::Variable;

#[derive(Parser, Debug)]
#[command(name = "nowcast", version, about = "Encoder-forecaster nowcasting on frame archives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed` and `synth.seed`.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for per-sample gradients and evaluation.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic archive of drifting Gaussian blobs.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Archive file to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Train one model for one target variable.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        archive: PathBuf,
        /// Validation archive; the training windows are used when omitted.
        #[arg(long, value_name = "FILE")]
        val_archive: Option<PathBuf>,
        /// Directory for best.ckpt, last.ckpt and history.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "NAME")]
        variable: Option<Variable>,
        /// Total epochs, including epochs before a resume.
        #[arg(long, value_name = "N")]
        budget_epochs: Option<u64>,
        /// Wall-clock limit for this invocation (0 disables).
        #[arg(long, value_name = "F")]
        budget_hours: Option<f64>,
        /// Continue from DIR/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Forecast the frames following a window of input frames.
    Predict {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        archive: PathBuf,
        /// Index of the first input frame.
        #[arg(long, value_name = "N")]
        window_start: usize,
        /// Prediction archive to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, value_name = "N")]
        threads: Option<usize>,
    },
    /// Score a prediction archive against the truth archive.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        prediction: PathBuf,
        #[arg(long, value_name = "FILE")]
        archive: PathBuf,
        /// Defaults to the prediction's channel name.
        #[arg(long, value_name = "NAME")]
        variable: Option<Variable>,
        #[arg(long, value_name = "F", default_value_t = nowcast_core::metrics::DEFAULT_LOGIT_EPSILON)]
        epsilon: f64,
        /// Report file; defaults to the prediction path with `.report.csv`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Write every frame of every channel as an 8-bit PGM image.
    ExportImages {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth {
            common,
            out,
            sequences,
            frames,
            height,
            width,
        } => commands::synth(&common, &out, sequences, frames, height, width),
        Command::Train {
            common,
            archive,
            val_archive,
            out,
            variable,
            budget_epochs,
            budget_hours,
            resume,
        } => commands::train(commands::TrainArgs {
            common,
            archive,
            val_archive,
            out,
            variable,
            budget_epochs,
            budget_hours,
            resume,
        }),
        Command::Predict {
            checkpoint,
            archive,
            window_start,
            out,
            threads,
        } => commands::predict(&checkpoint, &archive, window_start, &out, threads),
        Command::Evaluate {
            prediction,
            archive,
            variable,
            epsilon,
            out,
        } => commands::evaluate(&prediction, &archive, variable, epsilon, out.as_deref()),
        Command::ExportImages { input, out } => commands::export_images(&input, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
