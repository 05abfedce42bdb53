use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "semperturb", version, about = "Adversarial word substitution over semantic search spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier on the configured corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Model output; defaults to `output.model`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a student on a teacher model's output probabilities.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Student model output; defaults to `output.model`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Teacher-output file; defaults to `output.teacher_outputs`.
        #[arg(long)]
        teacher_outputs: Option<PathBuf>,
    },
    /// Attack every corpus sentence and write the adversarial dataset.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Victim model; defaults to `resources.model`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset output; defaults to `output.dataset`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report output; defaults to `output.report`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Score a fixed adversarial dataset against another model.
    Transfer {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Vocabulary file; alternatively taken from `--config`.
        #[arg(long, required_unless_present = "config")]
        vocab: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report mean search-space sizes per perturbation function.
    AuditSpaces {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `output.spaces_report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic keyword corpus with matching resources and config.
    GenSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1111)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        sentences: usize,
        #[arg(long, default_value_t = 500)]
        vocab_size: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out } => commands::train(&config, out),
        Command::Distill {
            config,
            teacher,
            out,
            teacher_outputs,
        } => commands::distill(&config, &teacher, out, teacher_outputs),
        Command::Attack {
            config,
            model,
            out,
            report,
            parallelism,
        } => commands::attack(&config, model, out, report, parallelism),
        Command::Transfer {
            dataset,
            model,
            vocab,
            config,
            out,
        } => commands::transfer(&dataset, &model, vocab, config, out),
        Command::AuditSpaces { config, out } => commands::audit(&config, out),
        Command::GenSynthetic {
            out_dir,
            seed,
            sentences,
            vocab_size,
        } => commands::gen_synthetic(&out_dir, seed, sentences, vocab_size),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
