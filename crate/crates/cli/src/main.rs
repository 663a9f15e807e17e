use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Serialize};

mod commands;
mod config;

use commands::{Ablate, BuildCorpus, BuildInterlinear, BuildSft, Demo, Evaluate, ModeName, Stub, Train, TrainTokenizer};
use config::Layers;

/// Failure reported to the user as one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }
}

impl From<mtrecipe::Error> for CliError {
    fn from(e: mtrecipe::Error) -> Self {
        CliError::new(e.kind(), e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "mtrecipe", version, about = "Interlinear pre-training and instruction tuning recipe for translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file for the subcommand.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set hyper.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (runs root for `train`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, clean and split a parallel corpus.
    BuildCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        src: Option<String>,
        #[arg(long)]
        tgt: Option<String>,
    },
    /// Train the byte-level BPE tokenizer.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Pack parallel pairs into interlinear documents.
    BuildInterlinear {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_tokens: Option<usize>,
    },
    /// Render pairs as instruction-tuning records.
    BuildSft {
        #[command(flatten)]
        common: Common,
        /// `source_consistent` or `english_fixed`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        /// 0 = foundation model, 1-3 = recipe stages.
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
        stage: Option<u8>,
    },
    /// Stage-3 training on increasingly large SFT sets from one checkpoint.
    AblateDirectSft {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sizes: counts or multiples such as `4x`.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<String>>,
    },
    /// BLEU of a checkpoint or a stub translator.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Exemplars per n-shot prompt.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        stub: Option<StubArg>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate the synthetic English-Cipher task and run the whole recipe.
    DemoSynthetic {
        #[command(flatten)]
        common: Common,
        /// Smaller data and test sets.
        #[arg(long)]
        quick: bool,
        /// Suppress progress lines.
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Nshot,
    Instruction,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StubArg {
    Oracle,
    Empty,
}

fn layers(common: &Common) -> Result<Layers, CliError> {
    let mut l = Layers::from_file(common.config.as_deref())?;
    l.set_all(&common.set)?;
    l.set_opt("out", common.out.as_ref());
    Ok(l)
}

/// Resolves the config, then prints it or runs `f`.
fn go<T: Serialize + DeserializeOwned>(
    l: &Layers,
    defaults: T,
    print: bool,
    f: impl FnOnce(&T) -> Result<String, CliError>,
) -> Result<String, CliError> {
    let cfg = l.resolve(&defaults)?;
    if print {
        return Ok(serde_json::to_string_pretty(&cfg).expect("json") + "\n");
    }
    f(&cfg)
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::BuildCorpus {
            common,
            input,
            format,
            src,
            tgt,
        } => {
            let mut l = layers(&common)?;
            l.set_opt("input", input);
            l.set_opt("format", format);
            l.set_opt("src", src);
            l.set_opt("tgt", tgt);
            go(&l, BuildCorpus::default(), common.print_config, commands::build_corpus)
        }
        Command::TrainTokenizer { common, vocab_size } => {
            let mut l = layers(&common)?;
            l.set_opt("vocab_size", vocab_size);
            go(&l, TrainTokenizer::default(), common.print_config, commands::train_tokenizer)
        }
        Command::BuildInterlinear { common, max_tokens } => {
            let mut l = layers(&common)?;
            l.set_opt("max_tokens", max_tokens);
            go(&l, BuildInterlinear::default(), common.print_config, commands::build_interlinear)
        }
        Command::BuildSft { common, mode } => {
            let mut l = layers(&common)?;
            l.set_opt("mode", mode);
            go(&l, BuildSft::default(), common.print_config, commands::build_sft)
        }
        Command::Train { common, stage } => {
            let mut l = layers(&common)?;
            l.set_opt("stage", stage);
            // Stage-specific defaults depend on the stage the layers ask for.
            let stage = l.merged().get("stage").and_then(|v| v.as_u64()).unwrap_or(1).min(255) as u8;
            go(&l, Train::for_stage(stage), common.print_config, commands::train)
        }
        Command::AblateDirectSft { common, sizes } => {
            let mut l = layers(&common)?;
            l.set_opt("sizes", sizes);
            go(&l, Ablate::default(), common.print_config, commands::ablate)
        }
        Command::Evaluate {
            common,
            mode,
            n,
            stub,
            checkpoint,
        } => {
            let mut l = layers(&common)?;
            l.set_opt(
                "mode",
                mode.map(|m| match m {
                    ModeArg::Nshot => ModeName::Nshot,
                    ModeArg::Instruction => ModeName::Instruction,
                }),
            );
            l.set_opt("n", n);
            l.set_opt(
                "stub",
                stub.map(|s| match s {
                    StubArg::Oracle => Stub::Oracle,
                    StubArg::Empty => Stub::Empty,
                }),
            );
            l.set_opt("checkpoint", checkpoint);
            go(&l, Evaluate::default(), common.print_config, commands::evaluate_cmd)
        }
        Command::DemoSynthetic { common, quick, quiet } => {
            let l = layers(&common)?;
            go(&l, Demo::new(quick), common.print_config, |c| commands::demo(c, !quiet))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            if out.ends_with('\n') {
                print!("{out}");
            } else {
                println!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind, "message": e.message });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
