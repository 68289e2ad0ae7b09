use std::path::PathBuf;
use std::process::ExitCode;

use cfgmoe::autoencoder::AeConfig;
use cfgmoe::encoding::BlockAggregation;
use cfgmoe::explain::{ExplainConfig, IgRule};
use cfgmoe::graph::Label;
use cfgmoe_cli::config::Overrides;
use cfgmoe_cli::error::Result;
use cfgmoe_cli::*;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

/// Mixture-of-experts CFG classifier: encoding, training, explanation and
/// explanation quality metrics.
///
/// Exit status: 0 on success, 1 for invalid or missing input, 2 when a
/// stage fails while running (e.g. a diverging loss).
#[derive(Parser, Debug)]
#[command(name = "cfgmoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Aggregation {
    Mean,
    Max,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encode an instruction record file into a 439-column node feature CSV
    Encode {
        /// Instruction record file (BLOCK headers plus tab-separated records)
        #[arg(long = "in")]
        input: PathBuf,
        /// Feature CSV to write; a `.rows.json` sidecar maps rows to blocks
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "mean")]
        aggregation: Aggregation,
        /// Also write a graph file from the block successors
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Graph label: 0 benign, 1 malicious
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
        label: u8,
        /// Graph id (default: input file stem)
        #[arg(long)]
        id: Option<String>,
        /// Compress the graph's node features with these autoencoder parameters
        #[arg(long)]
        autoencoder: Option<PathBuf>,
    },
    /// Train the feature autoencoder on a 439-column CSV
    TrainAe {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = AeConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = AeConfig::default().lr)]
        lr: f64,
        /// Rows per step; 0 trains on the whole corpus each step
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Early-stopping window in epochs; 0 disables it
        #[arg(long, default_value_t = AeConfig::default().patience)]
        patience: usize,
    },
    /// Generate a synthetic labelled CFG dataset
    Synth {
        /// Graphs per class
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Node feature width
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// Output directory (graph files plus manifest.json)
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a model on the training split
    Train(Overrides),
    /// Evaluate a trained model on the test split
    Eval(Overrides),
    /// Explain one graph with integrated gradients over its edges
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long)]
        autoencoder: Option<PathBuf>,
        /// Plain midpoint quadrature instead of the squared-midpoint default
        #[arg(long)]
        midpoint: bool,
        #[arg(long)]
        no_normalize: bool,
        /// Write the explanation here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fidelity sweep and routing analytics over the test split
    XaiEval(Overrides),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Encode { .. } => "encode",
            Command::TrainAe { .. } => "train-ae",
            Command::Synth { .. } => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Explain { .. } => "explain",
            Command::XaiEval(_) => "xai-eval",
        }
    }
}

fn run(cmd: Command) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::Encode {
            input,
            out,
            aggregation,
            graph,
            label,
            id,
            autoencoder,
        } => encode(&EncodeArgs {
            input,
            out,
            aggregation: match aggregation {
                Aggregation::Mean => BlockAggregation::Mean,
                Aggregation::Max => BlockAggregation::Max,
            },
            graph,
            label: Label::from_index(label as usize).expect("range-checked label"),
            id,
            autoencoder,
        }),
        Command::TrainAe {
            input,
            out,
            epochs,
            lr,
            batch_size,
            seed,
            patience,
        } => train_ae(&TrainAeArgs {
            input,
            out,
            config: AeConfig {
                epochs,
                lr,
                batch_size: (batch_size > 0).then_some(batch_size),
                seed,
                patience,
                ..AeConfig::default()
            },
        }),
        Command::Synth { n, seed, d, out } => synth(&SynthArgs {
            n_per_class: n,
            d,
            seed,
            out,
        }),
        Command::Train(o) => train_stage(&o.resolve()?),
        Command::Eval(o) => eval_stage(&o.resolve()?),
        Command::Explain {
            model,
            graph,
            steps,
            autoencoder,
            midpoint,
            no_normalize,
            out,
        } => explain_stage(&ExplainArgs {
            model,
            graph,
            autoencoder,
            config: ExplainConfig {
                steps,
                normalize: !no_normalize,
                rule: if midpoint {
                    IgRule::Midpoint
                } else {
                    IgRule::SquaredMidpoint
                },
            },
            out,
        }),
        Command::XaiEval(o) => xai_eval_stage(&o.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let stage = cli.command.name();
    match run(cli.command) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("cfgmoe {stage}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
