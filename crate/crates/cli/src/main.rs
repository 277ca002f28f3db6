use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use discrec::recommender::Variant;
use discrec_cli::pipeline::{self, Analysis, EvalSplit};
use discrec_cli::{load_config, CliError, ExperimentConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "discrec", version, about = "Generative recommendation with semantic IDs")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set tokenizer.levels=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Norms,
    Heatmaps,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Load or synthesize interactions, filter, split and write them out.
    PrepareData,
    /// Fit the residual-quantization tokenizer on item embeddings.
    TrainTokenizer,
    /// Quantize every item into a unique semantic ID.
    AssignIds,
    /// Train the recommender, sweeping the configured learning rates.
    TrainRec {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Rank a split with constrained beam search and score it.
    Evaluate {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train and test several variants and tabulate them.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
    },
    /// Export embedding norm profiles and attention heatmaps.
    Analyze {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, value_enum, default_value = "all")]
        which: WhichArg,
    },
    /// Every stage from data preparation through test evaluation.
    Run,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let seed = std::env::var(SEED_ENV).ok();
    let cfg: ExperimentConfig = load_config(cli.config.as_deref(), &cli.sets, seed.as_deref())?;
    let default = cfg.recommender.variant;
    match cli.command {
        Command::PrepareData => {
            let s = pipeline::prepare_data(&cfg)?;
            println!(
                "{} users, {} items, {} interactions; {} train / {} valid / {} test samples",
                s.stats.users, s.stats.items, s.stats.interactions, s.train, s.valid, s.test
            );
        }
        Command::TrainTokenizer => {
            let s = pipeline::train_tokenizer_stage(&cfg)?;
            println!("final loss {:.6}, {} dead-code resets", s.final_loss, s.dead_code_resets);
        }
        Command::AssignIds => {
            let r = pipeline::assign_ids_stage(&cfg)?;
            println!("{} items, {} reassigned, collision rate {:.4}", r.n_items, r.reassigned.len(), r.collision_rate);
        }
        Command::TrainRec { variant } => {
            let t = pipeline::train_rec_stage(&cfg, variant.unwrap_or(default))?;
            println!("best lr {} with validation recall@10 {:.4}", t.best.lr, t.best.valid_recall_at_10);
        }
        Command::Evaluate { variant, split } => {
            let which = match split {
                SplitArg::Valid => EvalSplit::Valid,
                SplitArg::Test => EvalSplit::Test,
            };
            let e = pipeline::evaluate_stage(&cfg, variant.unwrap_or(default), which)?;
            print!("{}", e.table.to_csv());
        }
        Command::Ablate { variants } => {
            let variants = if variants.is_empty() { Variant::ABLATIONS.to_vec() } else { variants };
            for (v, t) in pipeline::ablate_stage(&cfg, &variants)? {
                println!("{v}: {}", t.to_json());
            }
        }
        Command::Analyze { variant, which } => {
            let which = match which {
                WhichArg::Norms => Analysis::Norms,
                WhichArg::Heatmaps => Analysis::Heatmaps,
                WhichArg::All => Analysis::All,
            };
            for f in pipeline::analyze_stage(&cfg, variant.unwrap_or(default), which)? {
                println!("{}", f.display());
            }
        }
        Command::Run => {
            let e = pipeline::run_all(&cfg)?;
            print!("{}", e.table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
