use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use exemplar_dialog::model::Architecture;
use exemplar_dialog::pipeline::{Pipeline, PipelineConfig, PipelineError, Split, WORKDIR_ENV};
use exemplar_dialog::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(name = "exemplar-dialog", version, about = "Exemplar-conditioned HRED for goal-oriented dialogue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML)
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Overrides the configured work directory
    #[arg(long, env = WORKDIR_ENV)]
    work_dir: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Single worker thread
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize, delexicalize, split and build the vocabulary
    Prepare(Common),
    /// Build the retrieval index over training triples and fit the reranker
    Index(Common),
    /// Train a model
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "hred")]
        arch: Architecture,
        /// Separate weights for the exemplar encoder
        #[arg(long)]
        no_share: bool,
    },
    /// Greedy-decode responses for a split
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "hred")]
        arch: Architecture,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Score generated responses
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "hred")]
        arch: Architecture,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Side-by-side table of evaluated runs
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Write a synthetic corpus (dialogues, ontology, database, embeddings)
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().dialogues)]
        dialogues: usize,
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        seed: u64,
    },
}

fn pipeline(common: &Common, no_share: bool) -> Result<Pipeline, PipelineError> {
    if common.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| PipelineError::Usage(e.to_string()))?;
    }
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if no_share {
        config.model.share_encoder = false;
    }
    let work_dir = common
        .work_dir
        .clone()
        .or_else(|| config.paths.work_dir.clone())
        .unwrap_or_else(|| PathBuf::from("work"));
    Ok(Pipeline::new(config, work_dir))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Prepare(c) => {
            let s = pipeline(&c, false)?.cmd_prepare()?;
            println!(
                "dialogues {} (train {}, dev {}, test {})",
                s.dialogues, s.train_dialogues, s.dev_dialogues, s.test_dialogues
            );
            println!("triples train {}, dev {}, test {}", s.train_triples, s.dev_triples, s.test_triples);
            println!("vocabulary {}", s.vocab_size);
        }
        Command::Index(c) => {
            let s = pipeline(&c, false)?.cmd_index()?;
            println!("indexed {} training triples over {} terms", s.records, s.terms);
            if let Some(e) = s.dev_evaluation {
                println!(
                    "exemplar BLEU-2 on {} dev queries: nearest {:.4}, reranked {:.4}",
                    e.queries, e.nearest_bleu2, e.reranked_bleu2
                );
            }
        }
        Command::Train { common, arch, no_share } => {
            let h = pipeline(&common, no_share)?.cmd_train(arch)?;
            for e in &h.epochs {
                println!(
                    "epoch {:>3}  train {:.4}  dev {:.4}  ppl {:.2}",
                    e.epoch, e.train_loss, e.dev_loss, e.dev_perplexity
                );
            }
            if let (Some(b), Some(l)) = (h.best_epoch, h.best_dev_loss) {
                println!("best epoch {b}, dev loss {l:.4}");
            }
        }
        Command::Generate { common, arch, split } => {
            let p = pipeline(&common, false)?;
            let n = p.cmd_generate(arch, split)?;
            println!("{n} responses -> {}", p.generations_path(arch, split).display());
        }
        Command::Evaluate { common, arch, split } => {
            let r = pipeline(&common, false)?.cmd_evaluate(arch, split)?;
            print!("{}", r.render());
        }
        Command::Report { common, split } => {
            print!("{}", pipeline(&common, false)?.cmd_report(split)?);
        }
        Command::Synth { out, dialogues, seed } => {
            let cfg = SynthConfig {
                dialogues,
                seed,
                ..SynthConfig::default()
            };
            generate(&cfg)
                .write(&out)
                .map_err(|e| PipelineError::Data(format!("{}: {e}", out.display())))?;
            println!("wrote {dialogues} dialogues to {}", out.display());
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
