use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kbrerank::config::PipelineConfig;
use kbrerank::eval::{self, ScorerMode};
use kbrerank::pipeline;

/// Entity-aware n-best reranking: train and apply the reranker pipeline.
#[derive(Parser)]
#[command(name = "kbrerank", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.lr=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every output artifact.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic KB, training corpus and held-out/test n-best lists.
    SynthWorld,
    BuildVocab,
    BuildKbIndex,
    /// Train the full-data n-gram model and record the jackknife folds.
    TrainNgram {
        /// Also write the model in ARPA format.
        #[arg(long)]
        arpa: Option<PathBuf>,
    },
    GenNegatives,
    /// Dump feature bundles of every training candidate and n-best hypothesis.
    ExtractFeatures,
    TrainReranker,
    TrainLstmLm,
    /// Rerank n-best lists with weights tuned on the held-out set.
    Rerank {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "reranker")]
        mode: String,
        /// Output JSON lines; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Tune weights on held-out data, evaluate every scorer on test and
    /// print the summary table.
    Evaluate,
    /// Run every stage in order.
    Pipeline,
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for s in &c.overrides {
        cfg.set(s)?;
    }
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    if let Some(d) = &c.out_dir {
        cfg.paths.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::SynthWorld => {
            let w = pipeline::synth_world(&cfg)?;
            eprintln!(
                "{} KB entries, {} training sentences, {} held-out and {} test utterances",
                w.kb.len(),
                w.train.len(),
                w.heldout.len(),
                w.test.len()
            );
        }
        Command::BuildVocab => {
            let v = pipeline::build_vocab(&cfg)?;
            eprintln!("vocabulary of {} words, hash {}", v.size(), v.hash());
        }
        Command::BuildKbIndex => {
            let idx = pipeline::build_kb_index(&cfg)?;
            eprintln!("{} KB entries indexed", idx.entries().len());
        }
        Command::TrainNgram { arpa } => {
            let m = pipeline::train_ngram(&cfg)?;
            if let Some(p) = arpa {
                std::fs::write(&p, m.to_arpa()).with_context(|| p.display().to_string())?;
            }
            eprintln!("order-{} model over {} events", m.order(), m.num_events());
        }
        Command::GenNegatives => {
            let r = pipeline::gen_negatives(&cfg)?;
            eprintln!("{} training sentences with negatives", r.len());
        }
        Command::ExtractFeatures => {
            let r = pipeline::extract_features_stage(&cfg)?;
            eprintln!("{} feature records", r.len());
        }
        Command::TrainReranker => {
            let o = pipeline::train_reranker(&cfg)?;
            eprintln!("best epoch {} with held-out WER {:.4}", o.best_epoch, o.best_wer);
        }
        Command::TrainLstmLm => {
            let lm = pipeline::train_lstm_lm(&cfg)?;
            eprintln!("trained {} epochs", lm.loss_log.len());
        }
        Command::Rerank { input, mode, output } => {
            let mode = ScorerMode::parse(&mode)?;
            let out = pipeline::rerank_to_jsonl(&pipeline::rerank(&cfg, &input, mode)?);
            match output {
                Some(p) => std::fs::write(&p, out).with_context(|| p.display().to_string())?,
                None => print!("{out}"),
            }
        }
        Command::Evaluate => print!("{}", eval::summary_table(&pipeline::evaluate(&cfg)?)),
        Command::Pipeline => print!("{}", eval::summary_table(&pipeline::run_all(&cfg)?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
