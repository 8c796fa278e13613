use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use smrt::runner::{self, RunConfig};

#[derive(Parser)]
#[command(name = "smrt", about = "Simulated multiple reference training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with multi-reference test set.
    GenData(Common),
    /// Train a model; with --pretrain, pretrain first and fine-tune from it.
    Train {
        #[command(flatten)]
        common: Common,
        /// Config of a pretraining phase run before this one.
        #[arg(long)]
        pretrain: Option<PathBuf>,
    },
    /// Decode responses for a prompt file.
    Generate(Common),
    /// Rerank a saved n-best list with a reverse model over a list of weights.
    Rerank(Common),
    /// Score hypotheses against single and multiple references.
    Eval(Common),
    /// Pairwise bootstrap comparison of two metric reports.
    Compare(Common),
    /// Check analytic gradients of the training objective.
    GradCheck(Common),
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let corpus = runner::run_gen_data(&cfg)?;
            println!(
                "wrote {} train, {} valid, {} test pairs to {}",
                corpus.train.len(),
                corpus.valid.len(),
                corpus.test.len(),
                cfg.out_dir.display()
            );
        }
        Command::Train { common, pretrain } => {
            let cfg = common.load()?;
            let outcome = match pretrain {
                Some(path) => {
                    let mut pre = RunConfig::load(&path).with_context(|| format!("reading {}", path.display()))?;
                    pre.apply_overrides(&common.overrides)?;
                    runner::run_pretrain_finetune(&pre, &cfg)?.finetune
                }
                None => runner::run_train(&cfg)?,
            };
            let log = &outcome.log;
            println!(
                "{} epochs, best epoch {} with validation perplexity {:.4}; outputs in {}",
                log.records.len(),
                log.best_epoch.map_or("-".into(), |e| e.to_string()),
                log.best_ppl().unwrap_or(f64::NAN),
                cfg.out_dir.display()
            );
        }
        Command::Generate(c) => {
            let cfg = c.load()?;
            let gen = runner::run_generate(&cfg)?;
            if cfg.output.as_os_str().is_empty() {
                for r in &gen.responses {
                    println!("{}", smrt::data::detokenize(r));
                }
            }
        }
        Command::Rerank(c) => {
            let cfg = c.load()?;
            for (lambda, _) in runner::run_rerank(&cfg)? {
                println!("{}", cfg.out_dir.join(runner::rerank_output_name(lambda)).display());
            }
        }
        Command::Eval(c) => {
            let (single, multi) = runner::run_eval(&c.load()?)?;
            print!("{}\n{}", single.to_table(), multi.to_table());
        }
        Command::Compare(c) => print!("{}", runner::run_compare(&c.load()?)?.to_table()),
        Command::GradCheck(c) => {
            let err = runner::run_grad_check(&c.load()?)?;
            println!("max relative error {err:.3e}");
        }
    }
    Ok(())
}
