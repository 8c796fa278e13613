//! Trains an NLL baseline and an SMRT student on the same synthetic corpus
//! and compares the diversity and multi-reference quality of their beam
//! outputs.
//!
//! `cargo run --release --example smrt_vs_nll -- [epochs] [seed]`

use smrt::eval::RefMode;
use smrt::runner::{
    report_paths, run_compare, run_eval, run_gen_data, run_generate, run_train, RunConfig, BEST_CHECKPOINT,
    PROMPTS_FILE,
};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(Ok(25), |a| a.parse())?;
    let seed: u64 = args.next().map_or(Ok(1), |a| a.parse())?;
    let dir = tempfile::tempdir()?;
    let root = dir.path();

    let mut base = RunConfig::default();
    base.seed = seed;
    base.epochs = epochs;
    base.out_dir = root.join("data");
    run_gen_data(&base)?;
    base.corpus_dir = root.join("data");

    for system in ["nll", "smrt"] {
        let mut cfg = base.clone();
        cfg.set("objective", system).map_err(anyhow::Error::msg)?;
        cfg.out_dir = root.join(system);
        let outcome = run_train(&cfg)?;
        println!(
            "{system:<5} best epoch {:>3}  valid ppl {:.3}  teacher entropy {:.3}",
            outcome.log.best_epoch.unwrap_or(0),
            outcome.log.best_ppl().unwrap_or(f64::NAN),
            outcome.log.records.last().map_or(0.0, |r| r.mean_teacher_entropy)
        );
        cfg.checkpoint = root.join(system).join(BEST_CHECKPOINT);
        cfg.prompts = root.join("data").join(PROMPTS_FILE);
        cfg.output = root.join(format!("{system}.txt"));
        run_generate(&cfg)?;
        cfg.hypotheses = cfg.output.clone();
        cfg.out_dir = root.join("reports");
        cfg.system = system.into();
        run_eval(&cfg)?;
    }

    let mut cfg = base.clone();
    cfg.report_a = report_paths(&root.join("reports"), "smrt", RefMode::Multi).0;
    cfg.report_b = report_paths(&root.join("reports"), "nll", RefMode::Multi).0;
    cfg.name_a = "smrt".into();
    cfg.name_b = "nll".into();
    cfg.out_dir = root.join("reports");
    println!();
    print!("{}", run_compare(&cfg)?.to_table());
    Ok(())
}
