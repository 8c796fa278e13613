//! Pretrains with NLL on one synthetic corpus, then fine-tunes with SMRT on
//! a second corpus drawn with a different seed from the same templates.
//!
//! `cargo run --release --example pretrain_finetune -- [pretrain epochs] [fine-tune epochs]`

use smrt::runner::{run_gen_data, run_pretrain_finetune, RunConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let pre_epochs: usize = args.next().map_or(Ok(3), |a| a.parse())?;
    let fine_epochs: usize = args.next().map_or(Ok(3), |a| a.parse())?;
    let dir = tempfile::tempdir()?;

    let mut pre = RunConfig::default();
    pre.n_pairs = 1000;
    pre.seed = 11;
    pre.out_dir = dir.path().join("corpus_a");
    run_gen_data(&pre)?;
    let mut fine = pre.clone();
    fine.seed = 12;
    fine.out_dir = dir.path().join("corpus_b");
    run_gen_data(&fine)?;

    pre.corpus_dir = pre.out_dir.clone();
    pre.out_dir = dir.path().join("pretrain");
    pre.epochs = pre_epochs;
    pre.set("objective", "nll").map_err(anyhow::Error::msg)?;
    fine.corpus_dir = fine.out_dir.clone();
    fine.out_dir = dir.path().join("finetune");
    fine.epochs = fine_epochs;
    fine.set("objective", "smrt").map_err(anyhow::Error::msg)?;

    let run = run_pretrain_finetune(&pre, &fine)?;
    if let Some(p) = &run.pretrain {
        println!(
            "pretrain: best epoch {:?}, ppl {:.3}, best parameter hash {:016x}",
            p.log.best_epoch,
            p.log.best_ppl().unwrap_or(f64::NAN),
            p.best.param_hash()
        );
    }
    let f = &run.finetune.log;
    println!("fine-tune starts from parameter hash {:016x}", f.init_param_hash);
    for r in &f.records {
        println!(
            "  epoch {:>2}  loss {:.4}  valid ppl {:.3}  teacher entropy {:.3}",
            r.epoch, r.train_loss, r.valid_ppl, r.mean_teacher_entropy
        );
    }
    Ok(())
}
