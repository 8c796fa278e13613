//! Trains a forward and a reverse model briefly, then reranks each prompt's
//! 10-best list by `(1 - λ) log p(y|x) + λ log p(x|y)` for several λ.
//!
//! `cargo run --release --example mmi_rerank -- [epochs]`

use smrt::autodiff::AdamConfig;
use smrt::data::{detokenize, generate_corpus, TemplateSet, BUILTIN_GRAMMAR};
use smrt::decode::{mmi_rerank, nbest};
use smrt::model::{CondSeqModel, ModelConfig};
use smrt::objectives::{encode_pairs, ObjectiveConfig};
use smrt::runner::{corpus_vocab, train_model, TrainSettings};
use smrt::teacher::ParaphraseGrammar;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(10), |a| a.parse())?;
    let grammar = ParaphraseGrammar::parse(BUILTIN_GRAMMAR)?;
    let templates = TemplateSet::builtin();
    let corpus = generate_corpus(&grammar, &templates, 1000, 1)?;
    let vocab = corpus_vocab(&templates, &grammar);
    let settings = TrainSettings {
        objective: ObjectiveConfig::nll(0.1),
        adam: AdamConfig {
            warmup_updates: 300,
            ..AdamConfig::default()
        },
        epochs,
        log_wall_clock: false,
        ..TrainSettings::default()
    };
    let swap = |pairs: &[smrt::data::DialogPair]| -> Vec<smrt::data::DialogPair> {
        pairs
            .iter()
            .map(|p| smrt::data::DialogPair {
                id: p.id,
                prompt: p.response.clone(),
                response: p.prompt.clone(),
            })
            .collect()
    };
    let config = ModelConfig::desk(vocab.len());
    let forward = train_model(
        CondSeqModel::init(config.clone(), &vocab, 1)?,
        &encode_pairs(&corpus.train, &vocab),
        &encode_pairs(&corpus.valid, &vocab),
        None,
        &settings,
        None,
    )?
    .best;
    let reverse = train_model(
        CondSeqModel::init(config, &vocab, 2)?,
        &encode_pairs(&swap(&corpus.train), &vocab),
        &encode_pairs(&swap(&corpus.valid), &vocab),
        None,
        &settings,
        None,
    )?
    .best;

    for item in corpus.test.items.iter().take(3) {
        let x = vocab.encode(&item.prompt);
        let hyps = nbest(&forward, &x, 10, 10)?;
        println!("prompt: {}", detokenize(&item.prompt));
        for lambda in [0.0, 0.3, 0.5, 1.0] {
            let ranked = mmi_rerank(&hyps, &reverse, &x, lambda, forward.vocab_hash())?;
            let top = &ranked[0];
            println!(
                "  λ={lambda:.1}  {:<36} fwd {:>7.3}  rev {:>7.3}",
                detokenize(&vocab.decode(top.body())),
                top.forward_score,
                top.reverse_score.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
