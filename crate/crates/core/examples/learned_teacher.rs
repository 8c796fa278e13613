//! Trains a small paraphrase model on a five-sentence grammar and sets its
//! next-token distributions beside the exact oracle ones.
//!
//! `cargo run --release --example learned_teacher -- [epochs]`

use smrt::autodiff::AdamConfig;
use smrt::data::{tokenize, Vocabulary, EOS};
use smrt::model::{CondSeqModel, ModelConfig};
use smrt::objectives::{encode_pairs, ObjectiveConfig};
use smrt::runner::{train_model, TrainSettings};
use smrt::teacher::{
    oracle_step_dist, paraphrase_training_pairs, sample_path, LearnedTeacher, OracleTeacher, ParaphraseGrammar, Teacher,
};

const GRAMMAR: &str = "\
[synonyms]
yes yeah sure
good fine great
[prefixes]
well
";

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(120);
    let grammar = ParaphraseGrammar::parse(GRAMMAR)?;
    let sentences: Vec<Vec<String>> = ["yes i am good", "sure thing", "that is great", "i feel fine", "see you"]
        .iter()
        .map(|s| tokenize(s))
        .collect();
    let mut words: Vec<Vec<String>> = sentences.iter().flat_map(|s| grammar.paraphrases(s)).collect();
    words.push(grammar.tokens());
    let vocab = Vocabulary::build(words.iter().map(Vec::as_slice));

    let pairs = paraphrase_training_pairs(&grammar, &sentences);
    let examples = encode_pairs(&pairs, &vocab);
    println!(
        "{} paraphrase pairs, {} tokens in the vocabulary",
        pairs.len(),
        vocab.len()
    );
    let config = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        dropout: 0.0,
        max_len: 16,
        ..ModelConfig::desk(vocab.len())
    };
    let settings = TrainSettings {
        objective: ObjectiveConfig::nll(0.0),
        adam: AdamConfig {
            lr: 3e-3,
            warmup_updates: 50,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        epochs,
        patience: epochs,
        batch_size: 8,
        log_wall_clock: false,
        ..TrainSettings::default()
    };
    let model = CondSeqModel::init(config, &vocab, 5)?;
    let outcome = train_model(model, &examples, &examples, None, &settings, None)?;
    println!(
        "validation perplexity {:.3}\n",
        outcome.log.best_ppl().unwrap_or(f64::NAN)
    );

    let learned = LearnedTeacher::new(outcome.best, &vocab)?;
    let oracle = OracleTeacher::new(grammar.clone(), vocab.clone());
    let y = vocab.encode(&sentences[0]);
    let mut session = learned.session(&y)?;
    let show = |probs: &[f64]| -> String {
        let mut top: Vec<(usize, f64)> = probs.iter().copied().enumerate().filter(|&(_, p)| p > 0.05).collect();
        top.sort_by(|a, b| b.1.total_cmp(&a.1));
        top.iter()
            .map(|&(t, p)| format!("{}:{p:.2}", vocab.token(t)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("{:<22} {:<44} learned (mass > 0.05)", "prefix", "oracle");
    let mut prefix = Vec::new();
    for &t in y.iter().chain(std::iter::once(&EOS)) {
        let o = oracle_step_dist(&grammar, &vocab, &y, &prefix)?;
        let l = session.step(&prefix)?;
        println!(
            "{:<22} {:<44} {}",
            vocab.decode(&prefix).join(" "),
            show(&o.probs),
            show(&l.probs)
        );
        prefix.push(t);
    }

    println!("\npaths sampled from each teacher (top 3):");
    for epoch in 0..4 {
        let a = sample_path(&oracle, &y, 3, 1, epoch, 16)?;
        let b = sample_path(&learned, &y, 3, 1, epoch, 16)?;
        println!(
            "  epoch {epoch}: oracle `{}`  learned `{}`",
            vocab.decode(&a.tokens[..a.tokens.len() - 1]).join(" "),
            vocab.decode(&b.tokens[..b.tokens.len() - 1]).join(" ")
        );
    }
    Ok(())
}
