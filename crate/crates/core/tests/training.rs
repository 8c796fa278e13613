//! Invariants of corpus generation and the training loop.

use smrt::autodiff::AdamConfig;
use smrt::data::{generate_corpus, TemplateSet, BUILTIN_GRAMMAR, MAX_REFERENCES};
use smrt::model::{CondSeqModel, ModelConfig};
use smrt::objectives::{encode_pairs, Example, ObjectiveConfig, ObjectiveMode};
use smrt::runner::{corpus_vocab, train_model, TrainOutcome, TrainSettings};
use smrt::teacher::{OracleTeacher, ParaphraseGrammar};

fn run(grammar: &str, objective: ObjectiveConfig, epochs: usize) -> TrainOutcome {
    let grammar = ParaphraseGrammar::parse(grammar).unwrap();
    let templates = TemplateSet::builtin();
    let corpus = generate_corpus(&grammar, &templates, 150, 2).unwrap();
    let vocab = corpus_vocab(&templates, &grammar);
    let train = encode_pairs(&corpus.train, &vocab);
    let valid: Vec<Example> = encode_pairs(&corpus.valid, &vocab);
    let config = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        ..ModelConfig::desk(vocab.len())
    };
    let model = CondSeqModel::init(config, &vocab, 7).unwrap();
    let teacher = OracleTeacher::new(grammar, vocab);
    let settings = TrainSettings {
        objective,
        adam: AdamConfig {
            warmup_updates: 30,
            ..AdamConfig::default()
        },
        epochs,
        batch_size: 16,
        log_wall_clock: false,
        ..TrainSettings::default()
    };
    train_model(model, &train, &valid, Some(&teacher), &settings, None).unwrap()
}

#[test]
fn best_checkpoint_has_the_lowest_logged_perplexity() {
    let out = run(BUILTIN_GRAMMAR, ObjectiveConfig::smrt(0.1, 50), 6);
    let best = out.log.best_ppl().unwrap();
    assert!(out.log.records.iter().all(|r| best <= r.valid_ppl));
    let losses = out.log.train_losses();
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
}

#[test]
fn teacher_entropy_tracks_paraphrase_set_size() {
    let singleton = run("", ObjectiveConfig::smrt(0.0, 50), 2);
    let rich = run(BUILTIN_GRAMMAR, ObjectiveConfig::smrt(0.0, 50), 2);
    for r in &singleton.log.records {
        assert_eq!(r.mean_teacher_entropy, 0.0);
    }
    for r in &rich.log.records {
        assert!(r.mean_teacher_entropy > 0.0);
    }
}

#[test]
fn mixed_mode_uses_smrt_for_about_p_of_examples() {
    let objective = ObjectiveConfig {
        mode: ObjectiveMode::Mixed,
        p_use_smrt: 0.3,
        ..ObjectiveConfig::smrt(0.1, 50)
    };
    let out = run(BUILTIN_GRAMMAR, objective, 4);
    let used: usize = out.log.records.iter().map(|r| r.smrt_examples).sum();
    let grammar = ParaphraseGrammar::parse(BUILTIN_GRAMMAR).unwrap();
    let seen = 4 * generate_corpus(&grammar, &TemplateSet::builtin(), 150, 2)
        .unwrap()
        .train
        .len();
    let rate = used as f64 / seen as f64;
    assert!((rate - 0.3).abs() < 0.08, "{used}/{seen}");
}

#[test]
fn corpus_generation_is_pure_and_well_formed() {
    let grammar = ParaphraseGrammar::parse(BUILTIN_GRAMMAR).unwrap();
    let templates = TemplateSet::builtin();
    let a = generate_corpus(&grammar, &templates, 400, 9).unwrap();
    let b = generate_corpus(&grammar, &templates, 400, 9).unwrap();
    assert_eq!(a, b);
    let train_prompts: std::collections::HashSet<_> = a.train.iter().map(|p| &p.prompt).collect();
    for item in &a.test.items {
        assert!(!train_prompts.contains(&item.prompt));
        assert!(item.references.len() <= MAX_REFERENCES);
        let set = grammar.paraphrases(item.original());
        assert!(set.contains(&item.original().to_vec()));
        assert!(item.references.iter().all(|r| set.contains(r)));
    }
    for pair in a.train.iter().chain(&a.valid) {
        assert!(grammar.paraphrases(&pair.response).contains(&pair.response));
    }
}
