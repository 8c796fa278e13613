//! One function per CLI stage. Each reads a [`RunConfig`] and writes its
//! artifacts under the configured paths.

use std::path::{Path, PathBuf};

use crate::autodiff::{grad_check, AutodiffError};
use crate::data::{
    detokenize, generate_corpus, read_multi_ref, tokenize, Corpus, DialogPair, MultiRefTestSet, TemplateSet,
    Vocabulary, BUILTIN_GRAMMAR,
};
use crate::decode::{
    beam_search, mmi_rerank, nbest, read_nbest, rescore, top_k_sample_decode, write_nbest, Hypothesis, NBestList,
};
use crate::eval::{compare_reports, evaluate, Comparison, EmbeddingTable, MetricReport, RefMode};
use crate::model::{CondSeqModel, ModelConfig};
use crate::objectives::{encode_pairs, training_objective, Example, ObjectiveConfig};
use crate::teacher::{
    paraphrase_training_pairs, LearnedTeacher, OracleTeacher, ParaphraseGrammar, ReferenceTeacher, Teacher,
};

use super::config::{RunConfig, Strategy, TeacherKind};
use super::{train_model, RunError, TrainOutcome};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const GRAMMAR_FILE: &str = "grammar.txt";
pub const PROMPTS_FILE: &str = "prompts.txt";
pub const CONFIG_FILE: &str = "config.txt";
/// Subdirectory of a generated corpus holding (sentence, paraphrase) pairs
/// for training a learned teacher.
pub const PARAPHRASE_DIR: &str = "paraphrase";

fn create_dir(dir: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), RunError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| RunError::io(path, e))
}

fn lines_to_text(lines: &[Vec<String>]) -> String {
    lines.iter().map(|l| detokenize(l) + "\n").collect()
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

/// The grammar named in the config, else the one saved beside the corpus,
/// else the built-in grammar.
pub fn load_grammar(cfg: &RunConfig) -> Result<ParaphraseGrammar, RunError> {
    if !cfg.grammar.as_os_str().is_empty() {
        cfg.require("grammar", &cfg.grammar)?;
        return Ok(ParaphraseGrammar::load(&cfg.grammar)?);
    }
    let beside = cfg.corpus_dir.join(GRAMMAR_FILE);
    if !cfg.corpus_dir.as_os_str().is_empty() && beside.exists() {
        return Ok(ParaphraseGrammar::load(&beside)?);
    }
    Ok(ParaphraseGrammar::parse(BUILTIN_GRAMMAR)?)
}

/// Vocabulary over every word the templates and the grammar can produce.
/// It does not depend on which pairs were sampled, so corpora generated
/// from the same templates and grammar share it.
pub fn corpus_vocab(templates: &TemplateSet, grammar: &ParaphraseGrammar) -> Vocabulary {
    let words: Vec<String> = templates.tokens().into_iter().chain(grammar.tokens()).collect();
    Vocabulary::build(words.iter().map(std::slice::from_ref))
}

/// Generates a corpus and writes it with its vocabulary, grammar, test
/// prompts and a paraphrase-pair corpus for a learned teacher.
pub fn run_gen_data(cfg: &RunConfig) -> Result<Corpus, RunError> {
    let grammar = load_grammar(cfg)?;
    let templates = TemplateSet::builtin();
    let corpus = generate_corpus(&grammar, &templates, cfg.n_pairs, cfg.seed)?;
    let vocab = corpus_vocab(&templates, &grammar);
    if let Some(word) = corpus.sentences().flatten().find(|w| vocab.get(w).is_none()) {
        return Err(RunError::Config(format!(
            "generated word `{word}` is outside the vocabulary"
        )));
    }
    let dir = &cfg.out_dir;
    corpus.save(dir)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    grammar.save(&dir.join(GRAMMAR_FILE))?;
    let prompts: Vec<Vec<String>> = corpus.test.items.iter().map(|it| it.prompt.clone()).collect();
    write(&dir.join(PROMPTS_FILE), &lines_to_text(&prompts))?;

    let responses = |pairs: &[DialogPair]| -> Vec<Vec<String>> { pairs.iter().map(|p| p.response.clone()).collect() };
    let para = Corpus {
        train: paraphrase_training_pairs(&grammar, &responses(&corpus.train)),
        valid: paraphrase_training_pairs(&grammar, &responses(&corpus.valid)),
        test: MultiRefTestSet {
            items: corpus
                .test
                .items
                .iter()
                .map(|it| crate::data::MultiRefItem {
                    id: it.id,
                    prompt: it.original().to_vec(),
                    references: it.references.clone(),
                })
                .collect(),
        },
    };
    let para_dir = dir.join(PARAPHRASE_DIR);
    para.save(&para_dir)?;
    vocab.save(&para_dir.join(VOCAB_FILE))?;
    grammar.save(&para_dir.join(GRAMMAR_FILE))?;
    Ok(corpus)
}

fn load_corpus(cfg: &RunConfig) -> Result<(Corpus, Vocabulary), RunError> {
    cfg.require("corpus_dir", &cfg.corpus_dir)?;
    cfg.require("vocab", &cfg.vocab_path())?;
    let corpus = Corpus::load(&cfg.corpus_dir)?;
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    Ok((corpus, vocab))
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    }
}

/// Loads `init_checkpoint` when set, otherwise initializes from the seed.
pub fn initial_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<CondSeqModel, RunError> {
    if cfg.init_checkpoint.as_os_str().is_empty() {
        Ok(CondSeqModel::init(model_config(cfg, vocab), vocab, cfg.seed)?)
    } else {
        cfg.require("init_checkpoint", &cfg.init_checkpoint)?;
        Ok(CondSeqModel::load_for(&cfg.init_checkpoint, vocab)?)
    }
}

/// The teacher the objective asks for, or `None` for plain NLL.
pub fn build_teacher(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Option<Box<dyn Teacher>>, RunError> {
    if !cfg.objective.needs_teacher() {
        return Ok(None);
    }
    Ok(Some(match cfg.teacher {
        TeacherKind::Oracle => Box::new(OracleTeacher::new(load_grammar(cfg)?, vocab.clone())),
        TeacherKind::Reference => Box::new(ReferenceTeacher::new(vocab)),
        TeacherKind::Learned => {
            cfg.require("teacher_checkpoint", &cfg.teacher_checkpoint)?;
            let model = CondSeqModel::load_for(&cfg.teacher_checkpoint, vocab)?;
            Box::new(LearnedTeacher::new(model, vocab)?)
        }
    }))
}

fn examples(pairs: &[DialogPair], vocab: &Vocabulary, reverse: bool) -> Vec<Example> {
    if !reverse {
        return encode_pairs(pairs, vocab);
    }
    let swapped: Vec<DialogPair> = pairs
        .iter()
        .map(|p| DialogPair {
            id: p.id,
            prompt: p.response.clone(),
            response: p.prompt.clone(),
        })
        .collect();
    encode_pairs(&swapped, vocab)
}

fn train_phase(
    cfg: &RunConfig,
    corpus: &Corpus,
    vocab: &Vocabulary,
    model: CondSeqModel,
) -> Result<TrainOutcome, RunError> {
    let teacher = build_teacher(cfg, vocab)?;
    let train = examples(&corpus.train, vocab, cfg.reverse);
    let valid = examples(&corpus.valid, vocab, cfg.reverse);
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(CONFIG_FILE), &cfg.to_text())?;
    train_model(
        model,
        &train,
        &valid,
        teacher.as_deref(),
        &cfg.train_settings(),
        Some(&cfg.out_dir),
    )
}

/// Trains one model and writes its checkpoints, run log and resolved
/// config to `out_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome, RunError> {
    let (corpus, vocab) = load_corpus(cfg)?;
    let model = initial_model(cfg, &vocab)?;
    train_phase(cfg, &corpus, &vocab, model)
}

#[derive(Clone, Debug)]
pub struct PretrainFinetune {
    /// `None` when the pretraining phase has zero epochs.
    pub pretrain: Option<TrainOutcome>,
    pub finetune: TrainOutcome,
}

/// Trains on the pretraining corpus, then fine-tunes on the second corpus
/// starting from the pretraining best checkpoint. With zero pretraining
/// epochs this is exactly `run_train(finetune)`.
pub fn run_pretrain_finetune(pretrain: &RunConfig, finetune: &RunConfig) -> Result<PretrainFinetune, RunError> {
    let (pre_corpus, pre_vocab) = load_corpus(pretrain)?;
    let (fine_corpus, fine_vocab) = load_corpus(finetune)?;
    if pre_vocab.hash() != fine_vocab.hash() {
        return Err(RunError::Config(format!(
            "pretraining vocabulary {:016x} differs from fine-tuning vocabulary {:016x}",
            pre_vocab.hash(),
            fine_vocab.hash()
        )));
    }
    if pretrain.epochs == 0 {
        return Ok(PretrainFinetune {
            pretrain: None,
            finetune: run_train(finetune)?,
        });
    }
    if model_config(pretrain, &pre_vocab) != model_config(finetune, &fine_vocab) {
        return Err(RunError::Config(
            "pretraining and fine-tuning model shapes differ".into(),
        ));
    }
    let pre = train_phase(pretrain, &pre_corpus, &pre_vocab, initial_model(pretrain, &pre_vocab)?)?;
    let fine = train_phase(finetune, &fine_corpus, &fine_vocab, pre.best.clone())?;
    Ok(PretrainFinetune {
        pretrain: Some(pre),
        finetune: fine,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub responses: Vec<Vec<String>>,
    pub nbest: NBestList,
}

fn load_prompts(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Vec<Vec<crate::data::TokenId>>, RunError> {
    cfg.require("prompts", &cfg.prompts)?;
    Ok(read_lines(&cfg.prompts)?.iter().map(|p| vocab.encode(p)).collect())
}

fn load_reverse(cfg: &RunConfig, vocab: &Vocabulary) -> Result<CondSeqModel, RunError> {
    if cfg.reverse_checkpoint.as_os_str().is_empty() {
        return Err(RunError::Config("mmi needs `reverse_checkpoint`".into()));
    }
    cfg.require("reverse_checkpoint", &cfg.reverse_checkpoint)?;
    Ok(CondSeqModel::load_for(&cfg.reverse_checkpoint, vocab)?)
}

/// Decodes one response per prompt line with beam search, top-k sampling or
/// MMI-reranked beam search. Writes `output` and, if set, `nbest_file`.
pub fn run_generate(cfg: &RunConfig) -> Result<Generation, RunError> {
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    cfg.require("checkpoint", &cfg.checkpoint)?;
    let model = CondSeqModel::load_for(&cfg.checkpoint, &vocab)?;
    let reverse = match cfg.strategy {
        Strategy::Mmi => Some(load_reverse(cfg, &vocab)?),
        _ => None,
    };
    let prompts = load_prompts(cfg, &vocab)?;
    let mut responses = Vec::with_capacity(prompts.len());
    let mut list: NBestList = Vec::new();
    for (i, x) in prompts.iter().enumerate() {
        let hyps: Vec<Hypothesis> = match cfg.strategy {
            Strategy::Beam => {
                let mut h = beam_search(&model, x, cfg.beam, cfg.max_len)?;
                h.truncate(cfg.nbest.max(1));
                h
            }
            Strategy::Sample => vec![top_k_sample_decode(&model, x, cfg.sample_k, cfg.seed, cfg.max_len)?],
            Strategy::Mmi => {
                let h = nbest(&model, x, cfg.mmi_nbest, cfg.beam.max(cfg.mmi_nbest))?;
                let reverse = reverse.as_ref().expect("reverse model loaded for mmi");
                mmi_rerank(&h, reverse, x, cfg.lambda, model.vocab_hash())?
            }
        };
        responses.push(vocab.decode(hyps[0].body()));
        list.push((i, hyps));
    }
    if !cfg.output.as_os_str().is_empty() {
        write(&cfg.output, &lines_to_text(&responses))?;
    }
    if !cfg.nbest_file.as_os_str().is_empty() {
        write_nbest(&cfg.nbest_file, &list, &vocab)?;
    }
    Ok(Generation { responses, nbest: list })
}

/// File name for the reranked outputs at one interpolation weight.
pub fn rerank_output_name(lambda: f64) -> String {
    format!("mmi_lambda{lambda}.txt")
}

/// Reranks a saved n-best list with the reverse model for every weight in
/// `lambdas`, writing one response file per weight to `out_dir`.
pub fn run_rerank(cfg: &RunConfig) -> Result<Vec<(f64, Vec<Vec<String>>)>, RunError> {
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    cfg.require("nbest_file", &cfg.nbest_file)?;
    let reverse = load_reverse(cfg, &vocab)?;
    let list = read_nbest(&cfg.nbest_file, &vocab)?;
    let prompts = load_prompts(cfg, &vocab)?;
    if prompts.len() != list.len() {
        return Err(RunError::Config(format!(
            "{} prompts but the n-best file covers {}",
            prompts.len(),
            list.len()
        )));
    }
    let mut scored = Vec::with_capacity(list.len());
    for ((_, hyps), x) in list.iter().zip(&prompts) {
        scored.push(mmi_rerank(hyps, &reverse, x, 0.0, vocab.hash())?);
    }
    let mut out = Vec::new();
    for &lambda in &cfg.lambdas {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(RunError::Decode(crate::decode::DecodeError::Lambda(lambda)));
        }
        let mut responses = Vec::with_capacity(scored.len());
        for hyps in &mut scored {
            rescore(hyps, lambda);
            responses.push(vocab.decode(hyps[0].body()));
        }
        write(
            &cfg.out_dir.join(rerank_output_name(lambda)),
            &lines_to_text(&responses),
        )?;
        out.push((lambda, responses));
    }
    Ok(out)
}

/// Report file names for one system: `(key-value, table)`.
pub fn report_paths(dir: &Path, system: &str, mode: RefMode) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{system}.{}.txt", mode.as_str())),
        dir.join(format!("{system}.{}.table.txt", mode.as_str())),
    )
}

/// The embedding table named by `embeddings`: `random` or a checkpoint path.
pub fn load_embeddings(cfg: &RunConfig, vocab: &Vocabulary) -> Result<EmbeddingTable, RunError> {
    if cfg.embeddings == "random" {
        return Ok(EmbeddingTable::random(vocab, cfg.embedding_dim, cfg.seed));
    }
    let path = PathBuf::from(&cfg.embeddings);
    cfg.require("embeddings", &path)?;
    Ok(EmbeddingTable::from_model(
        &CondSeqModel::load_for(&path, vocab)?,
        vocab,
    )?)
}

/// Scores a hypothesis file against the multi-reference test file and
/// writes single- and multi-reference reports.
pub fn run_eval(cfg: &RunConfig) -> Result<(MetricReport, MetricReport), RunError> {
    let references = if cfg.references.as_os_str().is_empty() {
        cfg.corpus_dir.join(crate::data::TEST_FILE)
    } else {
        cfg.references.clone()
    };
    cfg.require("references", &references)?;
    cfg.require("hypotheses", &cfg.hypotheses)?;
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    let refs = read_multi_ref(&references)?;
    let hyps = read_lines(&cfg.hypotheses)?;
    let ref_lists: Vec<Vec<Vec<String>>> = refs.items.iter().map(|it| it.references.clone()).collect();
    let emb = load_embeddings(cfg, &vocab)?;
    let single = evaluate(&hyps, &ref_lists, &emb, RefMode::Single)?;
    let multi = evaluate(&hyps, &ref_lists, &emb, RefMode::Multi)?;
    create_dir(&cfg.out_dir)?;
    for report in [&single, &multi] {
        let (kv, table) = report_paths(&cfg.out_dir, &cfg.system, report.mode);
        report.save(&kv)?;
        write(&table, &report.to_table())?;
    }
    Ok((single, multi))
}

/// File name of a comparison table.
pub fn compare_output_name(cfg: &RunConfig) -> String {
    format!("compare_{}_vs_{}.txt", cfg.name_a, cfg.name_b)
}

/// Pairwise bootstrap verdict per metric between two saved reports.
pub fn run_compare(cfg: &RunConfig) -> Result<Comparison, RunError> {
    cfg.require("report_a", &cfg.report_a)?;
    cfg.require("report_b", &cfg.report_b)?;
    let a = MetricReport::load(&cfg.report_a)?;
    let b = MetricReport::load(&cfg.report_b)?;
    let cmp = compare_reports(&a, &b, (&cfg.name_a, &cfg.name_b), cfg.resamples, cfg.alpha, cfg.seed)?;
    write(&cfg.out_dir.join(compare_output_name(cfg)), &cmp.to_table())?;
    Ok(cmp)
}

/// Toy task for gradient checks: 16 words plus the reserved symbols, with
/// two synonym classes so the oracle teacher has real choices.
pub const GRAD_CHECK_GRAMMAR: &str = "[synonyms]\nyes yeah sure\ngood fine great\n";
const GRAD_CHECK_PAIRS: [(&str, &str); 3] = [
    ("hello there", "yes i am good"),
    ("are you ok", "sure you are fine"),
    ("thanks a lot", "yeah great"),
];

/// Vocabulary, grammar and examples of the gradient-check task.
pub fn grad_check_task() -> Result<(Vocabulary, ParaphraseGrammar, Vec<Example>), RunError> {
    let grammar = ParaphraseGrammar::parse(GRAD_CHECK_GRAMMAR)?;
    let pairs: Vec<DialogPair> = GRAD_CHECK_PAIRS
        .iter()
        .enumerate()
        .map(|(id, (p, r))| DialogPair {
            id,
            prompt: tokenize(p),
            response: tokenize(r),
        })
        .collect();
    let mut sentences: Vec<Vec<String>> = pairs
        .iter()
        .flat_map(|p| [p.prompt.clone(), p.response.clone()])
        .collect();
    sentences.extend(grammar.tokens().into_iter().map(|t| vec![t]));
    let vocab = Vocabulary::build(sentences.iter().map(Vec::as_slice));
    let examples = encode_pairs(&pairs, &vocab);
    Ok((vocab, grammar, examples))
}

/// Largest relative error between analytic and central-difference gradients
/// of the training objective on the toy task. Dropout is disabled.
pub fn grad_check_objective(
    model_config: &ModelConfig,
    objective: &ObjectiveConfig,
    fd_eps: f64,
    coords: usize,
    seed: u64,
) -> Result<f64, RunError> {
    let (vocab, grammar, batch) = grad_check_task()?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        dropout: 0.0,
        attention_dropout: 0.0,
        relu_dropout: 0.0,
        ..model_config.clone()
    };
    let model = CondSeqModel::init(config, &vocab, seed)?;
    let teacher = OracleTeacher::new(grammar, vocab.clone());
    let teacher = objective.needs_teacher().then_some(&teacher as &dyn Teacher);
    let params: Vec<_> = model.params().tensors().to_vec();
    let err = grad_check(
        |tape, vars| {
            let bound = model.bind_vars(vars.to_vec());
            training_objective(tape, &bound, objective, &batch, teacher, 1, seed, false)
                .map(|(loss, _)| loss)
                .map_err(|e| AutodiffError::InvalidArgument {
                    op: "objective",
                    msg: e.to_string(),
                })
        },
        &params,
        fd_eps,
        coords,
        seed,
    )?;
    Ok(err)
}

/// Gradient check with the config's model shape and objective.
pub fn run_grad_check(cfg: &RunConfig) -> Result<f64, RunError> {
    grad_check_objective(&cfg.model, &cfg.objective, cfg.fd_eps, cfg.check_coords, cfg.seed)
}
