//! Experiment orchestration: training, pretrain/fine-tune, generation,
//! evaluation and system comparison.

mod config;
mod pipeline;
mod train;

use std::path::{Path, PathBuf};

pub use config::{RunConfig, Strategy, TeacherKind};
pub use pipeline::{
    build_teacher, compare_output_name, corpus_vocab, grad_check_objective, grad_check_task, initial_model,
    load_embeddings, load_grammar, report_paths, rerank_output_name, run_compare, run_eval, run_gen_data, run_generate,
    run_grad_check, run_pretrain_finetune, run_rerank, run_train, Generation, PretrainFinetune, CONFIG_FILE,
    GRAD_CHECK_GRAMMAR, GRAMMAR_FILE, PARAPHRASE_DIR, PROMPTS_FILE, VOCAB_FILE,
};
pub use train::{
    train_model, EpochRecord, RunLog, StopReason, TrainOutcome, TrainSettings, BEST_CHECKPOINT, LAST_CHECKPOINT,
    RUNLOG_FILE,
};

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::decode::DecodeError;
use crate::eval::EvalError;
use crate::model::ModelError;
use crate::objectives::ObjectiveError;
use crate::teacher::{GrammarError, TeacherError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("training diverged in epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64, log: Box<RunLog> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl RunError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
