//! Automatic metrics, multi-reference aggregation and significance testing.

mod bootstrap;
mod metrics;
mod report;

pub use bootstrap::{pairwise_bootstrap, BootstrapResult, Verdict, MIN_ITEMS, MIN_RESAMPLES};
pub use metrics::{
    corpus_bleu, distinct_n, embedding_metric, extrema_vector, greedy_matching, multi_ref_aggregate,
    per_sentence_aggregate, rouge_l, sentence_bleu, EmbeddingMode, EmbeddingTable, RefMode,
};
pub use report::{
    compare_reports, evaluate, Comparison, ComparisonRow, MetricReport, CORPUS_METRICS, EXCLUDED_METRICS,
    SENTENCE_METRICS,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} reference items")]
    Misaligned { hyps: usize, refs: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("item {0} has no references")]
    NoReferences(usize),
    #[error("embedding table: {0}")]
    Embedding(String),
    #[error("bootstrap: {0}")]
    Bootstrap(String),
    #[error("report line {line}: {msg}")]
    Report { line: usize, msg: String },
    #[error("reports not comparable: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Io(String),
}
