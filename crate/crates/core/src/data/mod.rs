//! Dialog corpora: vocabulary, tokenization, synthetic generation and the
//! tab-separated file formats.

mod generate;
mod io;
mod vocab;

use std::path::{Path, PathBuf};

pub use generate::{
    generate_corpus, Template, TemplateSet, Topic, BUILTIN_GRAMMAR, MAX_REFERENCES, MAX_SENTENCE_TOKENS,
};
pub use io::{parse_multi_ref, parse_pairs, read_multi_ref, read_pairs, write_multi_ref, write_pairs};
pub use vocab::{build_vocab, detokenize, tokenize, TokenId, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("template `{template}` yields {len} tokens, limit is {limit}")]
    TemplateTooLong { template: String, len: usize, limit: usize },
    #[error("corpus generation: {0}")]
    Generation(String),
    #[error(transparent)]
    Grammar(#[from] crate::teacher::GrammarError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One prompt with its single reference response, as whitespace tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogPair {
    pub id: usize,
    pub prompt: Vec<String>,
    pub response: Vec<String>,
}

/// A test prompt with `k >= 1` references; index 0 is the original.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiRefItem {
    pub id: usize,
    pub prompt: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl MultiRefItem {
    pub fn original(&self) -> &[String] {
        &self.references[0]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MultiRefTestSet {
    pub items: Vec<MultiRefItem>,
}

impl MultiRefTestSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Single-reference view: each prompt paired with its original response.
    pub fn originals(&self) -> Vec<DialogPair> {
        self.items
            .iter()
            .map(|it| DialogPair {
                id: it.id,
                prompt: it.prompt.clone(),
                response: it.original().to_vec(),
            })
            .collect()
    }
}

/// Train/valid/test splits of a dialog corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<DialogPair>,
    pub valid: Vec<DialogPair>,
    pub test: MultiRefTestSet,
}

pub const TRAIN_FILE: &str = "train.tsv";
pub const VALID_FILE: &str = "valid.tsv";
pub const TEST_FILE: &str = "test.tsv";

impl Corpus {
    /// Every sentence in every split, references included.
    pub fn sentences(&self) -> impl Iterator<Item = &[String]> {
        let pairs = self
            .train
            .iter()
            .chain(&self.valid)
            .flat_map(|p| [p.prompt.as_slice(), p.response.as_slice()]);
        let test = self
            .test
            .items
            .iter()
            .flat_map(|it| std::iter::once(it.prompt.as_slice()).chain(it.references.iter().map(Vec::as_slice)));
        pairs.chain(test)
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        write_pairs(&dir.join(TRAIN_FILE), &self.train)?;
        write_pairs(&dir.join(VALID_FILE), &self.valid)?;
        write_multi_ref(&dir.join(TEST_FILE), &self.test)
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        Ok(Self {
            train: read_pairs(&dir.join(TRAIN_FILE))?,
            valid: read_pairs(&dir.join(VALID_FILE))?,
            test: read_multi_ref(&dir.join(TEST_FILE))?,
        })
    }
}
