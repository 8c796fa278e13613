use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::DataError;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

/// Surface forms of the reserved ids `0..4`.
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Closed token ↔ id bijection shared by every model in a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    hash: u64,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit id-ordered token list whose first
    /// four entries are the reserved symbols.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(DataError::Vocabulary("reserved tokens must occupy ids 0-3".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(DataError::Vocabulary(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(DataError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        let hash = content_hash(&tokens);
        Ok(Self { tokens, index, hash })
    }

    /// Collects every token in `sentences`, ordered by descending frequency
    /// and then lexicographically, after the reserved symbols.
    pub fn build<'a, I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for sentence in sentences {
            for tok in sentence {
                let tok = tok.as_ref();
                if !RESERVED.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ordered.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stable content hash; changes iff the id mapping changes.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`] when it is out of vocabulary.
    pub fn id(&self, token: &str) -> TokenId {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, stopping at the first EOS.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let tokens = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_text(&text)
    }
}

fn content_hash(tokens: &[String]) -> u64 {
    let mut hasher = Sha256::new();
    for t in tokens {
        hasher.update(t.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(first)
}

/// Whitespace tokenization of lowercase text.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// Vocabulary over every token in `sentences`.
pub fn build_vocab<'a, I, S>(sentences: I) -> Vocabulary
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    Vocabulary::build(sentences)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentences() -> Vec<Vec<String>> {
        vec![
            tokenize("hello there"),
            tokenize("there you are"),
            tokenize("are you ok"),
        ]
    }

    #[test]
    fn reserved_ids_and_ordering() {
        let s = sentences();
        let v = build_vocab(s.iter().map(Vec::as_slice));
        assert_eq!(&v.tokens()[..4], &RESERVED.map(String::from));
        // "are", "there", "you" appear twice; ties sort lexicographically
        assert_eq!(&v.tokens()[4..7], &["are", "there", "you"]);
        assert_eq!(&v.tokens()[7..], &["hello", "ok"]);
    }

    #[test]
    fn rebuilding_gives_identical_hash() {
        let s = sentences();
        let a = build_vocab(s.iter().map(Vec::as_slice));
        let b = build_vocab(s.iter().map(Vec::as_slice));
        assert_eq!(a.hash(), b.hash());
        let mut extra = s.clone();
        extra.push(tokenize("new"));
        let c = build_vocab(extra.iter().map(Vec::as_slice));
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn closed_vocabulary_and_unknowns() {
        let s = sentences();
        let v = build_vocab(s.iter().map(Vec::as_slice));
        for sent in &s {
            assert!(v.encode(sent).iter().all(|&i| i != UNK));
        }
        assert_eq!(v.encode(&tokenize("zebra")), vec![UNK]);
    }

    #[test]
    fn tokenize_round_trip() {
        let toks = tokenize("hello there");
        assert_eq!(toks, vec!["hello", "there"]);
        assert_eq!(detokenize(&toks), "hello there");
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize::<String>(&[]), "");
    }

    #[test]
    fn text_round_trip_and_validation() {
        let s = sentences();
        let v = build_vocab(s.iter().map(Vec::as_slice));
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        assert!(Vocabulary::from_text("<pad>\n<s>\n</s>\n<unk>\nx\nx\n").is_err());
    }
}
