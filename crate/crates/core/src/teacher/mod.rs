//! Paraphraser teachers `q(y'_i | y, y'_<i)`, top-N truncation and
//! per-epoch path sampling.

mod grammar;

pub use grammar::{GrammarError, ParaphraseGrammar, ReorderRule};

use rand::Rng;

use crate::data::{DialogPair, TokenId, Vocabulary, BOS, EOS, UNK};
use crate::model::{CondSeqModel, ModelError, Session};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, thiserror::Error)]
pub enum TeacherError {
    #[error("prefix {prefix:?} extends no paraphrase of the reference")]
    InconsistentPrefix { prefix: Vec<TokenId> },
    #[error("paraphrase token `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("top-N truncation needs N >= 1")]
    ZeroTopN,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TeacherError>;

/// Next-token distribution of the teacher after `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStepDist {
    /// Tokens already emitted, without BOS.
    pub prefix: Vec<TokenId>,
    pub probs: Vec<f64>,
    /// Ids with nonzero mass, ascending.
    pub support: Vec<TokenId>,
}

impl TeacherStepDist {
    pub fn from_probs(prefix: Vec<TokenId>, probs: Vec<f64>) -> Self {
        let support = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
        Self { prefix, probs, support }
    }

    pub fn one_hot(prefix: Vec<TokenId>, vocab_size: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; vocab_size];
        probs[token] = 1.0;
        Self {
            prefix,
            probs,
            support: vec![token],
        }
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .support
            .iter()
            .map(|&i| self.probs[i])
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Id of the most probable token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Exact next-token distribution given an explicit paraphrase set.
///
/// `probs[v]` is the fraction of set members extending `prefix` whose next
/// token is `v`; members equal to `prefix` contribute to EOS.
pub fn step_dist_from_set(set: &[Vec<TokenId>], prefix: &[TokenId], vocab_size: usize) -> Result<TeacherStepDist> {
    let mut counts = vec![0usize; vocab_size];
    let mut total = 0usize;
    for member in set {
        if member.len() >= prefix.len() && member.starts_with(prefix) {
            let next = member.get(prefix.len()).copied().unwrap_or(EOS);
            counts[next] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(TeacherError::InconsistentPrefix {
            prefix: prefix.to_vec(),
        });
    }
    let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(TeacherStepDist::from_probs(prefix.to_vec(), probs))
}

/// Paraphrase set of `y` as token ids, original first.
pub fn paraphrase_ids(grammar: &ParaphraseGrammar, vocab: &Vocabulary, y: &[TokenId]) -> Result<Vec<Vec<TokenId>>> {
    let words: Vec<String> = y.iter().map(|&i| vocab.token(i).to_string()).collect();
    grammar
        .paraphrases(&words)
        .into_iter()
        .map(|p| {
            p.iter()
                .map(|t| vocab.get(t).ok_or_else(|| TeacherError::OutOfVocabulary(t.clone())))
                .collect()
        })
        .collect()
}

/// Oracle distribution: uniform over the grammar paraphrase set of `y`.
/// `y` and `prefix` carry neither BOS nor EOS.
pub fn oracle_step_dist(
    grammar: &ParaphraseGrammar,
    vocab: &Vocabulary,
    y: &[TokenId],
    prefix: &[TokenId],
) -> Result<TeacherStepDist> {
    let set = paraphrase_ids(grammar, vocab, y)?;
    step_dist_from_set(&set, prefix, vocab.len())
}

/// Keeps the `n` most probable tokens (lower id first on ties) and
/// renormalizes. Distributions with at most `n` supported tokens are
/// returned unchanged.
pub fn truncate_top_n(dist: &TeacherStepDist, n: usize) -> Result<TeacherStepDist> {
    if n == 0 {
        return Err(TeacherError::ZeroTopN);
    }
    if dist.support.len() <= n {
        return Ok(dist.clone());
    }
    let mut ranked = dist.support.clone();
    ranked.sort_by(|&a, &b| dist.probs[b].total_cmp(&dist.probs[a]).then(a.cmp(&b)));
    ranked.truncate(n);
    ranked.sort_unstable();
    let mass: f64 = ranked.iter().map(|&i| dist.probs[i]).sum();
    let mut probs = vec![0.0; dist.probs.len()];
    for &i in &ranked {
        probs[i] = dist.probs[i] / mass;
    }
    Ok(TeacherStepDist {
        prefix: dist.prefix.clone(),
        probs,
        support: ranked,
    })
}

/// Per-reference view of a teacher, created once per sampled path.
pub trait TeacherSession {
    fn step(&mut self, prefix: &[TokenId]) -> Result<TeacherStepDist>;
}

/// A source of teacher distributions over a fixed vocabulary.
pub trait Teacher {
    fn vocab_size(&self) -> usize;
    fn vocab_hash(&self) -> u64;
    /// Prepares to answer step queries about reference `y` (no BOS/EOS).
    fn session<'a>(&'a self, y: &[TokenId]) -> Result<Box<dyn TeacherSession + 'a>>;
}

/// Grammar-exact teacher.
#[derive(Clone, Debug)]
pub struct OracleTeacher {
    grammar: ParaphraseGrammar,
    vocab: Vocabulary,
}

impl OracleTeacher {
    pub fn new(grammar: ParaphraseGrammar, vocab: Vocabulary) -> Self {
        Self { grammar, vocab }
    }

    pub fn grammar(&self) -> &ParaphraseGrammar {
        &self.grammar
    }
}

struct SetSession {
    set: Vec<Vec<TokenId>>,
    vocab_size: usize,
}

impl TeacherSession for SetSession {
    fn step(&mut self, prefix: &[TokenId]) -> Result<TeacherStepDist> {
        step_dist_from_set(&self.set, prefix, self.vocab_size)
    }
}

impl Teacher for OracleTeacher {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn vocab_hash(&self) -> u64 {
        self.vocab.hash()
    }

    fn session<'a>(&'a self, y: &[TokenId]) -> Result<Box<dyn TeacherSession + 'a>> {
        Ok(Box::new(SetSession {
            set: paraphrase_ids(&self.grammar, &self.vocab, y)?,
            vocab_size: self.vocab.len(),
        }))
    }
}

/// Teacher that places all mass on the reference itself.
#[derive(Clone, Debug)]
pub struct ReferenceTeacher {
    vocab_size: usize,
    vocab_hash: u64,
}

impl ReferenceTeacher {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self {
            vocab_size: vocab.len(),
            vocab_hash: vocab.hash(),
        }
    }
}

impl Teacher for ReferenceTeacher {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    fn session<'a>(&'a self, y: &[TokenId]) -> Result<Box<dyn TeacherSession + 'a>> {
        Ok(Box::new(SetSession {
            set: vec![y.to_vec()],
            vocab_size: self.vocab_size,
        }))
    }
}

/// Teacher backed by a sequence model trained to map a sentence to its
/// paraphrases.
#[derive(Clone, Debug)]
pub struct LearnedTeacher {
    model: CondSeqModel,
}

impl LearnedTeacher {
    /// Fails unless `model` was built for the student's vocabulary.
    pub fn new(model: CondSeqModel, student_vocab: &Vocabulary) -> Result<Self> {
        model.check_vocab(student_vocab)?;
        Ok(Self { model })
    }

    pub fn model(&self) -> &CondSeqModel {
        &self.model
    }
}

struct ModelSession<'a> {
    session: Session<'a>,
}

impl TeacherSession for ModelSession<'_> {
    fn step(&mut self, prefix: &[TokenId]) -> Result<TeacherStepDist> {
        let mut full = Vec::with_capacity(prefix.len() + 1);
        full.push(BOS);
        full.extend_from_slice(prefix);
        let mut probs = self.session.next_log_probs(&full)?;
        for p in &mut probs {
            *p = p.exp();
        }
        Ok(TeacherStepDist::from_probs(prefix.to_vec(), probs))
    }
}

impl Teacher for LearnedTeacher {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn vocab_hash(&self) -> u64 {
        self.model.vocab_hash()
    }

    fn session<'a>(&'a self, y: &[TokenId]) -> Result<Box<dyn TeacherSession + 'a>> {
        Ok(Box::new(ModelSession {
            session: self.model.session(y)?,
        }))
    }
}

/// Learned step distribution at one prefix.
pub fn learned_step_dist(teacher: &LearnedTeacher, y: &[TokenId], prefix: &[TokenId]) -> Result<TeacherStepDist> {
    teacher.session(y)?.step(prefix)
}

/// (sentence, paraphrase) training pairs for a learned teacher: every
/// ordered pair within each sentence's paraphrase set.
pub fn paraphrase_training_pairs(grammar: &ParaphraseGrammar, sentences: &[Vec<String>]) -> Vec<DialogPair> {
    let mut out = Vec::new();
    for s in sentences {
        let set = grammar.paraphrases(s);
        for target in &set {
            out.push(DialogPair {
                id: out.len(),
                prompt: s.clone(),
                response: target.clone(),
            });
        }
    }
    out
}

/// One sampled paraphrase together with the truncated teacher distributions
/// that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPath {
    /// Sampled tokens, ending in EOS.
    pub tokens: Vec<TokenId>,
    /// `dists[i]` is the distribution `tokens[i]` was drawn from.
    pub dists: Vec<TeacherStepDist>,
    pub epoch: u64,
    pub seed: u64,
    /// Set when the length limit was hit and EOS was appended.
    pub forced: bool,
}

impl SampledPath {
    pub fn mean_entropy(&self) -> f64 {
        self.dists.iter().map(TeacherStepDist::entropy).sum::<f64>() / self.dists.len() as f64
    }
}

fn sequence_key(y: &[TokenId]) -> u64 {
    let parts: Vec<u64> = y.iter().map(|&t| t as u64).collect();
    derive_seed(y.len() as u64, &parts)
}

/// Draws a paraphrase of `y` token by token from the top-`n` truncated
/// teacher. The draw depends only on `(seed, epoch, y)`.
///
/// At most `max_len` tokens are produced, EOS included. A path that reaches
/// the limit ends with a forced EOS whose distribution is one-hot.
pub fn sample_path(
    teacher: &dyn Teacher,
    y: &[TokenId],
    n: usize,
    seed: u64,
    epoch: u64,
    max_len: usize,
) -> Result<SampledPath> {
    if n == 0 {
        return Err(TeacherError::ZeroTopN);
    }
    let mut rng = rng_from(seed, &[epoch, sequence_key(y)]);
    let mut session = teacher.session(y)?;
    let mut tokens = Vec::new();
    let mut dists = Vec::new();
    let mut forced = false;
    loop {
        let dist = truncate_top_n(&session.step(&tokens)?, n)?;
        let mut tok = draw(&dist, rng.gen::<f64>());
        if tok != EOS && tokens.len() + 1 >= max_len {
            forced = true;
            tok = EOS;
            dists.push(TeacherStepDist::one_hot(tokens.clone(), teacher.vocab_size(), EOS));
        } else {
            dists.push(dist);
        }
        tokens.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(SampledPath {
        tokens,
        dists,
        epoch,
        seed,
        forced,
    })
}

/// Inverse-CDF draw over the support in ascending id order.
fn draw(dist: &TeacherStepDist, u: f64) -> TokenId {
    let mut acc = 0.0;
    for &i in &dist.support {
        acc += dist.probs[i];
        if u < acc {
            return i;
        }
    }
    dist.support.last().copied().unwrap_or(UNK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(probs: &[f64]) -> TeacherStepDist {
        TeacherStepDist::from_probs(vec![], probs.to_vec())
    }

    #[test]
    fn two_member_set_splits_mass() {
        // ids: a=4 b=5 c=6
        let set = vec![vec![4, 5], vec![4, 6]];
        let d = step_dist_from_set(&set, &[4], 8).unwrap();
        assert_eq!(d.probs[5], 0.5);
        assert_eq!(d.probs[6], 0.5);
        let end = step_dist_from_set(&set, &[4, 5], 8).unwrap();
        assert_eq!(end.support, vec![EOS]);
        assert!(step_dist_from_set(&set, &[5], 8).is_err());
    }

    #[test]
    fn truncation_renormalizes() {
        let d = dist(&[0.0, 0.0, 0.0, 0.0, 0.5, 0.3, 0.2]);
        let t = truncate_top_n(&d, 2).unwrap();
        assert_eq!(t.support, vec![4, 5]);
        assert!((t.probs[4] - 0.625).abs() < 1e-15);
        assert!((t.probs[5] - 0.375).abs() < 1e-15);
        assert_eq!(truncate_top_n(&d, 7).unwrap(), d);
        assert_eq!(truncate_top_n(&t, 2).unwrap(), t);
        assert!(truncate_top_n(&d, 0).is_err());
    }

    #[test]
    fn truncation_ties_keep_lower_id() {
        let d = dist(&[0.0, 0.0, 0.0, 0.0, 0.4, 0.3, 0.3]);
        let t = truncate_top_n(&d, 2).unwrap();
        assert_eq!(t.support, vec![4, 5]);
        assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reference_teacher_reproduces_reference() {
        let v = Vocabulary::build([vec!["a", "b", "c"]].iter().map(Vec::as_slice));
        let t = ReferenceTeacher::new(&v);
        let y = v.encode(&["c", "a", "b"]);
        let p = sample_path(&t, &y, 100, 1, 0, 64).unwrap();
        assert_eq!(&p.tokens[..3], &y[..]);
        assert_eq!(p.tokens[3], EOS);
        assert_eq!(p.mean_entropy(), 0.0);
    }

    #[test]
    fn forced_termination_is_flagged() {
        let v = Vocabulary::build([vec!["a", "b", "c"]].iter().map(Vec::as_slice));
        let t = ReferenceTeacher::new(&v);
        let y = v.encode(&["a", "b", "c"]);
        let p = sample_path(&t, &y, 100, 1, 0, 3).unwrap();
        assert!(p.forced);
        assert_eq!(p.tokens.len(), 3);
        assert_eq!(*p.tokens.last().unwrap(), EOS);
        let ok = sample_path(&t, &y, 100, 1, 0, 4).unwrap();
        assert!(!ok.forced);
    }
}
