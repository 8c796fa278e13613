//! Word-overlap, embedding and diversity metrics. Every score is on a 0-100
//! scale.

use std::collections::HashMap;

use rand::Rng;

use crate::data::{Vocabulary, UNK};
use crate::model::CondSeqModel;
use crate::rng::rng_from;

use super::EvalError;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> impl Iterator<Item = Vec<&str>> {
    tokens
        .windows(n.max(1))
        .filter(move |_| n > 0)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
}

fn counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut c = HashMap::new();
    for g in ngrams(tokens, n) {
        *c.entry(g).or_insert(0) += 1;
    }
    c
}

/// Distinct n-grams over total n-grams across all responses, in percent.
pub fn distinct_n<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> f64 {
    let mut types = std::collections::HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r, n) {
            types.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        100.0 * types.len() as f64 / total as f64
    }
}

/// Clipped n-gram matches and hypothesis n-gram count; each hypothesis
/// n-gram is clipped by its largest count in any single reference.
fn clipped_matches<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>], n: usize) -> (usize, usize) {
    let hc = counts(hyp, n);
    let ref_counts: Vec<_> = refs.iter().map(|r| counts(r, n)).collect();
    let mut matched = 0;
    let mut total = 0;
    for (g, c) in hc {
        let max_ref = ref_counts
            .iter()
            .map(|rc| rc.get(&g).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matched += c.min(max_ref);
        total += c;
    }
    (matched, total)
}

/// Reference length closest to `len`, the shorter one on ties.
fn closest_ref_len<S>(len: usize, refs: &[Vec<S>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(len), r))
        .unwrap_or(0)
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

fn geometric_bleu(precisions: &[f64], bp: f64) -> f64 {
    if precisions.iter().any(|&p| p <= 0.0) {
        return 0.0;
    }
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
    100.0 * bp * log_mean.exp()
}

/// Sentence BLEU-1 through BLEU-`max_n` (cumulative, uniform weights).
/// Precisions for `n >= 2` use add-one smoothing, `(m + 1) / (t + 1)`.
pub fn sentence_bleu<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>], max_n: usize) -> Vec<f64> {
    if hyp.is_empty() || refs.is_empty() {
        return vec![0.0; max_n];
    }
    let bp = brevity_penalty(hyp.len(), closest_ref_len(hyp.len(), refs));
    let mut precisions = Vec::with_capacity(max_n);
    let mut out = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (m, t) = clipped_matches(hyp, refs, n);
        let p = if n == 1 {
            m as f64 / t as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        precisions.push(p);
        out.push(geometric_bleu(&precisions, bp));
    }
    out
}

/// Unsmoothed corpus BLEU-1 through BLEU-`max_n`.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>], max_n: usize) -> Result<Vec<f64>, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::Misaligned {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        c += h.len();
        r += closest_ref_len(h.len(), rs);
        for n in 1..=max_n {
            let (m, t) = clipped_matches(h, rs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let bp = brevity_penalty(c, r);
    let mut precisions = Vec::with_capacity(max_n);
    let mut out = Vec::with_capacity(max_n);
    for n in 0..max_n {
        precisions.push(if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        });
        out.push(geometric_bleu(&precisions, bp));
    }
    Ok(out)
}

fn lcs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(hyp, reference) as f64;
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * p * r / (p + r)
    }
}

/// Token vectors for the embedding-based metrics. Unknown tokens share the
/// vector of `<unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    unk: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, vectors: HashMap<String, Vec<f64>>, unk: Vec<f64>) -> Result<Self, EvalError> {
        if unk.len() != dim || vectors.values().any(|v| v.len() != dim) {
            return Err(EvalError::Embedding(format!("every vector must have dimension {dim}")));
        }
        Ok(Self { dim, vectors, unk })
    }

    /// Rows of the model's shared embedding matrix.
    pub fn from_model(model: &CondSeqModel, vocab: &Vocabulary) -> Result<Self, EvalError> {
        model
            .check_vocab(vocab)
            .map_err(|e| EvalError::Embedding(e.to_string()))?;
        let table = model.embeddings();
        let vectors = vocab
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), table.row(i).to_vec()))
            .collect();
        Self::new(table.cols(), vectors, table.row(UNK).to_vec())
    }

    /// Seeded standard-normal-like vectors, one per vocabulary token.
    pub fn random(vocab: &Vocabulary, dim: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[dim as u64]);
        let mut draw = || -> Vec<f64> { (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let vectors: HashMap<String, Vec<f64>> = vocab.tokens().iter().map(|t| (t.clone(), draw())).collect();
        let unk = vectors[vocab.token(UNK)].clone();
        Self { dim, vectors, unk }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, token: &str) -> &[f64] {
        self.vectors.get(token).map(Vec::as_slice).unwrap_or(&self.unk)
    }
}

/// Cosine similarity clipped below at 0; zero vectors give 0.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

fn greedy_direction<S: AsRef<str>>(from: &[S], to: &[S], emb: &EmbeddingTable) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| {
            to.iter()
                .map(|b| cosine(emb.vector(a.as_ref()), emb.vector(b.as_ref())))
                .fold(0.0, f64::max)
        })
        .sum();
    total / from.len() as f64
}

/// Mean over both directions of the average best-match cosine per token.
pub fn greedy_matching<S: AsRef<str>>(hyp: &[S], reference: &[S], emb: &EmbeddingTable) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let a = greedy_direction(reference, hyp, emb);
    let b = greedy_direction(hyp, reference, emb);
    100.0 * (a + b) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingMode {
    Average,
    Extrema,
}

/// Per-dimension value of largest magnitude; the maximum wins only when it
/// exceeds the magnitude of the minimum.
pub fn extrema_vector(vectors: &[&[f64]]) -> Vec<f64> {
    let dim = vectors.first().map_or(0, |v| v.len());
    (0..dim)
        .map(|d| {
            let max = vectors.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
            let min = vectors.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
            if max > min.abs() {
                max
            } else {
                min
            }
        })
        .collect()
}

fn sentence_vector<S: AsRef<str>>(tokens: &[S], emb: &EmbeddingTable, mode: EmbeddingMode) -> Vec<f64> {
    let vecs: Vec<&[f64]> = tokens.iter().map(|t| emb.vector(t.as_ref())).collect();
    match mode {
        EmbeddingMode::Average => {
            let mut sum = vec![0.0; emb.dim()];
            for v in &vecs {
                for (s, x) in sum.iter_mut().zip(v.iter()) {
                    *s += x;
                }
            }
            sum.iter().map(|s| s / vecs.len() as f64).collect()
        }
        EmbeddingMode::Extrema => extrema_vector(&vecs),
    }
}

/// Cosine between sentence vectors (mean or extrema of token vectors).
pub fn embedding_metric<S: AsRef<str>>(hyp: &[S], reference: &[S], emb: &EmbeddingTable, mode: EmbeddingMode) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    100.0 * cosine(&sentence_vector(hyp, emb, mode), &sentence_vector(reference, emb, mode))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefMode {
    Single,
    Multi,
}

impl RefMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RefMode::Single => "single",
            RefMode::Multi => "multi",
        }
    }
}

/// Mean over sentences of the best reference score (`Multi`) or of the
/// first reference's score (`Single`).
pub fn multi_ref_aggregate(per_ref: &[Vec<f64>], mode: RefMode) -> f64 {
    if per_ref.is_empty() {
        return 0.0;
    }
    let per_sentence = per_sentence_aggregate(per_ref, mode);
    per_sentence.iter().sum::<f64>() / per_sentence.len() as f64
}

pub fn per_sentence_aggregate(per_ref: &[Vec<f64>], mode: RefMode) -> Vec<f64> {
    per_ref
        .iter()
        .map(|scores| match mode {
            RefMode::Single => scores[0],
            RefMode::Multi => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn distinct_counts() {
        assert!((distinct_n(&[t("a a b")], 1) - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(distinct_n(&[t("a b c")], 1), 100.0);
        assert_eq!(distinct_n(&[t("a")], 2), 0.0);
    }

    #[test]
    fn bleu_brevity_example() {
        let b = sentence_bleu(&t("the cat"), &[t("the cat sat")], 4);
        assert!((b[0] - 100.0 * (-0.5f64).exp()).abs() < 1e-9);
        let same = sentence_bleu(&t("a b c d e"), &[t("a b c d e")], 4);
        assert!(same.iter().all(|&x| (x - 100.0).abs() < 1e-9));
        assert_eq!(sentence_bleu(&t("x y"), &[t("a b")], 4)[0], 0.0);
        assert_eq!(sentence_bleu(&Vec::<String>::new(), &[t("a b")], 4), vec![0.0; 4]);
    }

    #[test]
    fn rouge_example() {
        assert!((rouge_l(&t("the cat"), &t("the cat sat")) - 80.0).abs() < 1e-9);
        assert_eq!(rouge_l(&t("a b"), &t("a b")), 100.0);
        assert_eq!(rouge_l(&t("a b"), &t("c d")), 0.0);
    }

    #[test]
    fn extrema_example() {
        let a = [1.0, 0.0];
        let b = [0.5, 2.0];
        assert_eq!(extrema_vector(&[&a, &b]), vec![1.0, 2.0]);
        let c = [-3.0, 1.0];
        assert_eq!(extrema_vector(&[&a, &c]), vec![-3.0, 1.0]);
    }

    #[test]
    fn aggregate_modes() {
        let s = vec![vec![10.0, 50.0, 30.0]];
        assert_eq!(multi_ref_aggregate(&s, RefMode::Multi), 50.0);
        assert_eq!(multi_ref_aggregate(&s, RefMode::Single), 10.0);
    }
}
