//! Beam search, n-best lists, top-k sampling and MMI-bidi reranking.
//!
//! No length penalty is applied anywhere: scores are plain sums of token
//! log-probabilities, EOS included.

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng;

use crate::data::{detokenize, tokenize, TokenId, Vocabulary, BOS, EOS};
use crate::model::{CondSeqModel, ModelError};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("{what} must be at least 1")]
    ZeroWidth { what: &'static str },
    #[error("n-best size {n} exceeds beam size {beam}")]
    BeamTooSmall { n: usize, beam: usize },
    #[error("mmi weight {0} outside [0, 1]")]
    Lambda(f64),
    #[error("reverse model vocabulary {reverse:016x} differs from forward {forward:016x}")]
    VocabMismatch { forward: u64, reverse: u64 },
    #[error("n-best line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, ending in EOS.
    pub tokens: Vec<TokenId>,
    /// `log p(y | x)`.
    pub forward_score: f64,
    /// `log p(x | y)` under a reverse model, once reranked.
    pub reverse_score: Option<f64>,
    pub combined_score: Option<f64>,
    /// EOS was appended because the length limit was reached.
    pub forced: bool,
}

impl Hypothesis {
    fn new(tokens: Vec<TokenId>, forward_score: f64, forced: bool) -> Self {
        Self {
            tokens,
            forward_score,
            reverse_score: None,
            combined_score: None,
            forced,
        }
    }

    /// Tokens without the trailing EOS.
    pub fn body(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

fn with_bos(tokens: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(BOS).chain(tokens.iter().copied()).collect()
}

/// Beam search without length normalization.
///
/// At each step every live hypothesis is extended by every token. Candidates
/// are ranked by score, ties going to the earlier hypothesis and then the
/// smaller token id. An EOS candidate ranked within the first `beam` is
/// finished; the best `beam` non-EOS candidates stay live. Search ends once
/// `beam` hypotheses have finished. At the last position permitted by
/// `max_len` (which counts EOS) the remaining live hypotheses are closed with
/// EOS and flagged as forced.
pub fn beam_search(model: &CondSeqModel, x: &[TokenId], beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(DecodeError::ZeroWidth { what: "beam size" });
    }
    if max_len == 0 {
        return Err(DecodeError::ZeroWidth { what: "max length" });
    }
    let max_len = max_len.min(model.config().max_len);
    let mut session = model.session(x)?;
    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let last = step + 1 == max_len;
        let mut candidates: Vec<(f64, usize, TokenId)> = Vec::new();
        for (h, (tokens, score)) in live.iter().enumerate() {
            let lp = session.next_log_probs(&with_bos(tokens))?;
            if last {
                candidates.push((score + lp[EOS], h, EOS));
            } else {
                candidates.extend(lp.iter().enumerate().map(|(v, &l)| (score + l, h, v)));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(beam);
        for (rank, &(score, h, v)) in candidates.iter().enumerate() {
            if v == EOS {
                if rank < beam || last {
                    let mut tokens = live[h].0.clone();
                    tokens.push(EOS);
                    finished.push(Hypothesis::new(tokens, score, last));
                }
            } else if next.len() < beam {
                let mut tokens = live[h].0.clone();
                tokens.push(v);
                next.push((tokens, score));
            }
            if next.len() >= beam && rank + 1 >= beam && !last {
                break;
            }
        }
        if finished.len() >= beam || next.is_empty() {
            break;
        }
        live = next;
    }
    finished.sort_by(|a, b| {
        b.forward_score
            .partial_cmp(&a.forward_score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    finished.truncate(beam);
    Ok(finished)
}

/// The `n` best distinct finished hypotheses from a beam of `beam`. Fewer
/// than `n` are returned when fewer finish.
pub fn nbest(model: &CondSeqModel, x: &[TokenId], n: usize, beam: usize) -> Result<Vec<Hypothesis>> {
    if n == 0 {
        return Err(DecodeError::ZeroWidth { what: "n-best size" });
    }
    if beam < n {
        return Err(DecodeError::BeamTooSmall { n, beam });
    }
    let mut hyps = beam_search(model, x, beam, model.config().max_len)?;
    let mut seen = std::collections::HashSet::new();
    hyps.retain(|h| seen.insert(h.tokens.clone()));
    hyps.truncate(n);
    Ok(hyps)
}

/// Greedy argmax decoding.
pub fn greedy(model: &CondSeqModel, x: &[TokenId], max_len: usize) -> Result<Hypothesis> {
    top_k_sample_decode(model, x, 1, 0, max_len)
}

/// Rescores `hyps` by `(1 - λ) log p(y|x) + λ log p(x|y)` and sorts by the
/// combined score (stable for ties).
pub fn mmi_rerank(
    hyps: &[Hypothesis],
    reverse: &CondSeqModel,
    x: &[TokenId],
    lambda: f64,
    forward_vocab_hash: u64,
) -> Result<Vec<Hypothesis>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DecodeError::Lambda(lambda));
    }
    if reverse.vocab_hash() != forward_vocab_hash {
        return Err(DecodeError::VocabMismatch {
            forward: forward_vocab_hash,
            reverse: reverse.vocab_hash(),
        });
    }
    let mut target = x.to_vec();
    target.push(EOS);
    let mut out = Vec::with_capacity(hyps.len());
    for h in hyps {
        // an empty response is fed to the reverse model as a lone EOS
        let source = if h.body().is_empty() { &h.tokens[..] } else { h.body() };
        let r = reverse.sequence_logprob(source, &target)?;
        let mut scored = h.clone();
        scored.reverse_score = Some(r);
        out.push(scored);
    }
    rescore(&mut out, lambda);
    Ok(out)
}

/// Recomputes combined scores for hypotheses that already carry reverse
/// scores and re-sorts them.
pub fn rescore(hyps: &mut [Hypothesis], lambda: f64) {
    for h in hyps.iter_mut() {
        h.combined_score = h.reverse_score.map(|r| (1.0 - lambda) * h.forward_score + lambda * r);
    }
    hyps.sort_by(|a, b| {
        let (ca, cb) = (
            a.combined_score.unwrap_or(f64::NEG_INFINITY),
            b.combined_score.unwrap_or(f64::NEG_INFINITY),
        );
        cb.partial_cmp(&ca).unwrap_or(Ordering::Equal)
    });
}

/// Samples each token from the renormalized `k` most probable tokens.
/// The forward score is the untruncated model log-probability of the output.
pub fn top_k_sample_decode(
    model: &CondSeqModel,
    x: &[TokenId],
    k: usize,
    seed: u64,
    max_len: usize,
) -> Result<Hypothesis> {
    if k == 0 {
        return Err(DecodeError::ZeroWidth { what: "k" });
    }
    if max_len == 0 {
        return Err(DecodeError::ZeroWidth { what: "max length" });
    }
    let max_len = max_len.min(model.config().max_len);
    let key: Vec<u64> = x.iter().map(|&t| t as u64).collect();
    let mut rng = rng_from(derive_seed(seed, &key), &[x.len() as u64]);
    let mut session = model.session(x)?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    loop {
        let lp = session.next_log_probs(&with_bos(&tokens))?;
        if tokens.len() + 1 == max_len {
            score += lp[EOS];
            tokens.push(EOS);
            return Ok(Hypothesis::new(tokens, score, true));
        }
        let top = top_k(&lp, k);
        let v = if top.len() == 1 {
            top[0].0
        } else {
            let max = top[0].1;
            let weights: Vec<f64> = top.iter().map(|&(_, l)| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = top[top.len() - 1].0;
            for (&(v, _), w) in top.iter().zip(&weights) {
                acc += w;
                if u < acc {
                    pick = v;
                    break;
                }
            }
            pick
        };
        score += lp[v];
        tokens.push(v);
        if v == EOS {
            return Ok(Hypothesis::new(tokens, score, false));
        }
    }
}

/// The `k` highest log-probabilities with their ids, ties to the lower id.
pub fn top_k(lp: &[f64], k: usize) -> Vec<(TokenId, f64)> {
    let mut ids: Vec<TokenId> = (0..lp.len()).collect();
    ids.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    ids.truncate(k);
    ids.into_iter().map(|i| (i, lp[i])).collect()
}

/// N-best lists keyed by prompt id.
pub type NBestList = Vec<(usize, Vec<Hypothesis>)>;

/// One line per hypothesis:
/// `prompt-id<TAB>rank<TAB>forward<TAB>tokens[<TAB>reverse<TAB>combined]`.
pub fn nbest_to_text(list: &NBestList, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (id, hyps) in list {
        for (rank, h) in hyps.iter().enumerate() {
            let words: Vec<&str> = h.body().iter().map(|&t| vocab.token(t)).collect();
            out.push_str(&format!(
                "{id}\t{}\t{}\t{}",
                rank + 1,
                h.forward_score,
                detokenize(&words)
            ));
            if let (Some(r), Some(c)) = (h.reverse_score, h.combined_score) {
                out.push_str(&format!("\t{r}\t{c}"));
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_nbest(text: &str, vocab: &Vocabulary) -> Result<NBestList> {
    let mut list: NBestList = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let bad = |msg: &str| DecodeError::Malformed {
            line: line_no,
            msg: msg.to_string(),
        };
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 && f.len() != 6 {
            return Err(bad("expected 4 or 6 tab-separated fields"));
        }
        let id: usize = f[0].parse().map_err(|_| bad("bad prompt id"))?;
        let forward: f64 = f[2].parse().map_err(|_| bad("bad forward score"))?;
        let mut tokens = vocab.encode(&tokenize(f[3]));
        tokens.push(EOS);
        let mut h = Hypothesis::new(tokens, forward, false);
        if f.len() == 6 {
            h.reverse_score = Some(f[4].parse().map_err(|_| bad("bad reverse score"))?);
            h.combined_score = Some(f[5].parse().map_err(|_| bad("bad combined score"))?);
        }
        match list.last_mut() {
            Some((last, hyps)) if *last == id => hyps.push(h),
            _ => list.push((id, vec![h])),
        }
    }
    Ok(list)
}

pub fn write_nbest(path: &Path, list: &NBestList, vocab: &Vocabulary) -> Result<()> {
    std::fs::write(path, nbest_to_text(list, vocab)).map_err(|source| DecodeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_nbest(path: &Path, vocab: &Vocabulary) -> Result<NBestList> {
    let text = std::fs::read_to_string(path).map_err(|source| DecodeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_nbest(&text, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(seed: u64) -> CondSeqModel {
        let c = ModelConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            d_model: 8,
            heads: 2,
            ffn_dim: 8,
            dropout: 0.0,
            attention_dropout: 0.0,
            relu_dropout: 0.0,
            max_len: 8,
            vocab_size: 6,
            share_embeddings: true,
        };
        CondSeqModel::init_with_hash(c, 7, seed).unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..5 {
            let m = model(seed);
            let x = [4, 5, 4];
            let b = beam_search(&m, &x, 1, 6).unwrap();
            let g = greedy(&m, &x, 6).unwrap();
            assert_eq!(b[0].tokens, g.tokens);
            assert!((b[0].forward_score - g.forward_score).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_match_recomputation_and_are_sorted() {
        let m = model(3);
        let x = [4, 5];
        let hyps = beam_search(&m, &x, 4, 6).unwrap();
        assert!(!hyps.is_empty());
        for w in hyps.windows(2) {
            assert!(w[0].forward_score >= w[1].forward_score);
        }
        for h in &hyps {
            let s = m.sequence_logprob(&x, &h.tokens).unwrap();
            assert!((s - h.forward_score).abs() < 1e-9);
        }
    }

    #[test]
    fn worked_mmi_example() {
        let mut hyps = vec![
            Hypothesis {
                tokens: vec![4, EOS],
                forward_score: -1.0,
                reverse_score: Some(-3.0),
                combined_score: None,
                forced: false,
            },
            Hypothesis {
                tokens: vec![5, EOS],
                forward_score: -2.0,
                reverse_score: Some(-1.0),
                combined_score: None,
                forced: false,
            },
        ];
        rescore(&mut hyps, 0.4);
        assert_eq!(hyps[0].tokens, vec![5, EOS]);
        assert!((hyps[0].combined_score.unwrap() + 1.6).abs() < 1e-12);
        assert!((hyps[1].combined_score.unwrap() + 1.8).abs() < 1e-12);
    }

    #[test]
    fn top_k_one_is_greedy_and_seeded() {
        let m = model(4);
        let x = [5, 4];
        let g = greedy(&m, &x, 7).unwrap();
        assert_eq!(top_k_sample_decode(&m, &x, 1, 99, 7).unwrap(), g);
        let a = top_k_sample_decode(&m, &x, 3, 11, 7).unwrap();
        let b = top_k_sample_decode(&m, &x, 3, 11, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nbest_text_round_trip() {
        let v = Vocabulary::build([vec!["a", "b"]].iter().map(Vec::as_slice));
        let list: NBestList = vec![(
            3,
            vec![
                Hypothesis::new(vec![4, 5, EOS], -0.5, false),
                Hypothesis {
                    tokens: vec![EOS],
                    forward_score: -1.25,
                    reverse_score: Some(-2.0),
                    combined_score: Some(-1.5),
                    forced: false,
                },
            ],
        )];
        let text = nbest_to_text(&list, &v);
        assert_eq!(text, "3\t1\t-0.5\ta b\n3\t2\t-1.25\t\t-2\t-1.5\n");
        assert_eq!(parse_nbest(&text, &v).unwrap(), list);
    }
}
