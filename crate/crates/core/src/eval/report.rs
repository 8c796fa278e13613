//! Full metric reports and report-against-report comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::bootstrap::{pairwise_bootstrap, BootstrapResult};
use super::metrics::{
    corpus_bleu, distinct_n, embedding_metric, greedy_matching, per_sentence_aggregate, rouge_l, sentence_bleu,
    EmbeddingMode, EmbeddingTable, RefMode,
};
use super::EvalError;

/// Metrics with a per-sentence score vector, in report order.
pub const SENTENCE_METRICS: [&str; 8] = [
    "bleu1",
    "bleu2",
    "bleu3",
    "bleu4",
    "rouge_l",
    "embedding_average",
    "vector_extrema",
    "greedy_matching",
];

/// Corpus-level metrics, in report order.
pub const CORPUS_METRICS: [&str; 7] = [
    "corpus_bleu1",
    "corpus_bleu2",
    "corpus_bleu3",
    "corpus_bleu4",
    "distinct_1",
    "distinct_2",
    "distinct_3",
];

/// Metrics that need external resources and are not computed.
pub const EXCLUDED_METRICS: [&str; 2] = ["meteor", "skipthought"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mode: RefMode,
    /// Largest number of references used for any sentence.
    pub k: usize,
    pub scores: BTreeMap<String, f64>,
    pub per_sentence: BTreeMap<String, Vec<f64>>,
}

impl MetricReport {
    pub fn sentences(&self) -> usize {
        self.per_sentence.values().next().map_or(0, Vec::len)
    }

    pub fn metric_names(&self) -> Vec<&'static str> {
        SENTENCE_METRICS.iter().chain(CORPUS_METRICS.iter()).copied().collect()
    }

    pub fn score(&self, metric: &str) -> Option<f64> {
        self.scores.get(metric).copied()
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "reference mode: {} (k = {}), {} sentences\n\n{:<20} {:>8}\n",
            self.mode.as_str(),
            self.k,
            self.sentences(),
            "metric",
            "score"
        );
        for m in self.metric_names() {
            let _ = writeln!(out, "{:<20} {:>8.2}", m, self.scores[m]);
        }
        let _ = writeln!(out, "\nnot computed: {}", EXCLUDED_METRICS.join(", "));
        out
    }

    /// `key = value` lines: metadata, one line per metric, then one
    /// `sentence.<metric>` line of space-separated per-sentence scores.
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "reference_mode = {}\nk = {}\nsentences = {}\nexcluded = {}\n",
            self.mode.as_str(),
            self.k,
            self.sentences(),
            EXCLUDED_METRICS.join(" ")
        );
        for m in self.metric_names() {
            let _ = writeln!(out, "{m} = {}", self.scores[m]);
        }
        for (m, v) in &self.per_sentence {
            let joined: Vec<String> = v.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "sentence.{m} = {}", joined.join(" "));
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self, EvalError> {
        let bad = |line: usize, msg: String| EvalError::Report { line, msg };
        let mut mode = None;
        let mut k = None;
        let mut scores = BTreeMap::new();
        let mut per_sentence = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (key, value) = raw
                .split_once('=')
                .map(|(a, b)| (a.trim(), b.trim()))
                .ok_or_else(|| bad(line, "expected `key = value`".into()))?;
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| bad(line, format!("`{s}` is not a number")))
            };
            match key {
                "reference_mode" => {
                    mode = Some(match value {
                        "single" => RefMode::Single,
                        "multi" => RefMode::Multi,
                        other => return Err(bad(line, format!("unknown reference mode `{other}`"))),
                    })
                }
                "k" => k = Some(value.parse().map_err(|_| bad(line, format!("bad k `{value}`")))?),
                "sentences" | "excluded" => {}
                _ => {
                    if let Some(m) = key.strip_prefix("sentence.") {
                        if !SENTENCE_METRICS.contains(&m) {
                            return Err(bad(line, format!("unknown metric `{m}`")));
                        }
                        let v = value.split_whitespace().map(num).collect::<Result<Vec<_>, _>>()?;
                        per_sentence.insert(m.to_string(), v);
                    } else if SENTENCE_METRICS.contains(&key) || CORPUS_METRICS.contains(&key) {
                        scores.insert(key.to_string(), num(value)?);
                    } else {
                        return Err(bad(line, format!("unknown key `{key}`")));
                    }
                }
            }
        }
        let report = Self {
            mode: mode.ok_or_else(|| bad(0, "missing reference_mode".into()))?,
            k: k.ok_or_else(|| bad(0, "missing k".into()))?,
            scores,
            per_sentence,
        };
        for m in report.metric_names() {
            if !report.scores.contains_key(m) {
                return Err(bad(0, format!("missing metric `{m}`")));
            }
        }
        for m in SENTENCE_METRICS {
            if report.per_sentence.get(m).map(Vec::len) != Some(report.sentences()) {
                return Err(bad(0, format!("missing or short per-sentence scores for `{m}`")));
            }
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_kv()).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_kv(&text)
    }
}

/// Scores `hyps` against `refs`. `Single` uses only the first reference of
/// each item; `Multi` takes the best reference per sentence and clips corpus
/// BLEU counts against all of them.
pub fn evaluate<S: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<Vec<S>>],
    emb: &EmbeddingTable,
    mode: RefMode,
) -> Result<MetricReport, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::Misaligned {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(EvalError::NoReferences(i));
    }
    let used: Vec<&[Vec<S>]> = refs
        .iter()
        .map(|r| match mode {
            RefMode::Single => &r[..1],
            RefMode::Multi => &r[..],
        })
        .collect();
    let k = used.iter().map(|r| r.len()).max().unwrap_or(1);

    let mut per_ref: BTreeMap<&str, Vec<Vec<f64>>> = SENTENCE_METRICS.iter().map(|&m| (m, Vec::new())).collect();
    for (h, rs) in hyps.iter().zip(&used) {
        let mut rows: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in rs.iter() {
            let bleu = sentence_bleu(h, std::slice::from_ref(r), 4);
            let vals = [
                bleu[0],
                bleu[1],
                bleu[2],
                bleu[3],
                rouge_l(h, r),
                embedding_metric(h, r, emb, EmbeddingMode::Average),
                embedding_metric(h, r, emb, EmbeddingMode::Extrema),
                greedy_matching(h, r, emb),
            ];
            for (m, v) in SENTENCE_METRICS.iter().zip(vals) {
                rows.entry(m).or_default().push(v);
            }
        }
        for (m, v) in rows {
            per_ref.get_mut(m).expect("known metric").push(v);
        }
    }

    let mut scores = BTreeMap::new();
    let mut per_sentence = BTreeMap::new();
    for (m, rows) in per_ref {
        let s = per_sentence_aggregate(&rows, RefMode::Multi);
        scores.insert(m.to_string(), s.iter().sum::<f64>() / s.len() as f64);
        per_sentence.insert(m.to_string(), s);
    }
    let owned_refs: Vec<Vec<Vec<&str>>> = used
        .iter()
        .map(|rs| rs.iter().map(|r| r.iter().map(AsRef::as_ref).collect()).collect())
        .collect();
    let owned_hyps: Vec<Vec<&str>> = hyps.iter().map(|h| h.iter().map(AsRef::as_ref).collect()).collect();
    for (n, v) in corpus_bleu(&owned_hyps, &owned_refs, 4)?.into_iter().enumerate() {
        scores.insert(format!("corpus_bleu{}", n + 1), v);
    }
    for n in 1..=3 {
        scores.insert(format!("distinct_{n}"), distinct_n(hyps, n));
    }
    Ok(MetricReport {
        mode,
        k,
        scores,
        per_sentence,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// Bootstrap outcome; corpus-level metrics have none.
    pub test: Option<BootstrapResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub name_a: String,
    pub name_b: String,
    pub mode: RefMode,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "reference mode: {}\n\n{:<20} {:>10} {:>10}  {}\n",
            self.mode.as_str(),
            "metric",
            self.name_a,
            self.name_b,
            "better"
        );
        for r in &self.rows {
            let verdict = match &r.test {
                Some(t) => match t.verdict {
                    super::Verdict::A => self.name_a.clone(),
                    super::Verdict::B => self.name_b.clone(),
                    super::Verdict::Tie => "tie".to_string(),
                },
                None => "-".to_string(),
            };
            let _ = writeln!(out, "{:<20} {:>10.2} {:>10.2}  {}", r.metric, r.a, r.b, verdict);
        }
        out
    }
}

/// Per-metric winner or tie between two reports over the same test set.
pub fn compare_reports(
    a: &MetricReport,
    b: &MetricReport,
    names: (&str, &str),
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<Comparison, EvalError> {
    if a.sentences() != b.sentences() || a.mode != b.mode {
        return Err(EvalError::Mismatch(format!(
            "reports cover {} {}-reference sentences and {} {}-reference sentences",
            a.sentences(),
            a.mode.as_str(),
            b.sentences(),
            b.mode.as_str()
        )));
    }
    let mut rows = Vec::new();
    for m in a.metric_names() {
        let test = match (a.per_sentence.get(m), b.per_sentence.get(m)) {
            (Some(x), Some(y)) => Some(pairwise_bootstrap(x, y, resamples, alpha, seed)?),
            _ => None,
        };
        rows.push(ComparisonRow {
            metric: m.to_string(),
            a: a.scores[m],
            b: b.scores[m],
            test,
        });
    }
    Ok(Comparison {
        name_a: names.0.to_string(),
        name_b: names.1.to_string(),
        mode: a.mode,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, Vocabulary};

    fn corpus() -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
        let hyps: Vec<Vec<String>> = (0..12).map(|i| tokenize(&format!("w{} x y", i % 4))).collect();
        let refs = (0..12)
            .map(|i| {
                vec![
                    tokenize(&format!("w{} x z", i % 3)),
                    tokenize(&format!("w{} x y", i % 4)),
                ]
            })
            .collect();
        (hyps, refs)
    }

    fn table() -> EmbeddingTable {
        let toks = tokenize("w0 w1 w2 w3 x y z");
        EmbeddingTable::random(&Vocabulary::build([toks.as_slice()]), 8, 5)
    }

    #[test]
    fn kv_round_trip_and_keys() {
        let (h, r) = corpus();
        let rep = evaluate(&h, &r, &table(), RefMode::Multi).unwrap();
        assert_eq!(rep.scores.len(), SENTENCE_METRICS.len() + CORPUS_METRICS.len());
        assert_eq!(MetricReport::from_kv(&rep.to_kv()).unwrap(), rep);
        assert!(rep.to_table().contains("meteor"));
    }

    #[test]
    fn multi_dominates_single() {
        let (h, r) = corpus();
        let single = evaluate(&h, &r, &table(), RefMode::Single).unwrap();
        let multi = evaluate(&h, &r, &table(), RefMode::Multi).unwrap();
        for m in SENTENCE_METRICS {
            assert!(multi.scores[m] >= single.scores[m], "{m}");
        }
        assert_eq!(multi.scores["rouge_l"], 100.0);
    }

    #[test]
    fn self_comparison_ties() {
        let (h, r) = corpus();
        let rep = evaluate(&h, &r, &table(), RefMode::Multi).unwrap();
        let cmp = compare_reports(&rep, &rep, ("a", "b"), 1000, 0.05, 1).unwrap();
        assert_eq!(cmp.rows.len(), 15);
        assert!(cmp
            .rows
            .iter()
            .filter_map(|r| r.test)
            .all(|t| t.verdict == super::super::Verdict::Tie));
    }

    #[test]
    fn misaligned_inputs_fail() {
        let (h, r) = corpus();
        assert!(matches!(
            evaluate(&h[..3], &r, &table(), RefMode::Single),
            Err(EvalError::Misaligned { hyps: 3, refs: 12 })
        ));
    }
}
