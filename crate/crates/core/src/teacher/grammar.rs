//! Rule-based paraphrase space used as an exact stand-in for a neural
//! paraphraser.
//!
//! A grammar file has four optional sections:
//!
//! ```text
//! # synonym classes, one per line
//! [synonyms]
//! good great
//! # optional sentence-initial phrases; a sentence carries at most one
//! [prefixes]
//! oh
//! well then
//! # reorder rules; `$n` binds one token, `<=>` applies both ways
//! [reorder]
//! i like $1 <=> $1 is what i like
//! [limits]
//! closure = 8
//! max_tokens = 63
//! ```
//!
//! The paraphrase set of a sentence is the closure of the sentence under
//! single synonym swaps, prefix insertion/removal/replacement and reorder
//! rewrites, explored breadth-first and capped at `closure` members.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum GrammarError {
    #[error("grammar line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("grammar: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Item {
    Word(String),
    Slot(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReorderRule {
    lhs: Vec<Item>,
    rhs: Vec<Item>,
    bidirectional: bool,
}

impl ReorderRule {
    fn parse(line: usize, text: &str) -> Result<Self, GrammarError> {
        let (lhs, rhs, bidirectional) = if let Some((l, r)) = text.split_once("<=>") {
            (l, r, true)
        } else if let Some((l, r)) = text.split_once("=>") {
            (l, r, false)
        } else {
            return Err(GrammarError::Parse {
                line,
                msg: "reorder rule needs `=>` or `<=>`".into(),
            });
        };
        let parse_side = |side: &str| -> Result<Vec<Item>, GrammarError> {
            let items: Vec<Item> = side
                .split_whitespace()
                .map(|t| match t.strip_prefix('$') {
                    Some(n) => n.parse::<usize>().map(Item::Slot).map_err(|_| GrammarError::Parse {
                        line,
                        msg: format!("bad slot `{t}`"),
                    }),
                    None => Ok(Item::Word(t.to_string())),
                })
                .collect::<Result<_, _>>()?;
            if items.is_empty() {
                return Err(GrammarError::Parse {
                    line,
                    msg: "empty rule side".into(),
                });
            }
            Ok(items)
        };
        let rule = Self {
            lhs: parse_side(lhs)?,
            rhs: parse_side(rhs)?,
            bidirectional,
        };
        let slots = |items: &[Item]| -> HashSet<usize> {
            items
                .iter()
                .filter_map(|i| match i {
                    Item::Slot(n) => Some(*n),
                    Item::Word(_) => None,
                })
                .collect()
        };
        let (l, r) = (slots(&rule.lhs), slots(&rule.rhs));
        let unbound_rhs = !r.is_subset(&l);
        let unbound_lhs = bidirectional && !l.is_subset(&r);
        if unbound_rhs || unbound_lhs {
            return Err(GrammarError::Parse {
                line,
                msg: "every slot on the output side must be bound on the input side".into(),
            });
        }
        Ok(rule)
    }

    fn side_text(items: &[Item]) -> String {
        items
            .iter()
            .map(|i| match i {
                Item::Word(w) => w.clone(),
                Item::Slot(n) => format!("${n}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Rewrites every match of `from` in `sentence` into `to`, one match at a
    /// time.
    fn rewrites(from: &[Item], to: &[Item], sentence: &[String], out: &mut Vec<Vec<String>>) {
        if from.len() > sentence.len() {
            return;
        }
        'start: for start in 0..=sentence.len() - from.len() {
            let mut bound: HashMap<usize, &String> = HashMap::new();
            for (item, tok) in from.iter().zip(&sentence[start..]) {
                match item {
                    Item::Word(w) if w != tok => continue 'start,
                    Item::Word(_) => {}
                    Item::Slot(n) => {
                        if let Some(prev) = bound.insert(*n, tok) {
                            if prev != tok {
                                continue 'start;
                            }
                        }
                    }
                }
            }
            let mut rewritten = sentence[..start].to_vec();
            for item in to {
                match item {
                    Item::Word(w) => rewritten.push(w.clone()),
                    Item::Slot(n) => rewritten.push(bound[n].clone()),
                }
            }
            rewritten.extend_from_slice(&sentence[start + from.len()..]);
            out.push(rewritten);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParaphraseGrammar {
    synonyms: Vec<Vec<String>>,
    synonym_of: HashMap<String, usize>,
    prefixes: Vec<Vec<String>>,
    rules: Vec<ReorderRule>,
    closure_bound: usize,
    max_tokens: usize,
}

impl Default for ParaphraseGrammar {
    fn default() -> Self {
        Self {
            synonyms: Vec::new(),
            synonym_of: HashMap::new(),
            prefixes: Vec::new(),
            rules: Vec::new(),
            closure_bound: 8,
            max_tokens: 63,
        }
    }
}

impl ParaphraseGrammar {
    pub fn parse(text: &str) -> Result<Self, GrammarError> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Synonyms,
            Prefixes,
            Reorder,
            Limits,
        }
        let mut g = Self::default();
        let mut section = Section::None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim_end_matches('\r').trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            if let Some(name) = l.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = match name.trim() {
                    "synonyms" => Section::Synonyms,
                    "prefixes" => Section::Prefixes,
                    "reorder" => Section::Reorder,
                    "limits" => Section::Limits,
                    other => {
                        return Err(GrammarError::Parse {
                            line,
                            msg: format!("unknown section `{other}`"),
                        })
                    }
                };
                continue;
            }
            match section {
                Section::None => {
                    return Err(GrammarError::Parse {
                        line,
                        msg: "content before any section header".into(),
                    })
                }
                Section::Synonyms => {
                    let class: Vec<String> = l.split_whitespace().map(str::to_string).collect();
                    g.add_synonyms(class).map_err(|e| GrammarError::Parse {
                        line,
                        msg: e.to_string(),
                    })?;
                }
                Section::Prefixes => g.prefixes.push(l.split_whitespace().map(str::to_string).collect()),
                Section::Reorder => g.rules.push(ReorderRule::parse(line, l)?),
                Section::Limits => {
                    let (k, v) = l.split_once('=').ok_or_else(|| GrammarError::Parse {
                        line,
                        msg: "expected `key = value`".into(),
                    })?;
                    let value: usize = v.trim().parse().map_err(|_| GrammarError::Parse {
                        line,
                        msg: format!("bad number `{}`", v.trim()),
                    })?;
                    match k.trim() {
                        "closure" => g.closure_bound = value,
                        "max_tokens" => g.max_tokens = value,
                        other => {
                            return Err(GrammarError::Parse {
                                line,
                                msg: format!("unknown limit `{other}`"),
                            })
                        }
                    }
                }
            }
        }
        if g.closure_bound == 0 {
            return Err(GrammarError::Invalid("closure bound must be at least 1".into()));
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self, GrammarError> {
        let text = std::fs::read_to_string(path).map_err(|source| GrammarError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), GrammarError> {
        std::fs::write(path, self.to_text()).map_err(|source| GrammarError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("[synonyms]\n");
        for class in &self.synonyms {
            let _ = writeln!(out, "{}", class.join(" "));
        }
        out.push_str("[prefixes]\n");
        for p in &self.prefixes {
            let _ = writeln!(out, "{}", p.join(" "));
        }
        out.push_str("[reorder]\n");
        for r in &self.rules {
            let arrow = if r.bidirectional { "<=>" } else { "=>" };
            let _ = writeln!(
                out,
                "{} {arrow} {}",
                ReorderRule::side_text(&r.lhs),
                ReorderRule::side_text(&r.rhs)
            );
        }
        let _ = write!(
            out,
            "[limits]\nclosure = {}\nmax_tokens = {}\n",
            self.closure_bound, self.max_tokens
        );
        out
    }

    pub fn add_synonyms(&mut self, class: Vec<String>) -> Result<(), GrammarError> {
        if class.len() < 2 {
            return Err(GrammarError::Invalid(
                "a synonym class needs at least two tokens".into(),
            ));
        }
        for t in &class {
            if self.synonym_of.contains_key(t) || class.iter().filter(|u| *u == t).count() > 1 {
                return Err(GrammarError::Invalid(format!(
                    "token `{t}` is in more than one synonym class"
                )));
            }
        }
        let idx = self.synonyms.len();
        for t in &class {
            self.synonym_of.insert(t.clone(), idx);
        }
        self.synonyms.push(class);
        Ok(())
    }

    pub fn closure_bound(&self) -> usize {
        self.closure_bound
    }

    pub fn with_closure_bound(mut self, bound: usize) -> Self {
        self.closure_bound = bound.max(1);
        self
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    /// Every surface token the grammar can introduce.
    pub fn tokens(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let words = self
            .synonyms
            .iter()
            .flatten()
            .chain(self.prefixes.iter().flatten())
            .chain(self.rules.iter().flat_map(|r| {
                r.lhs.iter().chain(&r.rhs).filter_map(|i| match i {
                    Item::Word(w) => Some(w),
                    Item::Slot(_) => None,
                })
            }));
        for w in words {
            if seen.insert(w.clone()) {
                out.push(w.clone());
            }
        }
        out
    }

    fn leading_prefix(&self, sentence: &[String]) -> Option<usize> {
        self.prefixes
            .iter()
            .enumerate()
            .filter(|(_, p)| p.len() < sentence.len() && sentence.starts_with(p))
            .max_by_key(|(_, p)| p.len())
            .map(|(i, _)| i)
    }

    /// Sentences reachable from `sentence` with one edit, in a fixed order.
    pub fn neighbors(&self, sentence: &[String]) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for (pos, tok) in sentence.iter().enumerate() {
            if let Some(&class) = self.synonym_of.get(tok) {
                for alt in &self.synonyms[class] {
                    if alt != tok {
                        let mut s = sentence.to_vec();
                        s[pos] = alt.clone();
                        out.push(s);
                    }
                }
            }
        }
        match self.leading_prefix(sentence) {
            Some(current) => {
                let rest = &sentence[self.prefixes[current].len()..];
                out.push(rest.to_vec());
                for (i, p) in self.prefixes.iter().enumerate() {
                    if i != current {
                        out.push(p.iter().chain(rest).cloned().collect());
                    }
                }
            }
            None => {
                for p in &self.prefixes {
                    out.push(p.iter().chain(sentence).cloned().collect());
                }
            }
        }
        for rule in &self.rules {
            ReorderRule::rewrites(&rule.lhs, &rule.rhs, sentence, &mut out);
            if rule.bidirectional {
                ReorderRule::rewrites(&rule.rhs, &rule.lhs, sentence, &mut out);
            }
        }
        out.retain(|s| !s.is_empty() && s.len() <= self.max_tokens);
        out
    }

    /// Breadth-first closure of `sentence`, original first, at most
    /// `closure_bound` members.
    pub fn paraphrases(&self, sentence: &[String]) -> Vec<Vec<String>> {
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        let mut order = vec![sentence.to_vec()];
        seen.insert(sentence.to_vec());
        let mut queue = VecDeque::from([sentence.to_vec()]);
        while let Some(s) = queue.pop_front() {
            if order.len() >= self.closure_bound {
                break;
            }
            for n in self.neighbors(&s) {
                if order.len() >= self.closure_bound {
                    break;
                }
                if seen.insert(n.clone()) {
                    order.push(n.clone());
                    queue.push_back(n);
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    const TEXT: &str = "\
# test grammar
[synonyms]
good great
[prefixes]
oh
well then
[reorder]
i like $1 <=> $1 is what i like
[limits]
closure = 50
";

    #[test]
    fn parse_and_round_trip() {
        let g = ParaphraseGrammar::parse(TEXT).unwrap();
        assert_eq!(g.closure_bound(), 50);
        let again = ParaphraseGrammar::parse(&g.to_text()).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ParaphraseGrammar::parse("[synonyms]\na b\n[nope]\n").unwrap_err();
        assert!(matches!(err, GrammarError::Parse { line: 3, .. }));
        let err = ParaphraseGrammar::parse("[reorder]\na $1 => $2 a\n").unwrap_err();
        assert!(matches!(err, GrammarError::Parse { line: 2, .. }));
        let err = ParaphraseGrammar::parse("[synonyms]\na b\nb c\n").unwrap_err();
        assert!(matches!(err, GrammarError::Parse { line: 3, .. }));
    }

    #[test]
    fn closure_contains_original_and_all_edits() {
        let g = ParaphraseGrammar::parse(TEXT).unwrap();
        let s = tokenize("i like good food");
        let set = g.paraphrases(&s);
        assert_eq!(set[0], s);
        let as_text: HashSet<String> = set.iter().map(|p| p.join(" ")).collect();
        for expected in [
            "i like great food",
            "oh i like good food",
            "well then i like great food",
            "good is what i like food",
        ] {
            assert!(as_text.contains(expected), "missing {expected}");
        }
        // prefixes never stack
        assert!(!as_text
            .iter()
            .any(|t| t.starts_with("oh well") || t.starts_with("well then oh")));
    }

    #[test]
    fn closure_is_symmetric_for_bidirectional_grammars() {
        let g = ParaphraseGrammar::parse(TEXT).unwrap();
        let s = tokenize("i like good food");
        let set = g.paraphrases(&s);
        for p in &set {
            assert!(g.paraphrases(p).contains(&s));
        }
    }

    #[test]
    fn closure_bound_caps_the_set() {
        let g = ParaphraseGrammar::parse(TEXT).unwrap().with_closure_bound(3);
        assert_eq!(g.paraphrases(&tokenize("i like good food")).len(), 3);
        assert_eq!(g.paraphrases(&tokenize("nothing applies")).len(), 3);
        let plain = ParaphraseGrammar::default();
        assert_eq!(plain.paraphrases(&tokenize("nothing applies")).len(), 1);
    }
}
