//! Synthetic micro-dialog corpus with known paraphrase structure.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;

use super::{tokenize, Corpus, DataError, DialogPair, MultiRefItem, MultiRefTestSet};
use crate::rng::rng_from;
use crate::teacher::ParaphraseGrammar;

/// Longest sentence the generator may emit; one position is left for EOS.
pub const MAX_SENTENCE_TOKENS: usize = 63;

/// Most references kept per test prompt.
pub const MAX_REFERENCES: usize = 8;

/// Paraphrase grammar matching the built-in templates. Every response has a
/// paraphrase set of 2 to 8 sentences, all of the same length.
pub const BUILTIN_GRAMMAR: &str = "\
[synonyms]
yes yeah sure okay
really truly
great nice
think guess
love adore
fine alright
[limits]
closure = 8
";

/// A prompt/response pattern. `{name}` refers to a filler list of the topic;
/// the same filler is substituted on both sides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub prompt: String,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topic {
    pub name: String,
    pub fillers: BTreeMap<String, Vec<String>>,
    pub templates: Vec<Template>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    pub topics: Vec<Topic>,
}

const WHEN: &[&str] = &[
    "monday",
    "tuesday",
    "wednesday",
    "thursday",
    "friday",
    "saturday",
    "sunday",
    "tonight",
    "tomorrow",
    "today",
    "later",
    "soon",
];

impl TemplateSet {
    /// Six topics, three templates each, 144 fillings per template.
    pub fn builtin() -> Self {
        let topic = |name: &str, what: &[&str], templates: &[(&str, &str)]| Topic {
            name: name.to_string(),
            fillers: BTreeMap::from([
                ("a".to_string(), what.iter().map(|s| s.to_string()).collect()),
                ("b".to_string(), WHEN.iter().map(|s| s.to_string()).collect()),
            ]),
            templates: templates
                .iter()
                .map(|(p, r)| Template {
                    prompt: p.to_string(),
                    response: r.to_string(),
                })
                .collect(),
        };
        Self {
            topics: vec![
                topic(
                    "food",
                    &[
                        "pizza", "pasta", "soup", "salad", "rice", "curry", "noodles", "bread", "tacos", "sushi",
                        "steak", "cake",
                    ],
                    &[
                        ("do you want {a} {b}", "yes i really want {a} {b}"),
                        ("shall we cook {a} {b}", "yes {a} {b} sounds great"),
                        ("is {a} okay for {b}", "i think {a} is alright for {b}"),
                    ],
                ),
                topic(
                    "weather",
                    &[
                        "paris", "london", "tokyo", "rome", "berlin", "madrid", "oslo", "cairo", "lima", "seoul",
                        "dublin", "vienna",
                    ],
                    &[
                        ("will it rain in {a} {b}", "yes i think it will rain in {a} {b}"),
                        ("is it sunny in {a} {b}", "yes it is really sunny in {a} {b}"),
                        ("how cold is {a} {b}", "it is truly cold in {a} {b}"),
                    ],
                ),
                topic(
                    "travel",
                    &[
                        "train", "bus", "plane", "car", "bike", "boat", "ferry", "taxi", "tram", "subway", "scooter",
                        "coach",
                    ],
                    &[
                        ("can we take the {a} {b}", "sure we can take the {a} {b}"),
                        ("do you like riding the {a} {b}", "yes i love riding the {a} {b}"),
                        ("is the {a} late {b}", "okay the {a} is late {b}"),
                    ],
                ),
                topic(
                    "work",
                    &[
                        "report", "email", "meeting", "budget", "slides", "plan", "review", "memo", "invoice",
                        "survey", "draft", "schedule",
                    ],
                    &[
                        ("did you finish the {a} {b}", "yes i finished the {a} {b}"),
                        ("can you send the {a} {b}", "sure i will send the {a} {b}"),
                        ("is the {a} ready {b}", "yes i guess the {a} is ready {b}"),
                    ],
                ),
                topic(
                    "sports",
                    &[
                        "tennis", "soccer", "golf", "chess", "hockey", "rugby", "cricket", "boxing", "rowing",
                        "skiing", "surfing", "karate",
                    ],
                    &[
                        ("do you play {a} {b}", "yes i play {a} {b}"),
                        ("shall we watch {a} {b}", "sure watching {a} {b} sounds great"),
                        ("who won the {a} match {b}", "i think we won the {a} match {b}"),
                    ],
                ),
                topic(
                    "music",
                    &[
                        "jazz", "rock", "blues", "pop", "reggae", "opera", "folk", "metal", "disco", "techno", "soul",
                        "punk",
                    ],
                    &[
                        ("shall we hear {a} {b}", "yes {a} {b} would be nice"),
                        ("is there a {a} concert {b}", "yes there is a {a} concert {b}"),
                        ("do you enjoy {a} {b}", "i really love {a} {b}"),
                    ],
                ),
            ],
        }
    }

    pub fn template_count(&self) -> usize {
        self.topics.iter().map(|t| t.templates.len()).sum()
    }

    /// Every word a template or filler can contribute, sorted and distinct.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = std::collections::BTreeSet::new();
        for topic in &self.topics {
            for fill in topic.fillers.values().flatten() {
                out.extend(tokenize(fill));
            }
            for t in &topic.templates {
                for side in [&t.prompt, &t.response] {
                    out.extend(pieces(side).into_iter().filter_map(Result::ok).map(str::to_string));
                }
            }
        }
        out.into_iter().collect()
    }
}

/// Splits a template into literal words and slot names.
fn pieces(text: &str) -> Vec<Result<&str, &str>> {
    text.split_whitespace()
        .map(|w| match w.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
            Some(slot) => Err(slot),
            None => Ok(w),
        })
        .collect()
}

fn instantiate(text: &str, binding: &BTreeMap<&str, &str>) -> Vec<String> {
    pieces(text)
        .into_iter()
        .map(|p| match p {
            Ok(w) => w.to_string(),
            Err(slot) => binding[slot].to_string(),
        })
        .collect()
}

/// Every (prompt, response) the template can produce, in a fixed order.
fn expand(topic: &Topic, template: &Template) -> Result<Vec<(Vec<String>, Vec<String>)>, DataError> {
    let name = format!("{}: {}", topic.name, template.prompt);
    let mut slots: Vec<&str> = Vec::new();
    for p in pieces(&template.prompt).into_iter().chain(pieces(&template.response)) {
        if let Err(slot) = p {
            if !topic.fillers.contains_key(slot) {
                return Err(DataError::Generation(format!(
                    "template `{name}` uses unknown slot `{slot}`"
                )));
            }
            if !slots.contains(&slot) {
                slots.push(slot);
            }
        }
    }
    let longest = |text: &str| -> usize {
        pieces(text)
            .into_iter()
            .map(|p| match p {
                Ok(_) => 1,
                Err(slot) => topic.fillers[slot].iter().map(|f| tokenize(f).len()).max().unwrap_or(0),
            })
            .sum()
    };
    for side in [&template.prompt, &template.response] {
        let len = longest(side);
        if len > MAX_SENTENCE_TOKENS {
            return Err(DataError::TemplateTooLong {
                template: name,
                len,
                limit: MAX_SENTENCE_TOKENS,
            });
        }
    }
    let mut out = Vec::new();
    let mut index = vec![0usize; slots.len()];
    if slots.iter().any(|s| topic.fillers[*s].is_empty()) {
        return Ok(out);
    }
    loop {
        let binding: BTreeMap<&str, &str> = slots
            .iter()
            .zip(&index)
            .map(|(s, &i)| (*s, topic.fillers[*s][i].as_str()))
            .collect();
        out.push((
            instantiate(&template.prompt, &binding),
            instantiate(&template.response, &binding),
        ));
        // odometer increment, last slot fastest
        let mut k = slots.len();
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            index[k] += 1;
            if index[k] < topic.fillers[slots[k]].len() {
                break;
            }
            index[k] = 0;
        }
    }
}

/// Samples `n_pairs` distinct prompts from `templates`, splits them 90/5/5
/// into train/valid/test, and attaches the grammar paraphrases of each test
/// response as its references.
pub fn generate_corpus(
    grammar: &ParaphraseGrammar,
    templates: &TemplateSet,
    n_pairs: usize,
    seed: u64,
) -> Result<Corpus, DataError> {
    if n_pairs < 100 {
        return Err(DataError::Generation(format!(
            "need at least 100 pairs, asked for {n_pairs}"
        )));
    }
    if templates.topics.len() < 5 {
        return Err(DataError::Generation(format!(
            "templates cover {} topics, need at least 5",
            templates.topics.len()
        )));
    }
    let mut seen = HashSet::new();
    let mut pool = Vec::new();
    for topic in &templates.topics {
        for template in &topic.templates {
            for (prompt, response) in expand(topic, template)? {
                if seen.insert(prompt.clone()) {
                    pool.push((prompt, response));
                }
            }
        }
    }
    if pool.len() < n_pairs {
        return Err(DataError::Generation(format!(
            "templates yield {} distinct prompts, asked for {n_pairs}",
            pool.len()
        )));
    }
    let mut rng = rng_from(seed, &[0x636f_7270]);
    pool.shuffle(&mut rng);
    pool.truncate(n_pairs);

    let n_train = n_pairs * 90 / 100;
    let n_valid = n_pairs * 5 / 100;
    let pair = |id: usize, (prompt, response): &(Vec<String>, Vec<String>)| DialogPair {
        id,
        prompt: prompt.clone(),
        response: response.clone(),
    };
    let train = pool[..n_train].iter().enumerate().map(|(i, p)| pair(i, p)).collect();
    let valid = pool[n_train..n_train + n_valid]
        .iter()
        .enumerate()
        .map(|(i, p)| pair(i, p))
        .collect();
    let items = pool[n_train + n_valid..]
        .iter()
        .enumerate()
        .map(|(id, (prompt, response))| {
            let mut references = grammar.paraphrases(response);
            references.truncate(MAX_REFERENCES);
            MultiRefItem {
                id,
                prompt: prompt.clone(),
                references,
            }
        })
        .collect();
    Ok(Corpus {
        train,
        valid,
        test: MultiRefTestSet { items },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grammar() -> ParaphraseGrammar {
        ParaphraseGrammar::parse(BUILTIN_GRAMMAR).unwrap()
    }

    #[test]
    fn same_seed_same_corpus() {
        let t = TemplateSet::builtin();
        let a = generate_corpus(&grammar(), &t, 300, 7).unwrap();
        let b = generate_corpus(&grammar(), &t, 300, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&grammar(), &t, 300, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_sizes_and_disjoint_prompts() {
        let c = generate_corpus(&grammar(), &TemplateSet::builtin(), 2230, 1).unwrap();
        assert_eq!(c.train.len(), 2007);
        assert_eq!(c.valid.len(), 111);
        assert_eq!(c.test.len(), 112);
        let train: HashSet<_> = c.train.iter().map(|p| &p.prompt).collect();
        assert!(c.test.items.iter().all(|it| !train.contains(&it.prompt)));
        assert!(c.valid.iter().all(|p| !train.contains(&p.prompt)));
    }

    #[test]
    fn builtin_sets_are_large_and_equal_length() {
        let g = grammar();
        let t = TemplateSet::builtin();
        let mut sizes = Vec::new();
        for topic in &t.topics {
            for tpl in &topic.templates {
                let (_, response) = expand(topic, tpl).unwrap().remove(0);
                let set = g.paraphrases(&response);
                assert!(set.len() <= MAX_REFERENCES);
                assert!(set.iter().all(|p| p.len() == response.len()));
                sizes.push(set.len());
            }
        }
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
        assert!(mean >= 4.0, "mean set size {mean}");
    }

    #[test]
    fn overlong_template_is_named() {
        let mut t = TemplateSet::builtin();
        let long = vec!["word"; 70].join(" ");
        t.topics[0].templates.push(Template {
            prompt: "too long".into(),
            response: long,
        });
        match generate_corpus(&grammar(), &t, 200, 0) {
            Err(DataError::TemplateTooLong { template, len, .. }) => {
                assert!(template.contains("too long"));
                assert_eq!(len, 70);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_small_requests() {
        assert!(generate_corpus(&grammar(), &TemplateSet::builtin(), 50, 0).is_err());
        let mut few = TemplateSet::builtin();
        few.topics.truncate(4);
        assert!(generate_corpus(&grammar(), &few, 200, 0).is_err());
    }
}
