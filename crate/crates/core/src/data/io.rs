//! Tab-separated corpus files.
//!
//! Pair files hold `prompt<TAB>response` per line; multi-reference files hold
//! `prompt<TAB>ref1<TAB>ref2...`. Both are UTF-8 with LF endings on write;
//! CRLF is accepted on read.

use std::path::Path;

use super::{detokenize, tokenize, DataError, DialogPair, MultiRefItem, MultiRefTestSet};

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    let body = body.strip_suffix('\r').unwrap_or(body);
    body.split('\n')
        .enumerate()
        .filter(move |_| !body.is_empty())
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
}

fn field(line: usize, raw: &str, what: &str) -> Result<Vec<String>, DataError> {
    let toks = tokenize(raw);
    if toks.is_empty() {
        return Err(DataError::Malformed {
            line,
            msg: format!("empty {what}"),
        });
    }
    Ok(toks)
}

pub fn parse_pairs(text: &str) -> Result<Vec<DialogPair>, DataError> {
    lines(text)
        .map(|(line, l)| {
            let mut parts = l.split('\t');
            let prompt = parts.next().unwrap_or_default();
            let Some(response) = parts.next() else {
                return Err(DataError::Malformed {
                    line,
                    msg: "missing tab separator".into(),
                });
            };
            if parts.next().is_some() {
                return Err(DataError::Malformed {
                    line,
                    msg: "more than one tab in a pair line".into(),
                });
            }
            Ok(DialogPair {
                id: line - 1,
                prompt: field(line, prompt, "prompt")?,
                response: field(line, response, "response")?,
            })
        })
        .collect()
}

pub fn parse_multi_ref(text: &str) -> Result<MultiRefTestSet, DataError> {
    let items = lines(text)
        .map(|(line, l)| {
            let mut parts = l.split('\t');
            let prompt = field(line, parts.next().unwrap_or_default(), "prompt")?;
            let references = parts
                .map(|r| field(line, r, "reference"))
                .collect::<Result<Vec<_>, _>>()?;
            if references.is_empty() {
                return Err(DataError::Malformed {
                    line,
                    msg: "missing tab separator".into(),
                });
            }
            Ok(MultiRefItem {
                id: line - 1,
                prompt,
                references,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MultiRefTestSet { items })
}

pub fn pairs_to_text(pairs: &[DialogPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&detokenize(&p.prompt));
        out.push('\t');
        out.push_str(&detokenize(&p.response));
        out.push('\n');
    }
    out
}

pub fn multi_ref_to_text(set: &MultiRefTestSet) -> String {
    let mut out = String::new();
    for it in &set.items {
        out.push_str(&detokenize(&it.prompt));
        for r in &it.references {
            out.push('\t');
            out.push_str(&detokenize(r));
        }
        out.push('\n');
    }
    out
}

pub fn read_pairs(path: &Path) -> Result<Vec<DialogPair>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_pairs(&text)
}

pub fn write_pairs(path: &Path, pairs: &[DialogPair]) -> Result<(), DataError> {
    std::fs::write(path, pairs_to_text(pairs)).map_err(|e| DataError::io(path, e))
}

pub fn read_multi_ref(path: &Path) -> Result<MultiRefTestSet, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_multi_ref(&text)
}

pub fn write_multi_ref(path: &Path, set: &MultiRefTestSet) -> Result<(), DataError> {
    std::fs::write(path, multi_ref_to_text(set)).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_round_trip() {
        let text = "hi there\thello\nhow are you\ti am fine thanks\n";
        let pairs = parse_pairs(text).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].id, 1);
        assert_eq!(pairs_to_text(&pairs), text);
    }

    #[test]
    fn crlf_is_normalized() {
        let pairs = parse_pairs("a b\tc\r\nd\te f\r\n").unwrap();
        assert_eq!(pairs_to_text(&pairs), "a b\tc\nd\te f\n");
    }

    #[test]
    fn missing_tab_reports_line() {
        let err = parse_pairs("a\tb\nno tab here\nc\td\n").unwrap_err();
        match err {
            DataError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_pairs("").unwrap().is_empty());
        assert!(parse_multi_ref("").unwrap().is_empty());
    }

    #[test]
    fn multi_ref_round_trip() {
        let text = "how are you\ti am fine\toh i am fine\twell i am fine\n";
        let set = parse_multi_ref(text).unwrap();
        assert_eq!(set.items[0].references.len(), 3);
        assert_eq!(set.items[0].original(), &["i", "am", "fine"]);
        assert_eq!(multi_ref_to_text(&set), text);
        assert!(parse_multi_ref("prompt only\n").is_err());
    }
}
