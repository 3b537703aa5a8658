//! Knowledge-based replacement: dictionary substitution of terms with lay
//! phrases, longest match first, scanning left to right.

use std::collections::HashMap;
use std::path::Path;

use crate::corpus::{normalize_whitespace, Corpus};

/// The dictionary shipped with the crate.
pub const DEFAULT_DICTIONARY: &str = include_str!("../data/kbr_dictionary.tsv");

#[derive(Debug, thiserror::Error)]
pub enum DictionaryError {
    #[error("line {line}: expected `source<TAB>replacement`, got {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error("line {line}: source {source_phrase:?} already defined")]
    DuplicateSource { line: usize, source_phrase: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReplacementDictionary {
    entries: Vec<(Vec<String>, String)>,
    /// First source token to entry indices, longest source first.
    by_first: HashMap<String, Vec<usize>>,
}

/// A token of the scanned text with its byte range.
struct Span {
    start: usize,
    end: usize,
    text: String,
}

/// Words are runs of alphanumerics (with inner hyphens or apostrophes); any
/// other non-space character is a token of its own.
fn spans(text: &str) -> Vec<Span> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        if c.is_alphanumeric() {
            while j < chars.len() {
                let d = chars[j].1;
                let inner = matches!(d, '-' | '\'')
                    && chars.get(j + 1).is_some_and(|(_, n)| n.is_alphanumeric());
                if d.is_alphanumeric() || inner {
                    j += 1;
                } else {
                    break;
                }
            }
        }
        let end = chars.get(j).map_or(text.len(), |(b, _)| *b);
        out.push(Span { start, end, text: text[start..end].to_lowercase() });
        i = j;
    }
    out
}

fn phrase_tokens(phrase: &str) -> Vec<String> {
    spans(phrase).into_iter().map(|s| s.text).collect()
}

impl ReplacementDictionary {
    pub fn parse(text: &str) -> Result<Self, DictionaryError> {
        let mut dict = ReplacementDictionary::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let malformed = || DictionaryError::MalformedLine { line, content: raw.to_owned() };
            let mut cols = raw.split('\t');
            let (Some(src), Some(rep), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(malformed());
            };
            let src = normalize_whitespace(&src.to_lowercase());
            let rep = normalize_whitespace(&rep.to_lowercase());
            if src.is_empty() || rep.is_empty() {
                return Err(malformed());
            }
            let tokens = phrase_tokens(&src);
            if dict.entries.iter().any(|(t, _)| *t == tokens) {
                return Err(DictionaryError::DuplicateSource { line, source_phrase: src });
            }
            dict.insert(tokens, rep);
        }
        Ok(dict)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DictionaryError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_DICTIONARY).expect("shipped dictionary parses")
    }

    fn insert(&mut self, tokens: Vec<String>, replacement: String) {
        let idx = self.entries.len();
        let bucket = self.by_first.entry(tokens[0].clone()).or_default();
        bucket.push(idx);
        self.entries.push((tokens, replacement));
        let entries = &self.entries;
        bucket.sort_by_key(|&i| std::cmp::Reverse(entries[i].0.len()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(source, replacement)` pairs in file order.
    pub fn entries(&self) -> impl Iterator<Item = (String, &str)> {
        self.entries.iter().map(|(t, r)| (t.join(" "), r.as_str()))
    }

    pub fn get(&self, source: &str) -> Option<&str> {
        let tokens = phrase_tokens(source);
        self.entries.iter().find(|(t, _)| *t == tokens).map(|(_, r)| r.as_str())
    }

    /// Longest entry matching at token `i`, as (entry index, tokens consumed).
    fn match_at(&self, toks: &[Span], i: usize) -> Option<(usize, usize)> {
        let bucket = self.by_first.get(&toks[i].text)?;
        bucket.iter().find_map(|&e| {
            let src = &self.entries[e].0;
            let fits = i + src.len() <= toks.len() && src.iter().zip(&toks[i..]).all(|(a, b)| *a == b.text);
            fits.then_some((e, src.len()))
        })
    }

    /// Byte ranges and replacements of all matches in scan order.
    pub fn matches(&self, text: &str) -> Vec<(std::ops::Range<usize>, &str)> {
        let toks = spans(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            match self.match_at(&toks, i) {
                Some((e, n)) => {
                    out.push((toks[i].start..toks[i + n - 1].end, self.entries[e].1.as_str()));
                    i += n;
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Replaces dictionary terms; text outside matched spans is left untouched.
pub fn kbr_rewrite(sentence: &str, dict: &ReplacementDictionary) -> String {
    let mut out = String::with_capacity(sentence.len());
    let mut last = 0;
    for (range, rep) in dict.matches(sentence) {
        out.push_str(&sentence[last..range.start]);
        out.push_str(rep);
        last = range.end;
    }
    out.push_str(&sentence[last..]);
    out
}

/// Fraction of sentences with at least one dictionary match (0 for an empty corpus).
pub fn dictionary_coverage(corpus: &Corpus, dict: &ReplacementDictionary) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let hits = corpus.sentences().iter().filter(|s| !dict.matches(&s.text).is_empty()).count();
    hits as f64 / corpus.len() as f64
}
