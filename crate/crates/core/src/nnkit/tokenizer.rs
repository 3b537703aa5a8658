//! Lowercased word-level tokenizer with punctuation split into separate tokens.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::NnError;
use crate::corpus::Corpus;
use crate::fingerprint::sha256_hex;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const CLS: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;
pub const SPECIALS: [&str; 6] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[BOS]", "[EOS]"];

/// Tokens that end a sentence; never selected for masking.
const BOUNDARIES: [&str; 3] = [".", "!", "?"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

/// Splits lowercased text into word and punctuation tokens.
///
/// Periods and commas between digits, and hyphens or apostrophes between
/// alphanumerics, stay inside their word.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.to_lowercase().chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let prev = i.checked_sub(1).map(|j| chars[j]);
            let next = chars.get(i + 1).copied();
            let joined = match c {
                '.' | ',' => prev.is_some_and(|p| p.is_ascii_digit()) && next.is_some_and(|n| n.is_ascii_digit()),
                '-' | '\'' => prev.is_some_and(char::is_alphanumeric) && next.is_some_and(char::is_alphanumeric),
                _ => !c.is_ascii_punctuation(),
            };
            if joined {
                word.push(c);
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Joins tokens with spaces, attaching closing punctuation to the preceding word.
pub fn join_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for tok in tokens {
        let attach = matches!(tok, "." | "," | ";" | ":" | "!" | "?" | ")" | "]" | "%");
        if !out.is_empty() && !attach && !out.ends_with(['(', '[']) {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

impl Tokenizer {
    /// Vocabulary over `texts`: specials, then tokens with frequency ≥ `min_freq`
    /// ordered by descending frequency and then lexicographically.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self, NnError> {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for w in split_words(text) {
                *freq.entry(w).or_default() += 1;
            }
        }
        if !any {
            return Err(NnError::EmptyCorpus);
        }
        let mut words: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(w, f)| *f >= min_freq.max(1) && !SPECIALS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let vocab = SPECIALS.iter().map(|s| s.to_string()).chain(words.into_iter().map(|(w, _)| w)).collect();
        Ok(Self::from_vocab(vocab))
    }

    pub fn build(corpus: &Corpus, min_freq: usize) -> Result<Self, NnError> {
        Self::from_texts(corpus.sentences().iter().map(|s| s.text.as_str()), min_freq)
    }

    fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Tokenizer { vocab, index }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.vocab[i].clone()).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        join_tokens(ids.iter().filter(|&&id| id != PAD).map(|&id| self.vocab[id].as_str()))
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn is_boundary(&self, id: usize) -> bool {
        BOUNDARIES.contains(&self.vocab[id].as_str())
    }

    /// Neither special nor a sentence boundary.
    pub fn is_content(&self, id: usize) -> bool {
        !self.is_special(id) && !self.is_boundary(id)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.vocab.join("\n").as_bytes())
    }

    /// Writes one token per line.
    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut body = self.vocab.join("\n");
        body.push('\n');
        std::fs::write(path, body)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        let vocab: Vec<String> = text.lines().map(str::to_owned).collect();
        if vocab.len() < SPECIALS.len() || vocab[..SPECIALS.len()] != SPECIALS {
            return Err(NnError::Checkpoint("token listing does not start with the reserved specials".into()));
        }
        Ok(Self::from_vocab(vocab))
    }
}
