//! Report sentences, JSONL ingestion/validation, deterministic splits and the
//! synthetic corpus generator.
//!
//! The canonical on-disk format is JSONL: one UTF-8 JSON object per line with
//! lowercase field names. An optional first line `{"_label_set": [...]}`
//! declares the pathology label set. Absent labels are encoded by omitting the
//! field; an explicit `null` is rejected.

mod split;
pub mod synthetic;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use split::{split, SplitSpec};
pub use synthetic::{generate_synthetic, rule_pathology, Category, Pathology, SyntheticSpec, JARGON_TERMS};

use crate::fingerprint::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate sentence id `{0}`")]
    DuplicateId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Ingested,
    Synthetic,
}

/// One report sentence with its task labels.
///
/// `ambiguous` and `abnormal` are present exactly when `relevant` is true.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSentence {
    pub id: String,
    pub text: String,
    pub relevant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambiguous: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abnormal: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pathology: Option<String>,
    #[serde(default)]
    pub source: Source,
}

impl ReportSentence {
    /// A relevant, fully labeled sentence.
    pub fn labeled(
        id: impl Into<String>,
        text: impl Into<String>,
        ambiguous: bool,
        abnormal: bool,
        pathology: Option<String>,
    ) -> Self {
        ReportSentence {
            id: id.into(),
            text: normalize_whitespace(&text.into()),
            relevant: true,
            ambiguous: Some(ambiguous),
            abnormal: Some(abnormal),
            pathology,
            source: Source::Ingested,
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if normalize_whitespace(&self.text).is_empty() {
            return Err("text is empty after whitespace normalization".into());
        }
        match (self.relevant, self.ambiguous.is_some(), self.abnormal.is_some()) {
            (true, true, true) | (false, false, false) => Ok(()),
            (true, _, _) => Err("relevant sentence must carry both `ambiguous` and `abnormal`".into()),
            (false, _, _) => Err("irrelevant sentence must not carry `ambiguous` or `abnormal`".into()),
        }
    }
}

/// Which fields a corpus file must carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// Rewriting-task records: `relevant` is required.
    Labeled,
    /// Pretraining records: `pathology` is required, task labels optional.
    Pretrain,
}

/// An ordered, validated collection of sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    sentences: Vec<ReportSentence>,
    label_set: BTreeSet<String>,
    pub provenance: String,
}

impl Corpus {
    /// Validates every record and derives the label set from the pathologies present.
    pub fn new(sentences: Vec<ReportSentence>, provenance: impl Into<String>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(sentences.len());
        let mut label_set = BTreeSet::new();
        for (i, s) in sentences.iter().enumerate() {
            s.check()
                .map_err(|reason| CorpusError::MalformedRecord { line: i + 1, reason })?;
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
            if let Some(p) = &s.pathology {
                label_set.insert(p.clone());
            }
        }
        Ok(Corpus { sentences, label_set, provenance: provenance.into() })
    }

    pub fn sentences(&self) -> &[ReportSentence] {
        &self.sentences
    }

    pub fn into_sentences(self) -> Vec<ReportSentence> {
        self.sentences
    }

    pub fn label_set(&self) -> &BTreeSet<String> {
        &self.label_set
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ReportSentence> {
        self.sentences.iter().find(|s| s.id == id)
    }

    /// Keeps the sentences matching `keep`, preserving order.
    pub fn filter(&self, keep: impl Fn(&ReportSentence) -> bool) -> Corpus {
        let sentences: Vec<_> = self.sentences.iter().filter(|s| keep(s)).cloned().collect();
        Corpus::new(sentences, self.provenance.clone()).expect("subset of a valid corpus is valid")
    }

    /// Canonical JSONL body (records only, no header).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&serde_json::to_string(s).expect("sentence serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical record serialization.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }
}

impl fmt::Display for Corpus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} sentences, {} labels ({})", self.len(), self.label_set.len(), self.provenance)
    }
}

/// Collapses whitespace runs to single spaces and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reads a JSONL corpus, rejecting records that violate sentence invariants.
pub fn load_corpus(path: impl AsRef<Path>, schema: Schema) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut declared: Option<BTreeSet<String>> = None;
    let mut sentences = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CorpusError::MalformedRecord { line: lineno, reason };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(malformed("expected a JSON object".into()));
        };
        if let Some(labels) = obj.get("_label_set") {
            if !sentences.is_empty() || declared.is_some() {
                return Err(malformed("`_label_set` header must be the first line".into()));
            }
            let labels = labels
                .as_array()
                .ok_or_else(|| malformed("`_label_set` must be an array of strings".into()))?
                .iter()
                .map(|v| v.as_str().map(str::to_owned))
                .collect::<Option<BTreeSet<_>>>()
                .ok_or_else(|| malformed("`_label_set` must be an array of strings".into()))?;
            declared = Some(labels);
            continue;
        }
        let sentence = parse_record(&obj, schema).map_err(malformed)?;
        sentence.check().map_err(malformed)?;
        if let (Some(labels), Some(p)) = (&declared, &sentence.pathology) {
            if !labels.contains(p) {
                return Err(malformed(format!("pathology `{p}` is not in the declared label set")));
            }
        }
        if !seen.insert(sentence.id.clone()) {
            return Err(CorpusError::DuplicateId(sentence.id));
        }
        sentences.push(sentence);
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let corpus = Corpus::new(sentences, path.display().to_string())?;
    if let Some(labels) = declared {
        let unused: Vec<_> = labels.difference(&corpus.label_set).collect();
        if !unused.is_empty() {
            tracing::warn!(?unused, "declared labels do not occur in the corpus");
        }
    }
    Ok(corpus)
}

fn parse_record(obj: &Map<String, Value>, schema: Schema) -> Result<ReportSentence, String> {
    const KNOWN: [&str; 7] = ["id", "text", "relevant", "ambiguous", "abnormal", "pathology", "source"];
    if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(format!("unknown field `{k}`"));
    }
    let string = |key: &str| -> Result<Option<String>, String> {
        match obj.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(Value::Null) => Err(format!("`{key}` is null; omit the field instead")),
            Some(_) => Err(format!("`{key}` must be a string")),
        }
    };
    let boolean = |key: &str| -> Result<Option<bool>, String> {
        match obj.get(key) {
            None => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(*b)),
            Some(Value::Null) => Err(format!("`{key}` is null; omit the field instead")),
            Some(_) => Err(format!("`{key}` must be a boolean")),
        }
    };
    let id = string("id")?.ok_or("missing `id`")?;
    let text = string("text")?.ok_or("missing `text`")?;
    let ambiguous = boolean("ambiguous")?;
    let abnormal = boolean("abnormal")?;
    let pathology = string("pathology")?;
    let relevant = match (schema, boolean("relevant")?) {
        (_, Some(r)) => r,
        (Schema::Labeled, None) => return Err("missing `relevant`".into()),
        // Pretraining records carry no task labels unless stated.
        (Schema::Pretrain, None) => false,
    };
    if schema == Schema::Pretrain && pathology.is_none() {
        return Err("pretrain records require `pathology`".into());
    }
    let source = match string("source")?.as_deref() {
        None | Some("ingested") => Source::Ingested,
        Some("synthetic") => Source::Synthetic,
        Some(other) => return Err(format!("unknown source `{other}`")),
    };
    Ok(ReportSentence {
        id,
        text: normalize_whitespace(&text),
        relevant,
        ambiguous,
        abnormal,
        pathology,
        source,
    })
}

/// Writes a corpus as JSONL with a `_label_set` header when labels exist.
pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<(), CorpusError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    if !corpus.label_set.is_empty() {
        let header = serde_json::json!({ "_label_set": corpus.label_set });
        writeln!(file, "{header}")?;
    }
    file.write_all(corpus.to_jsonl().as_bytes())?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn minimal_valid_record() {
        let f = write_lines(&[
            r#"{"id":"s1","text":"Normal bony structure.","relevant":true,"ambiguous":false,"abnormal":false}"#,
        ]);
        let c = load_corpus(f.path(), Schema::Labeled).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.sentences()[0].ambiguous, Some(false));
    }

    #[test]
    fn irrelevant_with_ambiguous_is_rejected() {
        let f = write_lines(&[
            r#"{"id":"s1","text":"PA and lateral views.","relevant":true,"ambiguous":false,"abnormal":false}"#,
            r#"{"id":"s2","text":"Views obtained.","relevant":false,"ambiguous":true}"#,
        ]);
        match load_corpus(f.path(), Schema::Labeled) {
            Err(CorpusError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn null_label_is_rejected() {
        let f = write_lines(&[r#"{"id":"s1","text":"x","relevant":false,"ambiguous":null}"#]);
        assert!(matches!(load_corpus(f.path(), Schema::Labeled), Err(CorpusError::MalformedRecord { .. })));
    }

    #[test]
    fn duplicate_and_empty() {
        let f = write_lines(&[
            r#"{"id":"a","text":"x","relevant":false}"#,
            r#"{"id":"a","text":"y","relevant":false}"#,
        ]);
        assert!(matches!(load_corpus(f.path(), Schema::Labeled), Err(CorpusError::DuplicateId(id)) if id == "a"));
        let f = write_lines(&[]);
        assert!(matches!(load_corpus(f.path(), Schema::Labeled), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn whitespace_only_text_is_rejected() {
        let f = write_lines(&[r#"{"id":"a","text":"   ","relevant":false}"#]);
        assert!(matches!(load_corpus(f.path(), Schema::Labeled), Err(CorpusError::MalformedRecord { line: 1, .. })));
    }

    #[test]
    fn declared_label_set_is_enforced() {
        let f = write_lines(&[
            r#"{"_label_set":["edema"]}"#,
            r#"{"id":"a","text":"mild edema.","pathology":"effusion"}"#,
        ]);
        assert!(matches!(load_corpus(f.path(), Schema::Pretrain), Err(CorpusError::MalformedRecord { line: 2, .. })));
    }

    #[test]
    fn pretrain_requires_pathology() {
        let f = write_lines(&[r#"{"id":"a","text":"mild edema."}"#]);
        assert!(load_corpus(f.path(), Schema::Pretrain).is_err());
        let f = write_lines(&[r#"{"id":"a","text":"mild edema.","pathology":"edema"}"#]);
        let c = load_corpus(f.path(), Schema::Pretrain).unwrap();
        assert!(!c.sentences()[0].relevant);
        assert_eq!(c.label_set().len(), 1);
    }

    #[test]
    fn write_then_load_round_trips() {
        let c = generate_synthetic(&SyntheticSpec::new(40, 3)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_corpus(f.path(), &c).unwrap();
        let back = load_corpus(f.path(), Schema::Labeled).unwrap();
        assert_eq!(back.sentences(), c.sentences());
        assert_eq!(back.label_set(), c.label_set());
    }
}
