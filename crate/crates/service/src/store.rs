//! Annotation rounds, adjudication and audits, persisted as an append-only
//! JSONL event log that is replayed on open.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use disambig_core::eval::{cohen_kappa, round_closable, AgreementTable, EvalError};
use disambig_core::rewrite::RewriteTrace;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("event log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Relevance,
    Abnormality,
    Ambiguity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundItem {
    pub item_id: String,
    pub sentence_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub round_id: String,
    pub number: usize,
    pub kind: LabelKind,
    pub annotators: [String; 2],
    pub items: Vec<RoundItem>,
    pub status: RoundStatus,
    pub closed_with_override: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub round_id: String,
    pub round: usize,
    pub item_id: String,
    pub sentence_id: String,
    pub text: String,
    pub kind: LabelKind,
    pub annotator: String,
    pub status: TaskStatus,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjudication {
    pub round_id: String,
    pub item_id: String,
    /// Labels of the two annotators, in round order.
    pub labels: [bool; 2],
    pub final_label: Option<bool>,
    pub adjudicator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditDecision {
    pub reviewer: String,
    pub disambiguation: bool,
    pub fidelity: bool,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditItem {
    pub item_id: String,
    pub original: String,
    pub trace: RewriteTrace,
    pub decisions: Vec<AuditDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    RoundCreated { round: Round },
    LabelSubmitted { task_id: String, annotator: String, label: bool },
    RoundClosed { round_id: String, with_override: bool },
    Adjudicated { round_id: String, item_id: String, label: bool, adjudicator: String },
    AuditsAdded { items: Vec<AuditItem> },
    AuditDecided { item_id: String, decision: AuditDecision },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Disagreement {
    pub item_id: String,
    pub sentence_id: String,
    pub labels: [bool; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Agreement {
    pub round_id: String,
    pub kind: LabelKind,
    /// Items labeled by both annotators.
    pub n: usize,
    pub total: usize,
    pub kappa: Option<f64>,
    pub closable: bool,
    pub pairs: Vec<(bool, bool)>,
    pub disagreements: Vec<Disagreement>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSummary {
    pub n: usize,
    pub disambiguation: Option<f64>,
    pub fidelity: Option<f64>,
}

#[derive(Debug, Default)]
struct State {
    rounds: BTreeMap<String, Round>,
    tasks: BTreeMap<String, AnnotationTask>,
    adjudications: BTreeMap<(String, String), Adjudication>,
    audits: BTreeMap<String, AuditItem>,
}

fn task_id(round_id: &str, item: usize, annotator: usize) -> String {
    format!("{round_id}.{item:05}.{annotator}")
}

impl State {
    fn apply(&mut self, event: &Event) {
        match event {
            Event::RoundCreated { round } => {
                for (i, item) in round.items.iter().enumerate() {
                    for (a, annotator) in round.annotators.iter().enumerate() {
                        let id = task_id(&round.round_id, i, a);
                        self.tasks.insert(
                            id.clone(),
                            AnnotationTask {
                                task_id: id,
                                round_id: round.round_id.clone(),
                                round: round.number,
                                item_id: item.item_id.clone(),
                                sentence_id: item.sentence_id.clone(),
                                text: item.text.clone(),
                                kind: round.kind,
                                annotator: annotator.clone(),
                                status: TaskStatus::Pending,
                                label: None,
                            },
                        );
                    }
                }
                self.rounds.insert(round.round_id.clone(), round.clone());
            }
            Event::LabelSubmitted { task_id, label, .. } => {
                if let Some(t) = self.tasks.get_mut(task_id) {
                    t.label = Some(*label);
                    t.status = TaskStatus::Labeled;
                }
            }
            Event::RoundClosed { round_id, with_override } => {
                let queue = self.agreement(round_id).map(|a| a.disagreements).unwrap_or_default();
                if let Some(r) = self.rounds.get_mut(round_id) {
                    r.status = RoundStatus::Closed;
                    r.closed_with_override = *with_override;
                }
                for d in queue {
                    self.adjudications.insert(
                        (round_id.clone(), d.item_id.clone()),
                        Adjudication {
                            round_id: round_id.clone(),
                            item_id: d.item_id,
                            labels: d.labels,
                            final_label: None,
                            adjudicator: None,
                        },
                    );
                }
            }
            Event::Adjudicated { round_id, item_id, label, adjudicator } => {
                if let Some(a) = self.adjudications.get_mut(&(round_id.clone(), item_id.clone())) {
                    a.final_label = Some(*label);
                    a.adjudicator = Some(adjudicator.clone());
                }
            }
            Event::AuditsAdded { items } => {
                for item in items {
                    self.audits.insert(item.item_id.clone(), item.clone());
                }
            }
            Event::AuditDecided { item_id, decision } => {
                if let Some(a) = self.audits.get_mut(item_id) {
                    a.decisions.push(decision.clone());
                }
            }
        }
    }

    fn round(&self, round_id: &str) -> Result<&Round, StoreError> {
        self.rounds.get(round_id).ok_or_else(|| StoreError::NotFound(format!("round `{round_id}`")))
    }

    fn agreement(&self, round_id: &str) -> Result<Agreement, StoreError> {
        let round = self.round(round_id)?;
        let mut pairs = Vec::new();
        let mut disagreements = Vec::new();
        for (i, item) in round.items.iter().enumerate() {
            let label = |a| self.tasks.get(&task_id(round_id, i, a)).and_then(|t| t.label);
            if let (Some(x), Some(y)) = (label(0), label(1)) {
                pairs.push((x, y));
                if x != y {
                    disagreements.push(Disagreement {
                        item_id: item.item_id.clone(),
                        sentence_id: item.sentence_id.clone(),
                        labels: [x, y],
                    });
                }
            }
        }
        let kappa = match cohen_kappa(&AgreementTable { pairs: pairs.clone() }) {
            Ok(k) => Some(k),
            Err(EvalError::Empty) => None,
            Err(e) => return Err(StoreError::Invalid(e.to_string())),
        };
        let complete = pairs.len() == round.items.len();
        Ok(Agreement {
            round_id: round_id.to_owned(),
            kind: round.kind,
            n: pairs.len(),
            total: round.items.len(),
            kappa,
            closable: complete && kappa.is_some_and(round_closable),
            pairs,
            disagreements,
        })
    }
}

/// Service state with durable, append-only writes.
#[derive(Debug)]
pub struct Store {
    state: State,
    log: Option<(PathBuf, File)>,
    seq: usize,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    seq: usize,
    event: Event,
}

impl Store {
    /// State that lives only as long as the process.
    pub fn in_memory() -> Self {
        Store { state: State::default(), log: None, seq: 0 }
    }

    /// Replays `path` if it exists and appends new events to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut state = State::default();
        let mut seq = 0;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogLine = serde_json::from_str(&line)
                    .map_err(|e| StoreError::CorruptLog { line: i + 1, message: e.to_string() })?;
                state.apply(&entry.event);
                seq = entry.seq + 1;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Store { state, log: Some((path, file)), seq })
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log.as_ref().map(|(p, _)| p.as_path())
    }

    fn commit(&mut self, event: Event) -> Result<(), StoreError> {
        if let Some((_, file)) = &mut self.log {
            let mut line = serde_json::to_string(&LogLine { seq: self.seq, event: event.clone() }).expect("event serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        self.seq += 1;
        self.state.apply(&event);
        Ok(())
    }

    pub fn create_round(
        &mut self,
        kind: LabelKind,
        annotators: [String; 2],
        items: Vec<(String, String)>,
    ) -> Result<Round, StoreError> {
        if annotators[0].is_empty() || annotators[1].is_empty() || annotators[0] == annotators[1] {
            return Err(StoreError::Invalid("a round needs two distinct, non-empty annotator ids".into()));
        }
        if items.is_empty() {
            return Err(StoreError::Invalid("a round needs at least one item".into()));
        }
        let number = self.state.rounds.len() + 1;
        let round_id = format!("round-{number}");
        let items = items
            .into_iter()
            .enumerate()
            .map(|(i, (sentence_id, text))| RoundItem { item_id: format!("{round_id}.item-{i}"), sentence_id, text })
            .collect();
        let round = Round {
            round_id,
            number,
            kind,
            annotators,
            items,
            status: RoundStatus::Open,
            closed_with_override: false,
        };
        self.commit(Event::RoundCreated { round: round.clone() })?;
        Ok(round)
    }

    pub fn rounds(&self) -> Vec<&Round> {
        let mut rounds: Vec<&Round> = self.state.rounds.values().collect();
        rounds.sort_by_key(|r| r.number);
        rounds
    }

    pub fn round(&self, round_id: &str) -> Result<&Round, StoreError> {
        self.state.round(round_id)
    }

    /// Tasks assigned to `annotator` with ids after `cursor`, in id order.
    pub fn tasks(&self, annotator: &str, cursor: Option<&str>, limit: usize) -> (Vec<&AnnotationTask>, Option<String>) {
        let iter = self.state.tasks.values().filter(|t| t.annotator == annotator);
        paginate(iter.filter(|t| cursor.is_none_or(|c| t.task_id.as_str() > c)), limit, |t| t.task_id.clone())
    }

    pub fn task(&self, task_id: &str) -> Result<&AnnotationTask, StoreError> {
        self.state.tasks.get(task_id).ok_or_else(|| StoreError::NotFound(format!("task `{task_id}`")))
    }

    pub fn submit_label(&mut self, task_id: &str, annotator: &str, label: bool) -> Result<AnnotationTask, StoreError> {
        let task = self.task(task_id)?;
        if task.annotator != annotator {
            return Err(StoreError::Conflict(format!("task `{task_id}` is assigned to another annotator")));
        }
        if task.label.is_some() {
            return Err(StoreError::Conflict(format!("task `{task_id}` is already labeled")));
        }
        if self.state.round(&task.round_id)?.status == RoundStatus::Closed {
            return Err(StoreError::Conflict(format!("round `{}` is closed", task.round_id)));
        }
        self.commit(Event::LabelSubmitted { task_id: task_id.to_owned(), annotator: annotator.to_owned(), label })?;
        Ok(self.state.tasks[task_id].clone())
    }

    pub fn agreement(&self, round_id: &str) -> Result<Agreement, StoreError> {
        self.state.agreement(round_id)
    }

    /// Closes a fully labeled round; below the kappa threshold only with `force`.
    /// Disagreements enter the adjudication queue.
    pub fn close_round(&mut self, round_id: &str, force: bool) -> Result<Agreement, StoreError> {
        if self.state.round(round_id)?.status == RoundStatus::Closed {
            return Err(StoreError::Conflict(format!("round `{round_id}` is already closed")));
        }
        let agreement = self.state.agreement(round_id)?;
        if agreement.n < agreement.total {
            return Err(StoreError::Conflict(format!(
                "round `{round_id}` has {} of {} items labeled by both annotators",
                agreement.n, agreement.total
            )));
        }
        if !agreement.closable && !force {
            return Err(StoreError::Conflict(format!(
                "kappa {:.4} is below the closing threshold; pass override to close anyway",
                agreement.kappa.unwrap_or(f64::NAN)
            )));
        }
        self.commit(Event::RoundClosed { round_id: round_id.to_owned(), with_override: !agreement.closable })?;
        Ok(agreement)
    }

    pub fn adjudication_queue(&self, round_id: Option<&str>, pending_only: bool) -> Vec<&Adjudication> {
        self.state
            .adjudications
            .values()
            .filter(|a| round_id.is_none_or(|r| a.round_id == r))
            .filter(|a| !pending_only || a.final_label.is_none())
            .collect()
    }

    pub fn adjudicate(
        &mut self,
        round_id: &str,
        item_id: &str,
        label: bool,
        adjudicator: &str,
    ) -> Result<Adjudication, StoreError> {
        let key = (round_id.to_owned(), item_id.to_owned());
        let entry = self
            .state
            .adjudications
            .get(&key)
            .ok_or_else(|| StoreError::NotFound(format!("adjudication item `{item_id}` in `{round_id}`")))?;
        if entry.final_label.is_some() {
            return Err(StoreError::Conflict(format!("item `{item_id}` is already adjudicated")));
        }
        self.commit(Event::Adjudicated {
            round_id: round_id.to_owned(),
            item_id: item_id.to_owned(),
            label,
            adjudicator: adjudicator.to_owned(),
        })?;
        Ok(self.state.adjudications[&key].clone())
    }

    /// Final label per item of a closed round: the agreed label, or the
    /// adjudicated one (`None` while adjudication is pending).
    pub fn final_labels(&self, round_id: &str) -> Result<Vec<(String, Option<bool>)>, StoreError> {
        let round = self.state.round(round_id)?;
        if round.status != RoundStatus::Closed {
            return Err(StoreError::Conflict(format!("round `{round_id}` is still open")));
        }
        Ok(round
            .items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let label = |a| self.state.tasks.get(&task_id(round_id, i, a)).and_then(|t| t.label);
                let value = match (label(0), label(1)) {
                    (Some(x), Some(y)) if x == y => Some(x),
                    _ => self
                        .state
                        .adjudications
                        .get(&(round_id.to_owned(), item.item_id.clone()))
                        .and_then(|a| a.final_label),
                };
                (item.item_id.clone(), value)
            })
            .collect())
    }

    pub fn add_audits(&mut self, items: Vec<(Option<String>, RewriteTrace)>) -> Result<Vec<String>, StoreError> {
        if items.is_empty() {
            return Err(StoreError::Invalid("audit batch is empty".into()));
        }
        let start = self.state.audits.len();
        let items: Vec<AuditItem> = items
            .into_iter()
            .enumerate()
            .map(|(i, (original, trace))| AuditItem {
                item_id: format!("audit-{:05}", start + i + 1),
                original: original.unwrap_or_else(|| trace.input.clone()),
                trace,
                decisions: Vec::new(),
            })
            .collect();
        let ids = items.iter().map(|a| a.item_id.clone()).collect();
        self.commit(Event::AuditsAdded { items })?;
        Ok(ids)
    }

    pub fn audits(&self, cursor: Option<&str>, limit: usize) -> (Vec<&AuditItem>, Option<String>) {
        let iter = self.state.audits.values().filter(|a| cursor.is_none_or(|c| a.item_id.as_str() > c));
        paginate(iter, limit, |a| a.item_id.clone())
    }

    pub fn audit(&self, item_id: &str) -> Result<&AuditItem, StoreError> {
        self.state.audits.get(item_id).ok_or_else(|| StoreError::NotFound(format!("audit item `{item_id}`")))
    }

    /// First item `reviewer` has not decided yet.
    pub fn next_audit(&self, reviewer: &str) -> Option<&AuditItem> {
        self.state.audits.values().find(|a| a.decisions.iter().all(|d| d.reviewer != reviewer))
    }

    pub fn decide_audit(&mut self, item_id: &str, decision: AuditDecision) -> Result<AuditItem, StoreError> {
        if decision.reviewer.is_empty() {
            return Err(StoreError::Invalid("reviewer id is empty".into()));
        }
        let item = self.audit(item_id)?;
        if item.decisions.iter().any(|d| d.reviewer == decision.reviewer) {
            return Err(StoreError::Conflict(format!(
                "reviewer `{}` already decided `{item_id}`",
                decision.reviewer
            )));
        }
        self.commit(Event::AuditDecided { item_id: item_id.to_owned(), decision })?;
        Ok(self.state.audits[item_id].clone())
    }

    /// Success rates over all recorded decisions, optionally for one reviewer.
    pub fn audit_summary(&self, reviewer: Option<&str>) -> AuditSummary {
        let decisions: Vec<&AuditDecision> = self
            .state
            .audits
            .values()
            .flat_map(|a| &a.decisions)
            .filter(|d| reviewer.is_none_or(|r| d.reviewer == r))
            .collect();
        let n = decisions.len();
        let rate = |f: fn(&AuditDecision) -> bool| {
            (n > 0).then(|| decisions.iter().filter(|d| f(d)).count() as f64 / n as f64)
        };
        AuditSummary { n, disambiguation: rate(|d| d.disambiguation), fidelity: rate(|d| d.fidelity) }
    }
}

fn paginate<'a, T: 'a>(
    iter: impl Iterator<Item = &'a T>,
    limit: usize,
    key: impl Fn(&T) -> String,
) -> (Vec<&'a T>, Option<String>) {
    let mut page: Vec<&T> = iter.take(limit.saturating_add(1)).collect();
    let next = if page.len() > limit {
        page.truncate(limit);
        page.last().map(|t| key(t))
    } else {
        None
    };
    (page, next)
}
