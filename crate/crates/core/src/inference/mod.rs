//! Privacy inference over a dialogue's past user inputs and active memories.
//!
//! [`prompt`] builds the one-shot request, [`parse`] turns the provider's
//! JSON list into source-tracked findings, [`dedup`] merges repeats, and
//! [`FindingStore`] keeps the latest [`FindingSet`] per dialogue.

pub mod dedup;
pub mod parse;
pub mod prompt;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{DialogueId, FindingId, MemoryId, RunId, Timestamp, TurnId};
use crate::persistence::{Fold, Journal, Stream, StreamEvent};
use crate::sensitivity::{color_of, ColorSpec};

pub use dedup::{dedup_findings, normalize_statement};
pub use parse::{parse_findings, StoreView, Warning, WarningKind};
pub use prompt::{build_inference_prompt, CategoryDef, PromptFixture};

/// Character range `[start, end)` of a source text, counted in Unicode
/// scalar values, plus the exact text it covers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeywordSpan {
    pub start: usize,
    pub end: usize,
    pub surface: Arc<str>,
}

impl KeywordSpan {
    /// Span of the first exact occurrence of `keyword` in `source`.
    pub fn locate(source: &str, keyword: &str) -> Option<Self> {
        if keyword.is_empty() {
            return None;
        }
        let byte = source.find(keyword)?;
        let start = source[..byte].chars().count();
        Some(Self { start, end: start + keyword.chars().count(), surface: keyword.into() })
    }

    /// Whether this span still matches `source` exactly.
    pub fn matches(&self, source: &str) -> bool {
        self.end > self.start && char_slice(source, self.start, self.end) == Some(&*self.surface)
    }

    pub fn overlaps(&self, start: usize, end: usize) -> bool {
        self.start < end && start < self.end
    }
}

/// Substring by character offsets; `None` when out of bounds.
pub fn char_slice(s: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut idx = s.char_indices().map(|(i, _)| i).chain(std::iter::once(s.len()));
    let b0 = idx.by_ref().nth(start)?;
    let b1 = if end == start { b0 } else { idx.nth(end - start - 1)? };
    Some(&s[b0..b1])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRef {
    pub turn_id: TurnId,
    pub keyword_spans: Vec<KeywordSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRef {
    pub memory_id: MemoryId,
    pub keyword_spans: Vec<KeywordSpan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingStatus {
    Open,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyFinding {
    pub id: FindingId,
    // Immutable once parsed; shared rather than copied on clone.
    pub statement: Arc<str>,
    pub category: Arc<str>,
    pub confidence: f64,
    pub sensitivity: f64,
    pub source_turn_refs: Vec<TurnRef>,
    pub source_memory_refs: Vec<MemoryRef>,
    pub created_at: Timestamp,
    pub status: FindingStatus,
    /// Set when a source was edited after this finding was produced.
    #[serde(default)]
    pub stale: bool,
}

impl PrivacyFinding {
    pub fn color(&self) -> ColorSpec {
        color_of(self.confidence, self.sensitivity)
    }

    pub fn has_sources(&self) -> bool {
        !self.source_turn_refs.is_empty() || !self.source_memory_refs.is_empty()
    }

    pub fn is_open(&self) -> bool {
        self.status == FindingStatus::Open
    }

    fn dedup_key(&self) -> (String, String) {
        (normalize_statement(&self.statement), self.category.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingSet {
    pub dialogue_id: DialogueId,
    pub inference_run_id: RunId,
    pub findings: Vec<PrivacyFinding>,
    pub inputs_used: usize,
    pub memories_used: usize,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum FindingEvent {
    SetPersisted(FindingSet),
    MarkedStale { dialogue_id: DialogueId },
    FindingResolved { dialogue_id: DialogueId, finding_id: FindingId },
}

impl StreamEvent for FindingEvent {
    const STREAM: Stream = Stream::Findings;

    fn entity_id(&self) -> String {
        match self {
            FindingEvent::SetPersisted(s) => s.inference_run_id.to_string(),
            FindingEvent::MarkedStale { dialogue_id } => dialogue_id.to_string(),
            FindingEvent::FindingResolved { finding_id, .. } => finding_id.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FindingState {
    /// Latest set per dialogue; a new run replaces the old set wholesale.
    pub latest: BTreeMap<DialogueId, FindingSet>,
    /// Every finding ever persisted, for click validation and audits.
    pub known: HashMap<FindingId, DialogueId>,
    pub runs: Vec<RunId>,
}

impl Fold for FindingState {
    type Event = FindingEvent;

    fn apply(&mut self, event: &FindingEvent) {
        match event {
            FindingEvent::SetPersisted(set) => {
                for f in &set.findings {
                    self.known.insert(f.id.clone(), set.dialogue_id.clone());
                }
                self.runs.push(set.inference_run_id.clone());
                self.latest.insert(set.dialogue_id.clone(), set.clone());
            }
            FindingEvent::MarkedStale { dialogue_id } => {
                if let Some(set) = self.latest.get_mut(dialogue_id) {
                    for f in set.findings.iter_mut().filter(|f| f.is_open()) {
                        f.stale = true;
                    }
                }
            }
            FindingEvent::FindingResolved { dialogue_id, finding_id } => {
                if let Some(f) = self
                    .latest
                    .get_mut(dialogue_id)
                    .and_then(|s| s.findings.iter_mut().find(|f| &f.id == finding_id))
                {
                    f.status = FindingStatus::Resolved;
                }
            }
        }
    }
}

impl FindingState {
    pub fn latest(&self, dialogue_id: &DialogueId) -> Option<&FindingSet> {
        self.latest.get(dialogue_id)
    }

    pub fn find(&self, id: &FindingId) -> Option<&PrivacyFinding> {
        let d = self.known.get(id)?;
        self.latest.get(d)?.findings.iter().find(|f| &f.id == id)
    }

    pub fn open_findings(&self, dialogue_id: &DialogueId) -> Vec<&PrivacyFinding> {
        self.latest
            .get(dialogue_id)
            .map(|s| s.findings.iter().filter(|f| f.is_open()).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug)]
pub struct FindingStore {
    state: FindingState,
    journal: Journal<FindingEvent>,
}

impl FindingStore {
    pub fn new(journal: Journal<FindingEvent>) -> Result<Self> {
        let state = journal.replay()?;
        Ok(Self { state, journal })
    }

    pub fn in_memory() -> Self {
        Self { state: FindingState::default(), journal: Journal::in_memory() }
    }

    pub fn state(&self) -> &FindingState {
        &self.state
    }

    pub fn journal(&self) -> &Journal<FindingEvent> {
        &self.journal
    }

    pub(crate) fn commit(&mut self, event: FindingEvent, at: Timestamp) -> Result<()> {
        self.journal.append(&event, at)?;
        self.state.apply(&event);
        Ok(())
    }

    /// Persists a new set, superseding the dialogue's previous one. A finding
    /// stays resolved only if the same (statement, category) was resolved in
    /// the set it replaces.
    pub fn persist(&mut self, mut set: FindingSet) -> Result<FindingSet> {
        if let Some(prev) = self.state.latest(&set.dialogue_id) {
            let resolved: std::collections::HashSet<_> = prev
                .findings
                .iter()
                .filter(|f| f.status == FindingStatus::Resolved)
                .map(PrivacyFinding::dedup_key)
                .collect();
            for f in &mut set.findings {
                if resolved.contains(&f.dedup_key()) {
                    f.status = FindingStatus::Resolved;
                }
            }
        }
        let at = set.created_at;
        self.commit(FindingEvent::SetPersisted(set.clone()), at)?;
        Ok(set)
    }

    pub fn mark_stale(&mut self, dialogue_id: &DialogueId, at: Timestamp) -> Result<()> {
        if self.state.open_findings(dialogue_id).is_empty() {
            return Ok(());
        }
        self.commit(FindingEvent::MarkedStale { dialogue_id: dialogue_id.clone() }, at)
    }

    pub fn resolve(&mut self, finding_id: &FindingId, at: Timestamp) -> Result<PrivacyFinding> {
        let dialogue_id = self
            .state
            .find(finding_id)
            .map(|_| self.state.known[finding_id].clone())
            .ok_or_else(|| Error::UnknownFinding(finding_id.to_string()))?;
        self.commit(FindingEvent::FindingResolved { dialogue_id, finding_id: finding_id.clone() }, at)?;
        Ok(self.state.find(finding_id).cloned().expect("resolved finding is present"))
    }
}
