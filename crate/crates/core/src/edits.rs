//! "Save changes": transactional edit batches over turns and memories,
//! addressed by id, plus the Coverage metric.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::conversation::{ConversationState, TurnEvent};
use crate::error::{RejectReason, Rejection};
use crate::ids::{BatchId, DialogueId, MemoryId, RunId, Timestamp, TurnId};
use crate::inference::PrivacyFinding;
use crate::memory::{MemoryEvent, MemoryState, MemoryStatus};

/// Character range `[start, end)` of the text as it was before the edit.
/// A zero-width range marks a pure insertion point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextRange {
    pub start: usize,
    pub end: usize,
}

impl TextRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Overlap with `[start, end)`. An insertion point counts only when it
    /// falls strictly inside the other range.
    pub fn intersects(&self, start: usize, end: usize) -> bool {
        if self.start == self.end {
            start < self.start && self.start < end
        } else {
            self.start < end && start < self.end
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnEdit {
    pub turn_id: TurnId,
    pub new_text: String,
    #[serde(default)]
    pub edited_spans: Vec<TextRange>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEdit {
    pub memory_id: MemoryId,
    pub new_text: String,
    #[serde(default)]
    pub edited_spans: Vec<TextRange>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditBatch {
    pub id: BatchId,
    pub dialogue_id: DialogueId,
    #[serde(default)]
    pub turn_edits: Vec<TurnEdit>,
    #[serde(default)]
    pub memory_edits: Vec<MemoryEdit>,
    #[serde(default)]
    pub memory_deletes: Vec<MemoryId>,
    pub submitted_at: Timestamp,
}

impl EditBatch {
    pub fn entry_count(&self) -> usize {
        self.turn_edits.len() + self.memory_edits.len() + self.memory_deletes.len()
    }

    /// Every entry's target id, in batch order.
    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.turn_edits
            .iter()
            .map(|e| e.turn_id.as_str())
            .chain(self.memory_edits.iter().map(|e| e.memory_id.as_str()))
            .chain(self.memory_deletes.iter().map(MemoryId::as_str))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedCounts {
    pub turn_edits: usize,
    pub memory_edits: usize,
    pub memory_deletes: usize,
}

impl AppliedCounts {
    pub fn total(&self) -> usize {
        self.turn_edits + self.memory_edits + self.memory_deletes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub batch_id: BatchId,
    pub accepted: bool,
    pub applied: AppliedCounts,
    pub rejected: Vec<Rejection>,
    pub coverage: f64,
    pub reinference_run_id: Option<RunId>,
}

impl ChangeReport {
    pub fn rejected(batch: &EditBatch, rejected: Vec<Rejection>, coverage: f64) -> Self {
        Self {
            batch_id: batch.id.clone(),
            accepted: false,
            applied: AppliedCounts::default(),
            rejected,
            coverage,
            reinference_run_id: None,
        }
    }
}

/// Events a valid batch turns into, in batch order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditPlan {
    pub turn_events: Vec<TurnEvent>,
    pub memory_events: Vec<MemoryEvent>,
    pub applied: AppliedCounts,
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

fn spans_ok(spans: &[TextRange], original: &str) -> bool {
    let len = char_len(original);
    spans.iter().all(|r| r.start <= r.end && r.end <= len)
}

/// Validates `batch` against the current stores. On success returns the
/// events to commit; otherwise one rejection per entry (valid entries are
/// reported as `BatchAborted`).
pub fn plan_batch(
    batch: &EditBatch,
    conversations: &ConversationState,
    memories: &MemoryState,
) -> std::result::Result<EditPlan, Vec<Rejection>> {
    let mut reasons: Vec<Option<RejectReason>> = Vec::with_capacity(batch.entry_count());

    let mut turn_seen: HashMap<&TurnId, usize> = HashMap::new();
    for e in &batch.turn_edits {
        *turn_seen.entry(&e.turn_id).or_default() += 1;
    }
    let mut mem_seen: HashMap<&MemoryId, usize> = HashMap::new();
    for id in batch.memory_edits.iter().map(|e| &e.memory_id).chain(&batch.memory_deletes) {
        *mem_seen.entry(id).or_default() += 1;
    }

    let mut plan = EditPlan {
        turn_events: Vec::new(),
        memory_events: Vec::new(),
        applied: AppliedCounts::default(),
    };

    for e in &batch.turn_edits {
        let reason = match conversations.turns.get(&e.turn_id) {
            _ if turn_seen[&e.turn_id] > 1 => Some(RejectReason::ConflictingEntries),
            None => Some(RejectReason::UnknownTarget),
            Some(t) if t.dialogue_id != batch.dialogue_id => Some(RejectReason::WrongDialogue),
            Some(_) if e.new_text.trim().is_empty() => Some(RejectReason::EmptyText),
            Some(t) if !spans_ok(&e.edited_spans, &t.text) => Some(RejectReason::SpanOutOfBounds),
            Some(t) => {
                plan.turn_events.push(TurnEvent::TurnEdited {
                    id: t.id.clone(),
                    text: e.new_text.clone(),
                    revision: t.revision + 1,
                });
                plan.applied.turn_edits += 1;
                None
            }
        };
        reasons.push(reason);
    }

    let memory_check = |id: &MemoryId| match memories.memories.get(id) {
        _ if mem_seen[id] > 1 => Err(RejectReason::ConflictingEntries),
        None => Err(RejectReason::UnknownTarget),
        Some(m) if m.status == MemoryStatus::Deleted => Err(RejectReason::AlreadyDeleted),
        Some(m) => Ok(m),
    };
    for e in &batch.memory_edits {
        let reason = match memory_check(&e.memory_id) {
            Err(r) => Some(r),
            Ok(_) if e.new_text.trim().is_empty() => Some(RejectReason::EmptyText),
            Ok(m) if !spans_ok(&e.edited_spans, &m.text) => Some(RejectReason::SpanOutOfBounds),
            Ok(m) => {
                plan.memory_events.push(MemoryEvent::MemoryUpdated {
                    id: m.id.clone(),
                    text: e.new_text.clone(),
                    revision: m.revision + 1,
                });
                plan.applied.memory_edits += 1;
                None
            }
        };
        reasons.push(reason);
    }
    for id in &batch.memory_deletes {
        let reason = match memory_check(id) {
            Err(r) => Some(r),
            Ok(m) => {
                plan.memory_events.push(MemoryEvent::MemoryDeleted { id: m.id.clone(), revision: m.revision + 1 });
                plan.applied.memory_deletes += 1;
                None
            }
        };
        reasons.push(reason);
    }

    if reasons.iter().all(Option::is_none) {
        return Ok(plan);
    }
    Err(batch
        .targets()
        .zip(reasons)
        .map(|(target, reason)| Rejection {
            target_id: target.to_owned(),
            reason: reason.unwrap_or(RejectReason::BatchAborted),
        })
        .collect())
}

/// Fraction of edit units that touch highlighted evidence.
///
/// Units are every edited span (covering if it intersects a keyword span of
/// the same source in any open finding) and every memory delete (covering if
/// the memory is a source of some open finding). A batch with no units
/// scores 1.
pub fn coverage_of(batch: &EditBatch, findings: &[&PrivacyFinding]) -> f64 {
    let open: Vec<&PrivacyFinding> = findings.iter().copied().filter(|f| f.is_open()).collect();
    let turn_hit = |id: &TurnId, r: &TextRange| {
        open.iter().any(|f| {
            f.source_turn_refs
                .iter()
                .filter(|s| &s.turn_id == id)
                .flat_map(|s| &s.keyword_spans)
                .any(|k| r.intersects(k.start, k.end))
        })
    };
    let memory_hit = |id: &MemoryId, r: &TextRange| {
        open.iter().any(|f| {
            f.source_memory_refs
                .iter()
                .filter(|s| &s.memory_id == id)
                .flat_map(|s| &s.keyword_spans)
                .any(|k| r.intersects(k.start, k.end))
        })
    };
    let sourced: HashSet<&MemoryId> = open
        .iter()
        .flat_map(|f| f.source_memory_refs.iter().map(|s| &s.memory_id))
        .collect();

    let mut total = 0usize;
    let mut covered = 0usize;
    for e in &batch.turn_edits {
        for r in &e.edited_spans {
            total += 1;
            covered += usize::from(turn_hit(&e.turn_id, r));
        }
    }
    for e in &batch.memory_edits {
        for r in &e.edited_spans {
            total += 1;
            covered += usize::from(memory_hit(&e.memory_id, r));
        }
    }
    for id in &batch.memory_deletes {
        total += 1;
        covered += usize::from(sourced.contains(id));
    }
    if total == 0 {
        1.0
    } else {
        covered as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::{ConversationStore, Role};
    use crate::ids::{Clock, SteppingClock};
    use crate::inference::{FindingStatus, KeywordSpan, MemoryRef, TurnRef};
    use crate::memory::{MemoryStore, Verdict};

    struct World {
        conv: ConversationStore,
        mem: MemoryStore,
        clock: SteppingClock,
    }

    fn world() -> World {
        let clock = SteppingClock::fixed();
        let mut conv = ConversationStore::in_memory();
        conv.create_dialogue("d1".into(), "t".into(), clock.now()).unwrap();
        conv.create_dialogue("d2".into(), "t".into(), clock.now()).unwrap();
        conv.append_turn("t1".into(), &"d1".into(), Role::User, "I live in Leeds with my wife", clock.now())
            .unwrap();
        conv.append_turn("t2".into(), &"d1".into(), Role::User, "My salary is 40k", clock.now())
            .unwrap();
        conv.append_turn("tx".into(), &"d2".into(), Role::User, "other dialogue", clock.now())
            .unwrap();
        let mut mem = MemoryStore::in_memory();
        for (i, text) in ["User lives in Leeds", "User is married"].iter().enumerate() {
            let turn = conv.state().turn(&"t1".into()).unwrap().clone();
            let turn = crate::conversation::Turn { revision: i as u32, ..turn };
            mem.record_extraction(
                &turn,
                &Verdict { store: true, memory_text: text.to_string() },
                MemoryId::new(format!("m{}", i + 1)),
                clock.now(),
            )
            .unwrap();
        }
        World { conv, mem, clock }
    }

    fn batch(w: &World) -> EditBatch {
        EditBatch {
            id: "b1".into(),
            dialogue_id: "d1".into(),
            turn_edits: vec![],
            memory_edits: vec![],
            memory_deletes: vec![],
            submitted_at: w.clock.now(),
        }
    }

    #[test]
    fn happy_path_plans_events() {
        let w = world();
        let mut b = batch(&w);
        b.turn_edits.push(TurnEdit {
            turn_id: "t1".into(),
            new_text: "I live in a city".into(),
            edited_spans: vec![TextRange::new(10, 15)],
        });
        b.memory_deletes.push("m1".into());
        let plan = plan_batch(&b, w.conv.state(), w.mem.state()).unwrap();
        assert_eq!(plan.applied, AppliedCounts { turn_edits: 1, memory_edits: 0, memory_deletes: 1 });
        assert_eq!(
            plan.turn_events,
            vec![TurnEvent::TurnEdited { id: "t1".into(), text: "I live in a city".into(), revision: 1 }]
        );
    }

    #[test]
    fn every_entry_accounted_on_rejection() {
        let w = world();
        let mut b = batch(&w);
        b.turn_edits.push(TurnEdit { turn_id: "t1".into(), new_text: "ok".into(), edited_spans: vec![] });
        b.turn_edits.push(TurnEdit { turn_id: "t99".into(), new_text: "x".into(), edited_spans: vec![] });
        b.turn_edits.push(TurnEdit { turn_id: "tx".into(), new_text: "x".into(), edited_spans: vec![] });
        b.memory_edits.push(MemoryEdit { memory_id: "m1".into(), new_text: "x".into(), edited_spans: vec![] });
        b.memory_deletes.push("m1".into());
        b.memory_deletes.push("m2".into());
        let rej = plan_batch(&b, w.conv.state(), w.mem.state()).unwrap_err();
        let reasons: Vec<_> = rej.iter().map(|r| r.reason).collect();
        assert_eq!(
            reasons,
            vec![
                RejectReason::BatchAborted,
                RejectReason::UnknownTarget,
                RejectReason::WrongDialogue,
                RejectReason::ConflictingEntries,
                RejectReason::ConflictingEntries,
                RejectReason::BatchAborted,
            ]
        );
        assert_eq!(rej.len(), b.entry_count());
    }

    #[test]
    fn spans_and_text_validated() {
        let w = world();
        let mut b = batch(&w);
        b.turn_edits.push(TurnEdit {
            turn_id: "t2".into(),
            new_text: "x".into(),
            edited_spans: vec![TextRange::new(3, 99)],
        });
        b.memory_edits.push(MemoryEdit { memory_id: "m2".into(), new_text: "  ".into(), edited_spans: vec![] });
        let rej = plan_batch(&b, w.conv.state(), w.mem.state()).unwrap_err();
        assert_eq!(rej[0].reason, RejectReason::SpanOutOfBounds);
        assert_eq!(rej[1].reason, RejectReason::EmptyText);
    }

    #[test]
    fn deleted_memory_is_already_deleted() {
        let mut w = world();
        let now = w.clock.now();
        w.mem.delete_memory(&"m1".into(), now).unwrap();
        let mut b = batch(&w);
        b.memory_deletes.push("m1".into());
        let rej = plan_batch(&b, w.conv.state(), w.mem.state()).unwrap_err();
        assert_eq!(rej[0].reason, RejectReason::AlreadyDeleted);
    }

    fn finding_with(turn_spans: Vec<(usize, usize)>, memory: Option<&str>) -> PrivacyFinding {
        let span = |(s, e): (usize, usize)| KeywordSpan { start: s, end: e, surface: "".into() };
        PrivacyFinding {
            id: "f1".into(),
            statement: "s".into(),
            category: "location".into(),
            confidence: 0.5,
            sensitivity: 0.5,
            source_turn_refs: vec![TurnRef { turn_id: "t1".into(), keyword_spans: turn_spans.into_iter().map(span).collect() }],
            source_memory_refs: memory
                .map(|m| vec![MemoryRef { memory_id: m.into(), keyword_spans: vec![span((0, 4))] }])
                .unwrap_or_default(),
            created_at: SteppingClock::fixed().now(),
            status: FindingStatus::Open,
            stale: false,
        }
    }

    fn edit_t1(spans: &[(usize, usize)]) -> EditBatch {
        EditBatch {
            id: "b".into(),
            dialogue_id: "d1".into(),
            turn_edits: vec![TurnEdit {
                turn_id: "t1".into(),
                new_text: "x".into(),
                edited_spans: spans.iter().map(|&(s, e)| TextRange::new(s, e)).collect(),
            }],
            memory_edits: vec![],
            memory_deletes: vec![],
            submitted_at: SteppingClock::fixed().now(),
        }
    }

    #[test]
    fn coverage_full_zero_and_half() {
        let f = finding_with(vec![(10, 15), (25, 29)], None);
        assert_eq!(coverage_of(&edit_t1(&[(10, 15), (24, 26)]), &[&f]), 1.0);
        assert_eq!(coverage_of(&edit_t1(&[(0, 2), (15, 20)]), &[&f]), 0.0);
        assert_eq!(coverage_of(&edit_t1(&[(0, 2), (12, 13), (20, 22), (28, 40)]), &[&f]), 0.5);
    }

    #[test]
    fn coverage_ignores_resolved_and_other_sources() {
        let mut f = finding_with(vec![(10, 15)], None);
        let mut b = edit_t1(&[(10, 15)]);
        b.turn_edits[0].turn_id = "t2".into();
        assert_eq!(coverage_of(&b, &[&f]), 0.0);
        f.status = FindingStatus::Resolved;
        assert_eq!(coverage_of(&edit_t1(&[(10, 15)]), &[&f]), 0.0);
    }

    #[test]
    fn pure_deletes() {
        let f = finding_with(vec![], Some("m1"));
        let mut b = edit_t1(&[]);
        b.turn_edits.clear();
        b.memory_deletes = vec!["m1".into()];
        assert_eq!(coverage_of(&b, &[&f]), 1.0);
        b.memory_deletes.push("m2".into());
        assert_eq!(coverage_of(&b, &[&f]), 0.5);
    }

    #[test]
    fn insertion_points() {
        let r = TextRange::new(12, 12);
        assert!(r.intersects(10, 15));
        assert!(!r.intersects(12, 15));
        assert!(!r.intersects(5, 12));
    }
}
