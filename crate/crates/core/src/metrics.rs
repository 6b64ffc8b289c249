//! Interaction statistics: Notify, Click, Revise, Use Input, Use Memory,
//! Coverage, plus client-reported timing.
//!
//! The log is append-only; [`summarize`] is a pure fold over it.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ids::{BatchId, DialogueId, EventId, FindingId, RunId, Timestamp};
use crate::persistence::{Fold, Journal, Stream, StreamEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviseTarget {
    TurnEdit,
    MemoryEdit,
    MemoryDelete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventPayload {
    /// A non-empty finding set was shown to the user.
    Notify { run_id: RunId, finding_count: usize },
    Click { finding_id: FindingId },
    /// One applied batch entry, or a direct memory-panel edit (no batch).
    Revise { batch_id: Option<BatchId>, target_id: String, target: ReviseTarget },
    InferenceRun { run_id: RunId, inputs_used: usize, memories_used: usize },
    EditBatch { batch_id: BatchId, coverage: f64, applied: usize },
    PanelOpen { panel: String },
    PanelClose { panel: String },
    /// Client-measured active time for a task.
    SessionTime { seconds: f64 },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::Notify { .. } => "notify",
            EventPayload::Click { .. } => "click",
            EventPayload::Revise { .. } => "revise",
            EventPayload::InferenceRun { .. } => "inference_run",
            EventPayload::EditBatch { .. } => "edit_batch",
            EventPayload::PanelOpen { .. } => "panel_open",
            EventPayload::PanelClose { .. } => "panel_close",
            EventPayload::SessionTime { .. } => "session_time",
        }
    }

    /// Kinds a client may post; the rest are emitted by the service itself.
    pub fn is_client_kind(&self) -> bool {
        matches!(
            self,
            EventPayload::Click { .. }
                | EventPayload::PanelOpen { .. }
                | EventPayload::PanelClose { .. }
                | EventPayload::SessionTime { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub id: EventId,
    pub dialogue_id: DialogueId,
    /// Optional grouping label; defaults to the dialogue.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    pub timestamp: Timestamp,
    pub payload: EventPayload,
}

impl StreamEvent for InteractionEvent {
    const STREAM: Stream = Stream::Metrics;

    fn entity_id(&self) -> String {
        self.id.to_string()
    }

    fn encode(&self) -> Result<(String, Value)> {
        Ok((self.payload.kind().to_owned(), serde_json::to_value(self)?))
    }

    fn decode(_kind: &str, payload: &Value) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_value(payload.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsState {
    pub events: Vec<InteractionEvent>,
    pub applied_batches: BTreeSet<BatchId>,
}

impl Fold for MetricsState {
    type Event = InteractionEvent;

    fn apply(&mut self, event: &InteractionEvent) {
        if let EventPayload::EditBatch { batch_id, .. } = &event.payload {
            self.applied_batches.insert(batch_id.clone());
        }
        self.events.push(event.clone());
    }
}

fn invalid(kind: &str, reason: impl Into<String>) -> Error {
    Error::InvalidPayload { kind: kind.to_owned(), reason: reason.into() }
}

/// Checks payload invariants. `finding_known` answers whether a clicked
/// finding exists.
pub fn validate(event: &InteractionEvent, finding_known: impl Fn(&FindingId) -> bool) -> Result<()> {
    let kind = event.payload.kind();
    match &event.payload {
        EventPayload::Click { finding_id } if !finding_known(finding_id) => {
            Err(invalid(kind, format!("unknown finding {finding_id}")))
        }
        EventPayload::Notify { finding_count: 0, .. } => Err(invalid(kind, "notify requires a non-empty finding set")),
        EventPayload::EditBatch { coverage, .. } if !(0.0..=1.0).contains(coverage) => {
            Err(invalid(kind, format!("coverage {coverage} outside [0, 1]")))
        }
        EventPayload::SessionTime { seconds } if !seconds.is_finite() || *seconds < 0.0 => {
            Err(invalid(kind, format!("bad duration {seconds}")))
        }
        EventPayload::PanelOpen { panel } | EventPayload::PanelClose { panel } if panel.trim().is_empty() => {
            Err(invalid(kind, "panel name is empty"))
        }
        _ => Ok(()),
    }
}

#[derive(Debug)]
pub struct MetricsLog {
    state: MetricsState,
    journal: Journal<InteractionEvent>,
}

impl MetricsLog {
    pub fn new(journal: Journal<InteractionEvent>) -> Result<Self> {
        let state = journal.replay()?;
        Ok(Self { state, journal })
    }

    pub fn in_memory() -> Self {
        Self { state: MetricsState::default(), journal: Journal::in_memory() }
    }

    pub fn state(&self) -> &MetricsState {
        &self.state
    }

    pub fn journal(&self) -> &Journal<InteractionEvent> {
        &self.journal
    }

    pub fn record_event(
        &mut self,
        event: InteractionEvent,
        finding_known: impl Fn(&FindingId) -> bool,
    ) -> Result<EventId> {
        validate(&event, finding_known)?;
        self.journal.append(&event, event.timestamp)?;
        let id = event.id.clone();
        self.state.apply(&event);
        Ok(id)
    }

    pub fn summarize(&self, window: &Window, group_by: GroupBy) -> MetricsSummary {
        summarize(&self.state.events, window, group_by)
    }
}

/// Half-open time range `[start, end)`; unset bounds are unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Option<Timestamp>,
    pub end: Option<Timestamp>,
}

impl Window {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.start.is_none_or(|s| t >= s) && self.end.is_none_or(|e| t < e)
    }
}

/// What counts as one "task" for per-task averages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    Dialogue,
    /// The event's `task_id`, falling back to its dialogue.
    Task,
}

impl std::str::FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dialogue" => Ok(GroupBy::Dialogue),
            "task" => Ok(GroupBy::Task),
            other => Err(Error::Config(format!("unknown group_by {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub notify: usize,
    pub click: usize,
    pub revise: usize,
    pub inference_run: usize,
    pub edit_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub window: Window,
    pub group_by: GroupBy,
    pub dialogues: usize,
    pub tasks: usize,
    pub counts: EventCounts,
    pub notify_per_dialogue: f64,
    pub clicks_per_task: f64,
    pub revises_per_task: f64,
    pub avg_inputs_used: f64,
    pub avg_memories_used: f64,
    pub mean_coverage: f64,
    pub total_time_secs: f64,
    pub privacy_management_time_secs: f64,
    /// Averages whose denominator was zero (reported as 0).
    pub zero_denominators: Vec<String>,
}

fn ratio(num: f64, den: usize, name: &str, zero: &mut Vec<String>) -> f64 {
    if den == 0 {
        zero.push(name.to_owned());
        0.0
    } else {
        num / den as f64
    }
}

/// Folds `events` (in log order) restricted to `window`.
pub fn summarize(events: &[InteractionEvent], window: &Window, group_by: GroupBy) -> MetricsSummary {
    let mut dialogues = BTreeSet::new();
    let mut tasks = BTreeSet::new();
    let mut counts = EventCounts::default();
    let (mut inputs, mut memories, mut coverage) = (0usize, 0usize, 0.0f64);
    let mut total_time = 0.0;
    let mut pm_time = 0.0;
    let mut open_panels: HashMap<(&DialogueId, &str), Timestamp> = HashMap::new();

    for e in events.iter().filter(|e| window.contains(e.timestamp)) {
        dialogues.insert(e.dialogue_id.as_str());
        tasks.insert(match (group_by, &e.task_id) {
            (GroupBy::Task, Some(t)) => t.as_str(),
            _ => e.dialogue_id.as_str(),
        });
        match &e.payload {
            EventPayload::Notify { .. } => counts.notify += 1,
            EventPayload::Click { .. } => counts.click += 1,
            EventPayload::Revise { .. } => counts.revise += 1,
            EventPayload::InferenceRun { inputs_used, memories_used, .. } => {
                counts.inference_run += 1;
                inputs += inputs_used;
                memories += memories_used;
            }
            EventPayload::EditBatch { coverage: c, .. } => {
                counts.edit_batch += 1;
                coverage += c;
            }
            EventPayload::PanelOpen { panel } => {
                open_panels.entry((&e.dialogue_id, panel.as_str())).or_insert(e.timestamp);
            }
            EventPayload::PanelClose { panel } => {
                if let Some(opened) = open_panels.remove(&(&e.dialogue_id, panel.as_str())) {
                    pm_time += (e.timestamp - opened).num_milliseconds().max(0) as f64 / 1000.0;
                }
            }
            EventPayload::SessionTime { seconds } => total_time += seconds,
        }
    }

    let mut zero = Vec::new();
    MetricsSummary {
        window: *window,
        group_by,
        dialogues: dialogues.len(),
        tasks: tasks.len(),
        notify_per_dialogue: ratio(counts.notify as f64, dialogues.len(), "notify_per_dialogue", &mut zero),
        clicks_per_task: ratio(counts.click as f64, tasks.len(), "clicks_per_task", &mut zero),
        revises_per_task: ratio(counts.revise as f64, tasks.len(), "revises_per_task", &mut zero),
        avg_inputs_used: ratio(inputs as f64, counts.inference_run, "avg_inputs_used", &mut zero),
        avg_memories_used: ratio(memories as f64, counts.inference_run, "avg_memories_used", &mut zero),
        mean_coverage: ratio(coverage, counts.edit_batch, "mean_coverage", &mut zero),
        total_time_secs: total_time,
        privacy_management_time_secs: pm_time,
        counts,
        zero_denominators: zero,
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    timestamp: String,
    dialogue_id: &'a str,
    task_id: &'a str,
    kind: &'static str,
    run_id: Option<&'a str>,
    finding_id: Option<&'a str>,
    batch_id: Option<&'a str>,
    target_id: Option<&'a str>,
    target: Option<ReviseTarget>,
    inputs_used: Option<usize>,
    memories_used: Option<usize>,
    finding_count: Option<usize>,
    coverage: Option<f64>,
    applied: Option<usize>,
    panel: Option<&'a str>,
    seconds: Option<f64>,
}

/// One CSV row per event, for offline analysis.
pub fn export_csv<W: std::io::Write>(events: &[InteractionEvent], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        let mut row = CsvRow {
            id: e.id.as_str(),
            timestamp: e.timestamp.to_rfc3339(),
            dialogue_id: e.dialogue_id.as_str(),
            task_id: e.task_id.as_deref().unwrap_or(""),
            kind: e.payload.kind(),
            run_id: None,
            finding_id: None,
            batch_id: None,
            target_id: None,
            target: None,
            inputs_used: None,
            memories_used: None,
            finding_count: None,
            coverage: None,
            applied: None,
            panel: None,
            seconds: None,
        };
        match &e.payload {
            EventPayload::Notify { run_id, finding_count } => {
                row.run_id = Some(run_id.as_str());
                row.finding_count = Some(*finding_count);
            }
            EventPayload::Click { finding_id } => row.finding_id = Some(finding_id.as_str()),
            EventPayload::Revise { batch_id, target_id, target } => {
                row.batch_id = batch_id.as_ref().map(BatchId::as_str);
                row.target_id = Some(target_id);
                row.target = Some(*target);
            }
            EventPayload::InferenceRun { run_id, inputs_used, memories_used } => {
                row.run_id = Some(run_id.as_str());
                row.inputs_used = Some(*inputs_used);
                row.memories_used = Some(*memories_used);
            }
            EventPayload::EditBatch { batch_id, coverage, applied } => {
                row.batch_id = Some(batch_id.as_str());
                row.coverage = Some(*coverage);
                row.applied = Some(*applied);
            }
            EventPayload::PanelOpen { panel } | EventPayload::PanelClose { panel } => row.panel = Some(panel),
            EventPayload::SessionTime { seconds } => row.seconds = Some(*seconds),
        }
        w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-group counts of one kind, used by the audit subcommand and tests.
pub fn count_by_dialogue(events: &[InteractionEvent], kind: &str) -> BTreeMap<DialogueId, usize> {
    let mut out = BTreeMap::new();
    for e in events.iter().filter(|e| e.payload.kind() == kind) {
        *out.entry(e.dialogue_id.clone()).or_insert(0) += 1;
    }
    out
}
