//! Long-term memory: extraction from user turns, storage with tombstones,
//! and lexical retrieval for response generation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::conversation::{Role, Turn};
use crate::error::{Error, Result};
use crate::ids::{Clock, IdSource, MemoryId, Timestamp, TurnId};
use crate::llm::{ChatMessage, LlmClient, Purpose};
use crate::persistence::{Fold, Journal, Stream, StreamEvent};

/// Memories placed in the generation prompt per reply.
pub const DEFAULT_RETRIEVAL_K: usize = 5;

pub const EXTRACTION_INSTRUCTION: &str = "\
You maintain a long-term memory about the user of a chat assistant.
Read the user's message and decide whether it reveals a durable fact, preference or circumstance about the user that would help in future conversations.

Rules:
1. Only store information about the user, not general knowledge or the task itself.
2. Write the memory as one short self-contained declarative sentence starting with \"User\".
3. If nothing is worth remembering, answer no.

Output exactly one JSON object and nothing else:
{\"store\": \"yes\" or \"no\", \"memory_text\": \"<the memory, or empty when store is no>\"}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryStatus {
    Active,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub id: MemoryId,
    pub text: String,
    pub source_turn_ids: Vec<TurnId>,
    pub created_at: Timestamp,
    pub status: MemoryStatus,
    pub revision: u32,
}

impl MemoryRecord {
    pub fn is_active(&self) -> bool {
        self.status == MemoryStatus::Active
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub memory: MemoryRecord,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum MemoryEvent {
    MemoryCreated(MemoryRecord),
    MemoryUpdated {
        id: MemoryId,
        text: String,
        revision: u32,
    },
    MemoryDeleted {
        id: MemoryId,
        revision: u32,
    },
    /// Marks a (turn, revision) as already run through extraction.
    ExtractionRecorded {
        turn_id: TurnId,
        turn_revision: u32,
        memory_id: Option<MemoryId>,
    },
}

impl StreamEvent for MemoryEvent {
    const STREAM: Stream = Stream::Memories;

    fn entity_id(&self) -> String {
        match self {
            MemoryEvent::MemoryCreated(m) => m.id.to_string(),
            MemoryEvent::MemoryUpdated { id, .. } | MemoryEvent::MemoryDeleted { id, .. } => id.to_string(),
            MemoryEvent::ExtractionRecorded { turn_id, memory_id, .. } => memory_id
                .as_ref()
                .map_or_else(|| turn_id.to_string(), |m| m.to_string()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryState {
    pub memories: BTreeMap<MemoryId, MemoryRecord>,
    /// Creation order, for stable listings.
    pub order: Vec<MemoryId>,
    pub extracted: HashMap<(TurnId, u32), Option<MemoryId>>,
}

impl Fold for MemoryState {
    type Event = MemoryEvent;

    fn apply(&mut self, event: &MemoryEvent) {
        match event {
            MemoryEvent::MemoryCreated(m) => {
                if self.memories.insert(m.id.clone(), m.clone()).is_none() {
                    self.order.push(m.id.clone());
                }
            }
            MemoryEvent::MemoryUpdated { id, text, revision } => {
                if let Some(m) = self.memories.get_mut(id) {
                    m.text = text.clone();
                    m.revision = *revision;
                }
            }
            MemoryEvent::MemoryDeleted { id, revision } => {
                if let Some(m) = self.memories.get_mut(id) {
                    m.status = MemoryStatus::Deleted;
                    m.revision = *revision;
                }
            }
            MemoryEvent::ExtractionRecorded { turn_id, turn_revision, memory_id } => {
                self.extracted.insert((turn_id.clone(), *turn_revision), memory_id.clone());
            }
        }
    }
}

impl MemoryState {
    pub fn get(&self, id: &MemoryId) -> Result<&MemoryRecord> {
        self.memories.get(id).ok_or_else(|| Error::UnknownMemory(id.to_string()))
    }

    pub fn active(&self) -> impl Iterator<Item = &MemoryRecord> {
        self.order
            .iter()
            .filter_map(|id| self.memories.get(id))
            .filter(|m| m.is_active())
    }

    pub fn all(&self) -> impl Iterator<Item = &MemoryRecord> {
        self.order.iter().filter_map(|id| self.memories.get(id))
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievalResult> {
        if k == 0 {
            return Vec::new();
        }
        let q = TermVector::of(query);
        let mut scored: Vec<RetrievalResult> = self
            .active()
            .map(|m| RetrievalResult { score: q.cosine(&TermVector::of(&m.text)), memory: m.clone() })
            .filter(|r| r.score > 0.0)
            .collect();
        scored.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.memory.created_at.cmp(&b.memory.created_at))
                .then_with(|| a.memory.id.cmp(&b.memory.id))
        });
        scored.truncate(k);
        scored
    }
}

/// Case-folds, splits on anything that is not alphanumeric, and folds a
/// trailing plural/third-person `s` (`works` and `work` share a term).
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let lower = t.to_lowercase();
            if lower.chars().count() > 3 && lower.ends_with('s') && !lower.ends_with("ss") {
                lower[..lower.len() - 1].to_owned()
            } else {
                lower
            }
        })
        .collect()
}

/// Term-frequency vector over [`tokenize`] output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TermVector(BTreeMap<String, u32>);

impl TermVector {
    pub fn of(text: &str) -> Self {
        let mut tf = BTreeMap::new();
        for t in tokenize(text) {
            *tf.entry(t).or_insert(0) += 1;
        }
        Self(tf)
    }

    fn norm(&self) -> f64 {
        self.0.values().map(|&n| f64::from(n * n)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        let (small, large) = if self.0.len() <= other.0.len() { (self, other) } else { (other, self) };
        let dot: f64 = small
            .0
            .iter()
            .filter_map(|(t, &a)| large.0.get(t).map(|&b| f64::from(a * b)))
            .sum();
        if dot == 0.0 {
            return 0.0;
        }
        dot / (self.norm() * other.norm())
    }
}

/// Structured yes/no answer from the extraction prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub store: bool,
    pub memory_text: String,
}

pub fn extraction_messages(turn: &Turn) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(EXTRACTION_INSTRUCTION),
        ChatMessage::user(format!("User message:\n{}", turn.text)),
    ]
}

/// Finds the first JSON value in `raw`, tolerating code fences and prose.
pub(crate) fn first_json(raw: &str, open: char) -> Option<Value> {
    let trimmed = raw.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Some(v);
    }
    for (i, _) in raw.match_indices(open) {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            return Some(v);
        }
    }
    None
}

pub fn parse_verdict(raw: &str) -> std::result::Result<Verdict, String> {
    let v = first_json(raw, '{').ok_or("no JSON object in reply")?;
    let obj = v.as_object().ok_or("verdict is not a JSON object")?;
    let store = match obj.get("store") {
        Some(Value::Bool(b)) => *b,
        Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "yes" | "true" => true,
            "no" | "false" => false,
            other => return Err(format!("store must be yes or no, got {other:?}")),
        },
        _ => return Err("missing store field".into()),
    };
    let memory_text = match obj.get("memory_text") {
        Some(Value::String(s)) => s.trim().to_owned(),
        Some(Value::Null) | None => String::new(),
        Some(_) => return Err("memory_text must be a string".into()),
    };
    if store && memory_text.is_empty() {
        return Err("store is yes but memory_text is empty".into());
    }
    Ok(Verdict { store, memory_text })
}

/// Validated mutations over [`MemoryState`], journaled to the memories stream.
#[derive(Debug)]
pub struct MemoryStore {
    state: MemoryState,
    journal: Journal<MemoryEvent>,
}

impl MemoryStore {
    pub fn new(journal: Journal<MemoryEvent>) -> Result<Self> {
        let state = journal.replay()?;
        Ok(Self { state, journal })
    }

    pub fn in_memory() -> Self {
        Self { state: MemoryState::default(), journal: Journal::in_memory() }
    }

    pub fn state(&self) -> &MemoryState {
        &self.state
    }

    pub fn journal(&self) -> &Journal<MemoryEvent> {
        &self.journal
    }

    pub(crate) fn commit(&mut self, event: MemoryEvent, at: Timestamp) -> Result<()> {
        self.journal.append(&event, at)?;
        self.state.apply(&event);
        Ok(())
    }

    /// `Some(result)` when this turn revision was already extracted.
    pub fn already_extracted(&self, turn: &Turn) -> Option<Option<MemoryRecord>> {
        self.state
            .extracted
            .get(&(turn.id.clone(), turn.revision))
            .map(|m| m.as_ref().and_then(|id| self.state.memories.get(id)).filter(|m| m.is_active()).cloned())
    }

    /// Persists the outcome of an extraction call.
    pub fn record_extraction(
        &mut self,
        turn: &Turn,
        verdict: &Verdict,
        id: MemoryId,
        at: Timestamp,
    ) -> Result<Option<MemoryRecord>> {
        if let Some(done) = self.already_extracted(turn) {
            return Ok(done);
        }
        let record = verdict.store.then(|| MemoryRecord {
            id,
            text: verdict.memory_text.clone(),
            source_turn_ids: vec![turn.id.clone()],
            created_at: at,
            status: MemoryStatus::Active,
            revision: 0,
        });
        if let Some(r) = &record {
            self.commit(MemoryEvent::MemoryCreated(r.clone()), at)?;
        }
        self.commit(
            MemoryEvent::ExtractionRecorded {
                turn_id: turn.id.clone(),
                turn_revision: turn.revision,
                memory_id: record.as_ref().map(|r| r.id.clone()),
            },
            at,
        )?;
        Ok(record)
    }

    pub fn retrieve_memories(&self, query: &str, k: usize) -> Vec<RetrievalResult> {
        self.state.retrieve(query, k)
    }

    fn active_or_err(&self, id: &MemoryId) -> Result<&MemoryRecord> {
        let m = self.state.get(id)?;
        if !m.is_active() {
            return Err(Error::AlreadyDeleted(id.to_string()));
        }
        Ok(m)
    }

    pub fn prepare_update(&self, id: &MemoryId, new_text: &str) -> Result<MemoryEvent> {
        let m = self.active_or_err(id)?;
        if new_text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(MemoryEvent::MemoryUpdated { id: id.clone(), text: new_text.to_owned(), revision: m.revision + 1 })
    }

    pub fn prepare_delete(&self, id: &MemoryId) -> Result<MemoryEvent> {
        let m = self.active_or_err(id)?;
        Ok(MemoryEvent::MemoryDeleted { id: id.clone(), revision: m.revision + 1 })
    }

    pub fn update_memory(&mut self, id: &MemoryId, new_text: &str, at: Timestamp) -> Result<MemoryRecord> {
        let ev = self.prepare_update(id, new_text)?;
        self.commit(ev, at)?;
        Ok(self.state.get(id)?.clone())
    }

    pub fn delete_memory(&mut self, id: &MemoryId, at: Timestamp) -> Result<MemoryRecord> {
        let ev = self.prepare_delete(id)?;
        self.commit(ev, at)?;
        Ok(self.state.get(id)?.clone())
    }

    /// Drops every record of deleted memories from the log. Returns the
    /// number of memories purged.
    pub fn purge_deleted(&mut self) -> Result<usize> {
        let dead: std::collections::HashSet<String> = self
            .state
            .memories
            .values()
            .filter(|m| !m.is_active())
            .map(|m| m.id.to_string())
            .collect();
        if dead.is_empty() {
            return Ok(0);
        }
        self.journal.log_mut().rewrite(|r| !dead.contains(&r.entity_id))?;
        self.state = self.journal.replay()?;
        Ok(dead.len())
    }
}

/// Runs extraction for one user turn: asks the provider for a verdict
/// (re-asking once on malformed output) and stores a memory on "yes".
/// Re-running on an already extracted turn revision makes no provider call.
pub fn extract_memory(
    store: &mut MemoryStore,
    turn: &Turn,
    client: &LlmClient,
    ids: &dyn IdSource,
    clock: &dyn Clock,
) -> Result<Option<MemoryRecord>> {
    if turn.role != Role::User {
        return Ok(None);
    }
    if let Some(done) = store.already_extracted(turn) {
        return Ok(done);
    }
    let verdict = request_verdict(turn, client)?;
    store.record_extraction(turn, &verdict, MemoryId::new(ids.next_hex()), clock.now())
}

pub fn request_verdict(turn: &Turn, client: &LlmClient) -> Result<Verdict> {
    let req = client.request(Purpose::MemoryExtraction, extraction_messages(turn));
    client.complete_structured(&req, parse_verdict, Error::MalformedVerdict)
}
