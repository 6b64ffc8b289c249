//! The gateway: chat turns in, replies out, with memory extraction and
//! privacy inference scheduled behind the reply.
//!
//! All store mutations go through one writer lock; provider calls are made
//! with the lock released. Background work runs on a single worker thread
//! (or, in [`SchedulerMode::Manual`], only when [`Engine::run_pending`] is
//! called), extraction before inference for each turn.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};

use serde::{Deserialize, Serialize};

use crate::conversation::{ConversationState, ConversationStore, Role, Turn, DEFAULT_CONTEXT_TURNS};
use crate::edits::{coverage_of, plan_batch, ChangeReport, EditBatch};
use crate::error::{Error, RejectReason, Rejection, Result};
use crate::ids::{Clock, DialogueId, EventId, FindingId, IdSource, MemoryId, RandomIds, RunId, SystemClock, TurnId};
use crate::inference::{
    build_inference_prompt, dedup_findings, parse_findings, FindingSet, FindingState, FindingStore, KeywordSpan,
    PrivacyFinding, PromptFixture, StoreView,
};
use crate::llm::{ChatMessage, LlmClient, Purpose};
use crate::memory::{self, MemoryRecord, MemoryState, MemoryStore, DEFAULT_RETRIEVAL_K};
use crate::metrics::{self, EventPayload, GroupBy, InteractionEvent, MetricsLog, MetricsState, MetricsSummary, ReviseTarget, Window};
use crate::persistence::{Durability, Journal, Stream};
use crate::sensitivity::SensitivityTable;

pub const BASE_SYSTEM_PROMPT: &str = "You are a helpful assistant.";

/// Memory-handling mode for a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Context + memory + privacy inference.
    #[default]
    Analyzer,
    /// Context + memory, no inference.
    GptLike,
    /// Bare message only; the user pastes what they want the model to see.
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub context_enabled: bool,
    pub memory_enabled: bool,
    pub inference_enabled: bool,
}

impl Strategy {
    pub fn config(self) -> StrategyConfig {
        let (context_enabled, memory_enabled, inference_enabled) = match self {
            Strategy::Analyzer => (true, true, true),
            Strategy::GptLike => (true, true, false),
            Strategy::Manual => (false, false, false),
        };
        StrategyConfig { strategy: self, context_enabled, memory_enabled, inference_enabled }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Analyzer => "analyzer",
            Strategy::GptLike => "gpt_like",
            Strategy::Manual => "manual",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analyzer" => Ok(Strategy::Analyzer),
            "gpt_like" | "gpt-like" => Ok(Strategy::GptLike),
            "manual" => Ok(Strategy::Manual),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub assistant_text: String,
    /// The user turn this message created.
    pub turn_id: TurnId,
    pub reply_turn_id: TurnId,
    /// Run to poll for findings; analyzer only.
    pub finding_set_ref: Option<RunId>,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FindingsPoll {
    /// No inference has been requested for this dialogue.
    None,
    Pending { run_id: RunId },
    Failed { run_id: RunId, error: String },
    Ready { set: FindingSet },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputSource {
    pub turn_id: TurnId,
    pub text: String,
    pub revision: u32,
    pub keyword_spans: Vec<KeywordSpan>,
    /// False once the text changed so the spans no longer line up.
    pub spans_current: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorySource {
    pub memory_id: MemoryId,
    pub text: String,
    pub revision: u32,
    pub active: bool,
    pub keyword_spans: Vec<KeywordSpan>,
    pub spans_current: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FindingSources {
    pub finding: PrivacyFinding,
    pub inputs: Vec<InputSource>,
    pub memories: Vec<MemorySource>,
}

/// A client-reported metrics event (click, panel open/close, session time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEvent {
    pub dialogue_id: DialogueId,
    #[serde(default)]
    pub task_id: Option<String>,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SchedulerMode {
    /// A worker thread drains the queue as jobs arrive.
    #[default]
    Background,
    /// Jobs wait until [`Engine::run_pending`] or [`Engine::wait_idle`].
    Manual,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub context_turns: usize,
    pub retrieval_k: usize,
    pub scheduler: SchedulerMode,
    pub durability: Durability,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            context_turns: DEFAULT_CONTEXT_TURNS,
            retrieval_k: DEFAULT_RETRIEVAL_K,
            scheduler: SchedulerMode::Background,
            durability: Durability::Sync,
        }
    }
}

#[derive(Debug)]
pub struct Stores {
    pub conversations: ConversationStore,
    pub memories: MemoryStore,
    pub findings: FindingStore,
    pub metrics: MetricsLog,
}

/// Folded state of all four streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub conversations: ConversationState,
    pub memories: MemoryState,
    pub findings: FindingState,
    pub metrics: MetricsState,
}

#[derive(Debug, Clone)]
enum Job {
    Extract(TurnId),
    Infer { dialogue_id: DialogueId, run_id: RunId, generation: u64 },
}

#[derive(Default)]
struct Queue {
    jobs: VecDeque<Job>,
    outstanding: usize,
    shutdown: bool,
}

struct Scheduler {
    mode: SchedulerMode,
    queue: Mutex<Queue>,
    wake: Condvar,
    idle: Condvar,
}

impl Scheduler {
    fn push(&self, job: Job) {
        let mut q = self.queue.lock().expect("queue poisoned");
        q.jobs.push_back(job);
        q.outstanding += 1;
        self.wake.notify_one();
    }

    fn pop(&self) -> Option<Job> {
        self.queue.lock().expect("queue poisoned").jobs.pop_front()
    }

    fn done(&self) {
        let mut q = self.queue.lock().expect("queue poisoned");
        q.outstanding -= 1;
        if q.outstanding == 0 {
            self.idle.notify_all();
        }
    }
}

#[derive(Default)]
struct InferenceTracking {
    generation: HashMap<DialogueId, u64>,
    pending: HashMap<DialogueId, RunId>,
    failed: HashMap<DialogueId, (RunId, String)>,
}

struct Inner {
    stores: Mutex<Stores>,
    client: LlmClient,
    fixture: PromptFixture,
    table: SensitivityTable,
    ids: Arc<dyn IdSource>,
    clock: Arc<dyn Clock>,
    options: EngineOptions,
    scheduler: Arc<Scheduler>,
    tracking: Mutex<InferenceTracking>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        if let Ok(mut q) = self.scheduler.queue.lock() {
            q.shutdown = true;
        }
        self.scheduler.wake.notify_all();
    }
}

/// Cheap to clone; clones share the same stores and worker.
#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("options", &self.inner.options).finish_non_exhaustive()
    }
}

pub struct EngineBuilder {
    client: LlmClient,
    data_dir: Option<PathBuf>,
    options: EngineOptions,
    fixture: PromptFixture,
    table: SensitivityTable,
    ids: Arc<dyn IdSource>,
    clock: Arc<dyn Clock>,
}

impl EngineBuilder {
    pub fn data_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.data_dir = Some(dir.into());
        self
    }

    pub fn options(mut self, options: EngineOptions) -> Self {
        self.options = options;
        self
    }

    pub fn fixture(mut self, fixture: PromptFixture) -> Self {
        self.fixture = fixture;
        self
    }

    pub fn table(mut self, table: SensitivityTable) -> Self {
        self.table = table;
        self
    }

    pub fn ids(mut self, ids: Arc<dyn IdSource>) -> Self {
        self.ids = ids;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn build(self) -> Result<Engine> {
        self.table.check_covers(self.fixture.category_names())?;
        let stores = match &self.data_dir {
            Some(dir) => open_stores(dir, self.options.durability)?,
            None => Stores {
                conversations: ConversationStore::in_memory(),
                memories: MemoryStore::in_memory(),
                findings: FindingStore::in_memory(),
                metrics: MetricsLog::in_memory(),
            },
        };
        let scheduler = Arc::new(Scheduler {
            mode: self.options.scheduler,
            queue: Mutex::new(Queue::default()),
            wake: Condvar::new(),
            idle: Condvar::new(),
        });
        let inner = Arc::new(Inner {
            stores: Mutex::new(stores),
            client: self.client,
            fixture: self.fixture,
            table: self.table,
            ids: self.ids,
            clock: self.clock,
            options: self.options,
            scheduler: scheduler.clone(),
            tracking: Mutex::new(InferenceTracking::default()),
        });
        if scheduler.mode == SchedulerMode::Background {
            let weak = Arc::downgrade(&inner);
            std::thread::Builder::new()
                .name("privmem-worker".into())
                .spawn(move || worker_loop(scheduler, weak))?;
        }
        Ok(Engine { inner })
    }
}

fn open_stores(dir: &Path, durability: Durability) -> Result<Stores> {
    fn opened<E: crate::persistence::StreamEvent>(dir: &Path, d: Durability) -> Result<Journal<E>> {
        let (j, warnings) = Journal::open(dir, d)?;
        for w in warnings {
            tracing::warn!("{w}");
        }
        Ok(j)
    }
    Ok(Stores {
        conversations: ConversationStore::new(opened(dir, durability)?)?,
        memories: MemoryStore::new(opened(dir, durability)?)?,
        findings: FindingStore::new(opened(dir, durability)?)?,
        metrics: MetricsLog::new(opened(dir, durability)?)?,
    })
}

fn worker_loop(scheduler: Arc<Scheduler>, inner: Weak<Inner>) {
    loop {
        let job = {
            let mut q = scheduler.queue.lock().expect("queue poisoned");
            loop {
                if q.shutdown {
                    return;
                }
                if let Some(job) = q.jobs.pop_front() {
                    break job;
                }
                q = scheduler.wake.wait(q).expect("queue poisoned");
            }
        };
        match inner.upgrade() {
            Some(inner) => Engine { inner }.run_job(job),
            None => return,
        }
        scheduler.done();
    }
}

impl Engine {
    pub fn builder(client: LlmClient) -> EngineBuilder {
        EngineBuilder {
            client,
            data_dir: None,
            options: EngineOptions::default(),
            fixture: PromptFixture::default(),
            table: SensitivityTable::default(),
            ids: Arc::new(RandomIds),
            clock: Arc::new(SystemClock),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Stores> {
        self.inner.stores.lock().expect("store lock poisoned")
    }

    fn new_id(&self) -> String {
        self.inner.ids.next_hex()
    }

    pub fn options(&self) -> &EngineOptions {
        &self.inner.options
    }

    pub fn table(&self) -> &SensitivityTable {
        &self.inner.table
    }

    pub fn fixture(&self) -> &PromptFixture {
        &self.inner.fixture
    }

    pub fn client(&self) -> &LlmClient {
        &self.inner.client
    }

    /// Runs `f` with shared read access to the stores.
    pub fn read<T>(&self, f: impl FnOnce(&Stores) -> T) -> T {
        f(&self.lock())
    }

    // -- dialogues ---------------------------------------------------------

    pub fn create_dialogue(&self, title: &str) -> Result<DialogueId> {
        let id = DialogueId::new(self.new_id());
        let now = self.inner.clock.now();
        self.lock().conversations.create_dialogue(id, title.to_owned(), now)
    }

    pub fn append_turn(&self, dialogue_id: &DialogueId, role: Role, text: &str) -> Result<TurnId> {
        let id = TurnId::new(self.new_id());
        let now = self.inner.clock.now();
        self.lock().conversations.append_turn(id, dialogue_id, role, text, now)
    }

    pub fn turn(&self, id: &TurnId) -> Result<Turn> {
        self.lock().conversations.state().turn(id).cloned()
    }

    pub fn turns(&self, dialogue_id: &DialogueId) -> Result<Vec<Turn>> {
        Ok(self.lock().conversations.state().turns_of(dialogue_id)?.into_iter().cloned().collect())
    }

    pub fn update_turn_text(&self, id: &TurnId, text: &str) -> Result<Turn> {
        let now = self.inner.clock.now();
        self.lock().conversations.update_turn_text(id, text, now)
    }

    // -- chat --------------------------------------------------------------

    fn generation_messages(&self, stores: &Stores, dialogue_id: &DialogueId, text: &str, cfg: StrategyConfig) -> Result<Vec<ChatMessage>> {
        let mut system = String::from(BASE_SYSTEM_PROMPT);
        if cfg.memory_enabled {
            let retrieved = stores.memories.retrieve_memories(text, self.inner.options.retrieval_k);
            if !retrieved.is_empty() {
                system.push_str("\n\nKnown about the user:\n");
                for r in retrieved {
                    system.push_str("- ");
                    system.push_str(&r.memory.text);
                    system.push('\n');
                }
            }
        }
        let mut messages = vec![ChatMessage::system(system)];
        if cfg.context_enabled {
            let window = stores.conversations.get_context(dialogue_id, self.inner.options.context_turns)?;
            messages.extend(window.turns.iter().map(|t| match t.role {
                Role::User => ChatMessage::user(&t.text),
                Role::Assistant => ChatMessage::assistant(&t.text),
            }));
        } else {
            messages.push(ChatMessage::user(text));
        }
        Ok(messages)
    }

    /// Appends the user turn, generates and stores the reply, then schedules
    /// extraction/inference per `strategy`. Never waits on background work.
    pub fn handle_user_message(&self, dialogue_id: &DialogueId, text: &str, strategy: Strategy) -> Result<ChatResponse> {
        let cfg = strategy.config();
        let (turn_id, messages) = {
            let mut stores = self.lock();
            let id = TurnId::new(self.new_id());
            let now = self.inner.clock.now();
            let turn_id = stores.conversations.append_turn(id, dialogue_id, Role::User, text, now)?;
            let messages = self.generation_messages(&stores, dialogue_id, text, cfg)?;
            (turn_id, messages)
        };
        let request = self.inner.client.request(Purpose::Chat, messages);
        let reply = self.inner.client.complete(&request)?;
        if reply.trim().is_empty() {
            return Err(Error::ProviderFailure { attempts: 1, message: "empty reply".into() });
        }
        let reply_turn_id = self.append_turn(dialogue_id, Role::Assistant, &reply)?;

        if cfg.memory_enabled {
            self.inner.scheduler.push(Job::Extract(turn_id.clone()));
        }
        let finding_set_ref = cfg.inference_enabled.then(|| self.schedule_inference(dialogue_id));
        Ok(ChatResponse { assistant_text: reply, turn_id, reply_turn_id, finding_set_ref, strategy })
    }

    // -- background work ---------------------------------------------------

    /// Queues an inference run, superseding any queued or running one.
    pub fn schedule_inference(&self, dialogue_id: &DialogueId) -> RunId {
        let run_id = RunId::new(self.new_id());
        let generation = {
            let mut t = self.inner.tracking.lock().expect("tracking poisoned");
            let g = t.generation.entry(dialogue_id.clone()).or_insert(0);
            *g += 1;
            let g = *g;
            t.pending.insert(dialogue_id.clone(), run_id.clone());
            g
        };
        self.inner.scheduler.push(Job::Infer { dialogue_id: dialogue_id.clone(), run_id: run_id.clone(), generation });
        run_id
    }

    fn is_current(&self, dialogue_id: &DialogueId, generation: u64) -> bool {
        let t = self.inner.tracking.lock().expect("tracking poisoned");
        t.generation.get(dialogue_id).copied().unwrap_or(0) == generation
    }

    fn run_job(&self, job: Job) {
        match job {
            Job::Extract(turn_id) => {
                if let Err(e) = self.extract_memory(&turn_id) {
                    tracing::warn!(turn = %turn_id, error = %e, "memory extraction failed");
                }
            }
            Job::Infer { dialogue_id, run_id, generation } => {
                if !self.is_current(&dialogue_id, generation) {
                    tracing::debug!(dialogue = %dialogue_id, run = %run_id, "inference superseded before start");
                    return;
                }
                let outcome = self.run_inference(&dialogue_id, run_id.clone(), Some(generation));
                let mut t = self.inner.tracking.lock().expect("tracking poisoned");
                if t.generation.get(&dialogue_id).copied() != Some(generation) {
                    return;
                }
                t.pending.remove(&dialogue_id);
                match outcome {
                    Ok(_) => {
                        t.failed.remove(&dialogue_id);
                    }
                    Err(e) => {
                        tracing::warn!(dialogue = %dialogue_id, run = %run_id, error = %e, "privacy inference failed");
                        t.failed.insert(dialogue_id, (run_id, e.to_string()));
                    }
                }
            }
        }
    }

    /// Drains queued jobs on the calling thread (manual mode).
    pub fn run_pending(&self) {
        while let Some(job) = self.inner.scheduler.pop() {
            self.run_job(job);
            self.inner.scheduler.done();
        }
    }

    /// Blocks until no background job is queued or running.
    pub fn wait_idle(&self) {
        if self.inner.scheduler.mode == SchedulerMode::Manual {
            self.run_pending();
            return;
        }
        let mut q = self.inner.scheduler.queue.lock().expect("queue poisoned");
        while q.outstanding > 0 {
            q = self.inner.scheduler.idle.wait(q).expect("queue poisoned");
        }
    }

    pub fn pending_jobs(&self) -> usize {
        self.inner.scheduler.queue.lock().expect("queue poisoned").outstanding
    }

    // -- memory ------------------------------------------------------------

    /// Extracts at most one memory from a user turn (idempotent per revision).
    pub fn extract_memory(&self, turn_id: &TurnId) -> Result<Option<MemoryRecord>> {
        let turn = {
            let stores = self.lock();
            let turn = stores.conversations.state().turn(turn_id)?.clone();
            if turn.role != Role::User {
                return Ok(None);
            }
            if let Some(done) = stores.memories.already_extracted(&turn) {
                return Ok(done);
            }
            turn
        };
        let verdict = memory::request_verdict(&turn, &self.inner.client)?;
        let id = MemoryId::new(self.new_id());
        let now = self.inner.clock.now();
        self.lock().memories.record_extraction(&turn, &verdict, id, now)
    }

    pub fn retrieve_memories(&self, query: &str, k: usize) -> Vec<crate::memory::RetrievalResult> {
        self.lock().memories.retrieve_memories(query, k)
    }

    pub fn list_memories(&self, include_deleted: bool) -> Vec<MemoryRecord> {
        let stores = self.lock();
        let state = stores.memories.state();
        if include_deleted {
            state.all().cloned().collect()
        } else {
            state.active().cloned().collect()
        }
    }

    fn memory_dialogue(stores: &Stores, m: &MemoryRecord) -> Option<DialogueId> {
        m.source_turn_ids
            .iter()
            .find_map(|t| stores.conversations.state().turns.get(t))
            .map(|t| t.dialogue_id.clone())
    }

    /// Dialogues whose latest findings cite `memory_id`.
    fn dialogues_citing(stores: &Stores, memory_id: &MemoryId) -> Vec<DialogueId> {
        stores
            .findings
            .state()
            .latest
            .iter()
            .filter(|(_, set)| {
                set.findings
                    .iter()
                    .any(|f| f.source_memory_refs.iter().any(|r| &r.memory_id == memory_id))
            })
            .map(|(d, _)| d.clone())
            .collect()
    }

    fn memory_panel_change(&self, memory_id: &MemoryId, new_text: Option<&str>) -> Result<MemoryRecord> {
        let (record, affected) = {
            let mut stores = self.lock();
            let now = self.inner.clock.now();
            let (record, target) = match new_text {
                Some(text) => (stores.memories.update_memory(memory_id, text, now)?, ReviseTarget::MemoryEdit),
                None => (stores.memories.delete_memory(memory_id, now)?, ReviseTarget::MemoryDelete),
            };
            let affected = Self::dialogues_citing(&stores, memory_id);
            let owner = Self::memory_dialogue(&stores, &record).or_else(|| affected.first().cloned());
            if let Some(dialogue_id) = owner {
                let ev = InteractionEvent {
                    id: EventId::new(self.new_id()),
                    dialogue_id,
                    task_id: None,
                    timestamp: now,
                    payload: EventPayload::Revise { batch_id: None, target_id: memory_id.to_string(), target },
                };
                stores.metrics.record_event(ev, |_| true)?;
            }
            for d in &affected {
                stores.findings.mark_stale(d, now)?;
            }
            (record, affected)
        };
        for d in &affected {
            self.schedule_inference(d);
        }
        Ok(record)
    }

    pub fn update_memory(&self, memory_id: &MemoryId, text: &str) -> Result<MemoryRecord> {
        self.memory_panel_change(memory_id, Some(text))
    }

    pub fn delete_memory(&self, memory_id: &MemoryId) -> Result<MemoryRecord> {
        self.memory_panel_change(memory_id, None)
    }

    pub fn purge_deleted(&self) -> Result<usize> {
        self.lock().memories.purge_deleted()
    }

    // -- privacy inference -------------------------------------------------

    /// Runs one inference synchronously over all user turns of the dialogue
    /// and all active memories, then persists the resulting set.
    pub fn infer_privacy(&self, dialogue_id: &DialogueId) -> Result<FindingSet> {
        let run_id = RunId::new(self.new_id());
        self.run_inference(dialogue_id, run_id, None)
    }

    /// The request an inference run would send right now.
    pub fn build_inference_request(&self, dialogue_id: &DialogueId) -> Result<crate::llm::CompletionRequest> {
        let (turns, memories) = self.inference_inputs(dialogue_id)?;
        let built = build_inference_prompt(
            &turns.iter().collect::<Vec<_>>(),
            &memories.iter().collect::<Vec<_>>(),
            &self.inner.fixture,
        )?;
        Ok(self.inner.client.request(Purpose::PrivacyInference, built.messages))
    }

    fn inference_inputs(&self, dialogue_id: &DialogueId) -> Result<(Vec<Turn>, Vec<MemoryRecord>)> {
        let stores = self.lock();
        let turns = stores
            .conversations
            .state()
            .user_turns_of(dialogue_id)?
            .into_iter()
            .cloned()
            .collect();
        let memories = stores.memories.state().active().cloned().collect();
        Ok((turns, memories))
    }

    fn run_inference(&self, dialogue_id: &DialogueId, run_id: RunId, generation: Option<u64>) -> Result<FindingSet> {
        let (turns, memories) = self.inference_inputs(dialogue_id)?;
        let request = self.build_inference_request_from(&turns, &memories)?;
        let view = StoreView {
            turns: turns.iter().map(|t| (t.id.clone(), t.text.clone())).collect(),
            memories: memories.iter().map(|m| (m.id.clone(), m.text.clone())).collect(),
            categories: self.inner.fixture.category_names().map(str::to_owned).collect(),
            table: &self.inner.table,
            ids: self.inner.ids.as_ref(),
            now: self.inner.clock.now(),
        };
        let (findings, warnings) = self.inner.client.complete_structured(
            &request,
            |raw| {
                parse_findings(raw, &view).map_err(|e| match e {
                    Error::ParseFailure(m) => m,
                    other => other.to_string(),
                })
            },
            Error::ParseFailure,
        )?;
        for w in &warnings {
            tracing::warn!(run = %run_id, kind = ?w.kind, item = ?w.item, "{}", w.detail);
        }
        let findings = dedup_findings(findings);

        let mut stores = self.lock();
        if let Some(g) = generation {
            if !self.is_current(dialogue_id, g) {
                return Err(Error::ProviderFailure { attempts: 0, message: "superseded by a newer run".into() });
            }
        }
        let findings = Self::revalidate(&stores, &view, findings);
        let set = FindingSet {
            dialogue_id: dialogue_id.clone(),
            inference_run_id: run_id.clone(),
            inputs_used: turns.len(),
            memories_used: memories.len(),
            created_at: view.now,
            findings,
        };
        let set = stores.findings.persist(set)?;
        let inference_event = InteractionEvent {
            id: EventId::new(self.new_id()),
            dialogue_id: dialogue_id.clone(),
            task_id: None,
            timestamp: set.created_at,
            payload: EventPayload::InferenceRun {
                run_id: run_id.clone(),
                inputs_used: set.inputs_used,
                memories_used: set.memories_used,
            },
        };
        stores.metrics.record_event(inference_event, |_| true)?;
        if !set.findings.is_empty() {
            let notify = InteractionEvent {
                id: EventId::new(self.new_id()),
                dialogue_id: dialogue_id.clone(),
                task_id: None,
                timestamp: set.created_at,
                payload: EventPayload::Notify { run_id, finding_count: set.findings.len() },
            };
            stores.metrics.record_event(notify, |_| true)?;
        }
        Ok(set)
    }

    fn build_inference_request_from(&self, turns: &[Turn], memories: &[MemoryRecord]) -> Result<crate::llm::CompletionRequest> {
        let built = build_inference_prompt(
            &turns.iter().collect::<Vec<_>>(),
            &memories.iter().collect::<Vec<_>>(),
            &self.inner.fixture,
        )?;
        Ok(self.inner.client.request(Purpose::PrivacyInference, built.messages))
    }

    /// Drops references to sources that were edited or deleted while the
    /// provider was working, and findings left with no source.
    fn revalidate(stores: &Stores, view: &StoreView<'_>, findings: Vec<PrivacyFinding>) -> Vec<PrivacyFinding> {
        let conv = stores.conversations.state();
        let mem = stores.memories.state();
        findings
            .into_iter()
            .filter_map(|mut f| {
                f.source_turn_refs
                    .retain(|r| conv.turns.get(&r.turn_id).map(|t| &t.text) == view.turns.get(&r.turn_id));
                f.source_memory_refs.retain(|r| {
                    mem.memories
                        .get(&r.memory_id)
                        .filter(|m| m.is_active())
                        .map(|m| &m.text)
                        == view.memories.get(&r.memory_id)
                });
                f.has_sources().then_some(f)
            })
            .collect()
    }

    pub fn findings(&self, dialogue_id: &DialogueId) -> Result<FindingsPoll> {
        let stores = self.lock();
        stores.conversations.state().dialogue(dialogue_id)?;
        let t = self.inner.tracking.lock().expect("tracking poisoned");
        if let Some(run_id) = t.pending.get(dialogue_id) {
            return Ok(FindingsPoll::Pending { run_id: run_id.clone() });
        }
        if let Some((run_id, error)) = t.failed.get(dialogue_id) {
            return Ok(FindingsPoll::Failed { run_id: run_id.clone(), error: error.clone() });
        }
        Ok(match stores.findings.state().latest(dialogue_id) {
            Some(set) => FindingsPoll::Ready { set: set.clone() },
            None => FindingsPoll::None,
        })
    }

    pub fn latest_findings(&self, dialogue_id: &DialogueId) -> Option<FindingSet> {
        self.lock().findings.state().latest(dialogue_id).cloned()
    }

    pub fn resolve_finding(&self, finding_id: &FindingId) -> Result<PrivacyFinding> {
        let now = self.inner.clock.now();
        self.lock().findings.resolve(finding_id, now)
    }

    pub fn sources_of(&self, finding_id: &FindingId) -> Result<FindingSources> {
        let stores = self.lock();
        let finding = stores
            .findings
            .state()
            .find(finding_id)
            .cloned()
            .ok_or_else(|| Error::UnknownFinding(finding_id.to_string()))?;
        let conv = stores.conversations.state();
        let mem = stores.memories.state();
        let inputs = finding
            .source_turn_refs
            .iter()
            .filter_map(|r| {
                let t = conv.turns.get(&r.turn_id)?;
                Some(InputSource {
                    turn_id: t.id.clone(),
                    text: t.text.clone(),
                    revision: t.revision,
                    spans_current: r.keyword_spans.iter().all(|s| s.matches(&t.text)),
                    keyword_spans: r.keyword_spans.clone(),
                })
            })
            .collect();
        let memories = finding
            .source_memory_refs
            .iter()
            .filter_map(|r| {
                let m = mem.memories.get(&r.memory_id)?;
                Some(MemorySource {
                    memory_id: m.id.clone(),
                    text: m.text.clone(),
                    revision: m.revision,
                    active: m.is_active(),
                    spans_current: r.keyword_spans.iter().all(|s| s.matches(&m.text)),
                    keyword_spans: r.keyword_spans.clone(),
                })
            })
            .collect();
        Ok(FindingSources { finding, inputs, memories })
    }

    // -- edits -------------------------------------------------------------

    /// Applies a batch all-or-nothing. A rejected batch changes nothing and
    /// is reported with one reason per entry.
    pub fn apply_edits(&self, batch: &EditBatch) -> Result<ChangeReport> {
        let (report, changed) = {
            let mut stores = self.lock();
            stores.conversations.state().dialogue(&batch.dialogue_id)?;
            let open = stores.findings.state().open_findings(&batch.dialogue_id);
            let coverage = coverage_of(batch, &open);
            if stores.metrics.state().applied_batches.contains(&batch.id) {
                let rejected = batch
                    .targets()
                    .map(|t| Rejection { target_id: t.to_owned(), reason: RejectReason::AlreadyApplied })
                    .collect();
                return Ok(ChangeReport::rejected(batch, rejected, coverage));
            }
            let plan = match plan_batch(batch, stores.conversations.state(), stores.memories.state()) {
                Ok(plan) => plan,
                Err(rejected) => return Ok(ChangeReport::rejected(batch, rejected, coverage)),
            };
            let applied = plan.applied;
            if applied.total() > 0 {
                let now = self.inner.clock.now();
                for ev in plan.turn_events {
                    stores.conversations.commit(ev, now)?;
                }
                for ev in plan.memory_events {
                    stores.memories.commit(ev, now)?;
                }
                let entries = batch
                    .turn_edits
                    .iter()
                    .map(|e| (e.turn_id.to_string(), ReviseTarget::TurnEdit))
                    .chain(batch.memory_edits.iter().map(|e| (e.memory_id.to_string(), ReviseTarget::MemoryEdit)))
                    .chain(batch.memory_deletes.iter().map(|m| (m.to_string(), ReviseTarget::MemoryDelete)));
                for (target_id, target) in entries {
                    let ev = InteractionEvent {
                        id: EventId::new(self.new_id()),
                        dialogue_id: batch.dialogue_id.clone(),
                        task_id: None,
                        timestamp: now,
                        payload: EventPayload::Revise { batch_id: Some(batch.id.clone()), target_id, target },
                    };
                    stores.metrics.record_event(ev, |_| true)?;
                }
                let ev = InteractionEvent {
                    id: EventId::new(self.new_id()),
                    dialogue_id: batch.dialogue_id.clone(),
                    task_id: None,
                    timestamp: now,
                    payload: EventPayload::EditBatch {
                        batch_id: batch.id.clone(),
                        coverage,
                        applied: applied.total(),
                    },
                };
                stores.metrics.record_event(ev, |_| true)?;
                stores.findings.mark_stale(&batch.dialogue_id, now)?;
            }
            let report = ChangeReport {
                batch_id: batch.id.clone(),
                accepted: true,
                applied,
                rejected: Vec::new(),
                coverage,
                reinference_run_id: None,
            };
            (report, applied.total() > 0)
        };
        let reinference_run_id = changed.then(|| self.schedule_inference(&batch.dialogue_id));
        Ok(ChangeReport { reinference_run_id, ..report })
    }

    pub fn new_batch_id(&self) -> crate::ids::BatchId {
        crate::ids::BatchId::new(self.new_id())
    }

    pub fn now(&self) -> crate::ids::Timestamp {
        self.inner.clock.now()
    }

    // -- metrics -----------------------------------------------------------

    pub fn record_client_event(&self, event: ClientEvent) -> Result<EventId> {
        if !event.payload.is_client_kind() {
            return Err(Error::InvalidPayload {
                kind: event.payload.kind().to_owned(),
                reason: "only click, panel_open, panel_close and session_time may be posted".into(),
            });
        }
        let mut stores = self.lock();
        stores.conversations.state().dialogue(&event.dialogue_id)?;
        let ev = InteractionEvent {
            id: EventId::new(self.new_id()),
            dialogue_id: event.dialogue_id,
            task_id: event.task_id,
            timestamp: self.inner.clock.now(),
            payload: event.payload,
        };
        let Stores { findings, metrics, .. } = &mut *stores;
        metrics.record_event(ev, |f| findings.state().known.contains_key(f))
    }

    pub fn summarize(&self, window: &Window, group_by: GroupBy) -> MetricsSummary {
        self.lock().metrics.summarize(window, group_by)
    }

    pub fn metrics_events(&self) -> Vec<InteractionEvent> {
        self.lock().metrics.state().events.clone()
    }

    pub fn export_metrics_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        metrics::export_csv(&self.lock().metrics.state().events, out)
    }

    // -- state inspection --------------------------------------------------

    pub fn snapshot(&self) -> Snapshot {
        let s = self.lock();
        Snapshot {
            conversations: s.conversations.state().clone(),
            memories: s.memories.state().clone(),
            findings: s.findings.state().clone(),
            metrics: s.metrics.state().clone(),
        }
    }

    /// State rebuilt from the logs alone.
    pub fn replayed_snapshot(&self) -> Result<Snapshot> {
        let s = self.lock();
        Ok(Snapshot {
            conversations: s.conversations.journal().replay()?,
            memories: s.memories.journal().replay()?,
            findings: s.findings.journal().replay()?,
            metrics: s.metrics.journal().replay()?,
        })
    }

    /// Every stream serialized exactly as on disk.
    pub fn log_bytes(&self) -> Result<BTreeMap<&'static str, Vec<u8>>> {
        let s = self.lock();
        let mut out = BTreeMap::new();
        out.insert(Stream::Turns.as_str(), s.conversations.journal().log().to_jsonl()?);
        out.insert(Stream::Memories.as_str(), s.memories.journal().log().to_jsonl()?);
        out.insert(Stream::Findings.as_str(), s.findings.journal().log().to_jsonl()?);
        out.insert(Stream::Metrics.as_str(), s.metrics.journal().log().to_jsonl()?);
        Ok(out)
    }
}
