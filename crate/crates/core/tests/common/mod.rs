#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use privmem::engine::{Engine, EngineOptions, SchedulerMode};
use privmem::ids::{SeededIds, SteppingClock};
use privmem::llm::{mock_provider, LlmClient, Matcher, MockProvider, ProviderConfig, Purpose, ScriptStep};

pub fn fast_config() -> ProviderConfig {
    ProviderConfig { backoff_base: Duration::from_millis(1), retry_limit: 1, ..ProviderConfig::default() }
}

/// Deterministic engine (seeded ids, stepping clock, manual scheduler).
pub fn engine_with(script: Vec<ScriptStep>, seed: u64) -> (Engine, Arc<MockProvider>) {
    let mock = mock_provider(script);
    let engine = Engine::builder(LlmClient::new(mock.clone(), fast_config()))
        .ids(Arc::new(SeededIds::new(seed)))
        .clock(Arc::new(SteppingClock::fixed()))
        .options(EngineOptions { scheduler: SchedulerMode::Manual, ..EngineOptions::default() })
        .build()
        .unwrap();
    (engine, mock)
}

pub fn chat_reply(text: &str) -> ScriptStep {
    ScriptStep::reply(Matcher::purpose(Purpose::Chat), text).repeating()
}

pub fn verdict_for(turn_text: &str, reply: &str) -> ScriptStep {
    ScriptStep::reply(Matcher::purpose(Purpose::MemoryExtraction).and_last_user_contains(turn_text), reply)
}

pub fn always_no() -> ScriptStep {
    ScriptStep::reply(Matcher::purpose(Purpose::MemoryExtraction), r#"{"store": "no"}"#).repeating()
}

pub fn inference(reply: &str) -> ScriptStep {
    ScriptStep::reply(Matcher::purpose(Purpose::PrivacyInference), reply)
}

/// Char offsets of the first occurrence, computed independently of the
/// crate's span code.
pub fn char_span(text: &str, needle: &str) -> (usize, usize) {
    let hay: Vec<char> = text.chars().collect();
    let pat: Vec<char> = needle.chars().collect();
    let start = (0..=hay.len() - pat.len()).find(|&i| hay[i..i + pat.len()] == pat[..]).expect("needle present");
    (start, start + pat.len())
}

pub const SCENARIO_TURNS: [&str; 3] = [
    "I just moved to Lyon for a job at the Croissant Lab.",
    "My doctor says my asthma is getting worse.",
    "Any tips for a weekend hike?",
];

pub struct Scenario {
    pub engine: Engine,
    pub mock: Arc<MockProvider>,
    pub dialogue: privmem::ids::DialogueId,
    pub turns: Vec<privmem::ids::TurnId>,
    pub memory: privmem::ids::MemoryId,
}

/// Three analyzer turns, one "yes" verdict, one two-item inference reply
/// (first item's confidence out of range).
pub fn run_scenario(seed: u64) -> Scenario {
    use privmem::engine::Strategy;
    let (engine, mock) = engine_with(
        vec![
            chat_reply("Sure."),
            verdict_for("moved to Lyon", r#"{"store": "yes", "memory_text": "User lives in Lyon"}"#),
            always_no(),
        ],
        seed,
    );
    let dialogue = engine.create_dialogue("scenario").unwrap();
    let turns: Vec<_> = SCENARIO_TURNS
        .iter()
        .map(|t| engine.handle_user_message(&dialogue, t, Strategy::Analyzer).unwrap().turn_id)
        .collect();
    let memory = engine.extract_memory(&turns[0]).unwrap().expect("yes verdict stores a memory").id;
    mock.push(inference(&format!(
        r#"Here you go:
[
  {{"statement": "User lives in Lyon", "category": "location", "confidence": 1.7,
    "source_inputs": [{{"id": "{t0}", "keywords": ["Lyon"]}}],
    "source_memories": [{{"id": "{m}", "keywords": ["Lyon"]}}]}},
  {{"statement": "User has asthma", "category": "health", "confidence": 0.9,
    "source_inputs": [{{"id": "{t1}", "keywords": ["asthma", "doctor"]}}],
    "source_memories": []}}
]"#,
        t0 = turns[0],
        t1 = turns[1],
        m = memory
    )));
    engine.run_pending();
    Scenario { engine, mock, dialogue, turns, memory }
}
