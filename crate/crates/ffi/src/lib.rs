//! C ABI for the privmem engine.
//!
//! Conventions:
//! * every fallible call returns a [`PrivmemStatus`]; on failure
//!   [`privmem_last_error`] describes it (per thread);
//! * strings in are NUL-terminated UTF-8; strings out are owned by the
//!   caller and released with [`privmem_string_free`];
//! * structured values cross as JSON text with the same shapes as the HTTP
//!   API.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_double, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use privmem::config::Settings;
use privmem::edits::EditBatch;
use privmem::engine::{Engine, EngineOptions, FindingsPoll, Strategy};
use privmem::ids::{DialogueId, SeededIds, SteppingClock};
use privmem::llm::{HttpProvider, LlmClient, MockProvider, ProviderConfig};
use privmem::metrics::{GroupBy, Window};
use privmem::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrivmemStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    /// Dialogue, turn, memory or finding id not found.
    UnknownEntity = 4,
    /// Rejected input: empty text, bad strategy, bad payload, nothing to infer.
    InvalidInput = 5,
    /// Provider failed, rejected credentials, or returned unusable output.
    Provider = 6,
    Timeout = 7,
    /// Log corruption or an I/O failure.
    Storage = 8,
    Config = 9,
    Panic = 10,
}

impl From<&Error> for PrivmemStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::UnknownDialogue(_) | Error::UnknownTurn(_) | Error::UnknownMemory(_) | Error::UnknownFinding(_) => {
                PrivmemStatus::UnknownEntity
            }
            Error::EmptyText
            | Error::AlreadyDeleted(_)
            | Error::InvalidRequest(_)
            | Error::InvalidPayload { .. }
            | Error::UnknownCategory(_)
            | Error::EmptyInput => PrivmemStatus::InvalidInput,
            Error::ProviderFailure { .. }
            | Error::AuthFailure(_)
            | Error::UnmatchedRequest(_)
            | Error::MalformedVerdict(_)
            | Error::ParseFailure(_) => PrivmemStatus::Provider,
            Error::Timeout { .. } => PrivmemStatus::Timeout,
            Error::CorruptRecord { .. } | Error::Io(_) => PrivmemStatus::Storage,
            Error::Json(_) => PrivmemStatus::InvalidJson,
            Error::Config(_) | Error::InvalidTable(_) => PrivmemStatus::Config,
        }
    }
}

/// Opaque engine handle.
pub struct PrivmemEngine {
    engine: Engine,
}

/// An RGBA display color; alpha in [0, 1].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivmemColor {
    pub r: u8,
    pub g: u8,
    pub b: u8,
    pub a: c_double,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PrivmemStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(PrivmemStatus::from(&e), format!("{}: {e}", e.code()))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(PrivmemStatus::InvalidJson, e.to_string())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PrivmemStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrivmemStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PrivmemStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(PrivmemStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PrivmemStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn engine_arg<'a>(p: *const PrivmemEngine) -> Result<&'a Engine, Failure> {
    p.as_ref()
        .map(|h| &h.engine)
        .ok_or_else(|| Failure(PrivmemStatus::NullArgument, "engine is null".into()))
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(PrivmemStatus::NullArgument, "output pointer is null".into()));
    }
    out.write(v);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(PrivmemStatus::InvalidUtf8, "output has a NUL byte".into()))?;
    if out.is_null() {
        return Err(Failure(PrivmemStatus::NullArgument, "output pointer is null".into()));
    }
    out.write(c.into_raw());
    Ok(())
}

unsafe fn write_json(out: *mut *mut c_char, v: &impl serde::Serialize) -> Result<(), Failure> {
    write_string(out, serde_json::to_string(v)?)
}

/// Last error message on this thread, or null. Valid until the next failing
/// call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn privmem_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn privmem_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Engine backed by a scripted mock provider (JSON array of script steps),
/// kept in memory. A non-zero `seed` makes ids and timestamps reproducible.
#[no_mangle]
pub unsafe extern "C" fn privmem_engine_new_mock(
    script_json: *const c_char,
    seed: u64,
    out: *mut *mut PrivmemEngine,
) -> PrivmemStatus {
    guard(|| {
        let script = str_arg(script_json, "script_json")?;
        let provider = Arc::new(MockProvider::from_json(script)?);
        let mut b = Engine::builder(LlmClient::new(provider, ProviderConfig::default()));
        if seed != 0 {
            b = b.ids(Arc::new(SeededIds::new(seed))).clock(Arc::new(SteppingClock::fixed()));
        }
        let engine = b.build()?;
        write_out(out, Box::into_raw(Box::new(PrivmemEngine { engine })))
    })
}

/// Engine talking to the configured HTTP provider. `config_path` may be
/// null; `PRIVMEM_*` environment variables apply either way.
#[no_mangle]
pub unsafe extern "C" fn privmem_engine_open(config_path: *const c_char, out: *mut *mut PrivmemEngine) -> PrivmemStatus {
    guard(|| {
        let path = opt_str_arg(config_path, "config_path")?;
        let settings = Settings::load(path.map(Path::new))?;
        let client = LlmClient::new(Arc::new(HttpProvider::new(&settings.provider)), settings.provider.clone());
        let options = EngineOptions {
            context_turns: settings.context_turns,
            retrieval_k: settings.retrieval_k,
            ..EngineOptions::default()
        };
        let mut b = Engine::builder(client).options(options).table(settings.table()?).fixture(settings.fixture()?);
        if let Some(dir) = &settings.data_dir {
            std::fs::create_dir_all(dir).map_err(Error::from)?;
            b = b.data_dir(dir);
        }
        let engine = b.build()?;
        write_out(out, Box::into_raw(Box::new(PrivmemEngine { engine })))
    })
}

/// Frees an engine. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn privmem_engine_free(engine: *mut PrivmemEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Blocks until background extraction and inference are done.
#[no_mangle]
pub unsafe extern "C" fn privmem_wait_idle(engine: *const PrivmemEngine) -> PrivmemStatus {
    guard(|| {
        engine_arg(engine)?.wait_idle();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn privmem_create_dialogue(
    engine: *const PrivmemEngine,
    title: *const c_char,
    out_id: *mut *mut c_char,
) -> PrivmemStatus {
    guard(|| {
        let e = engine_arg(engine)?;
        let title = opt_str_arg(title, "title")?.unwrap_or("");
        let id = e.create_dialogue(title)?;
        write_string(out_id, id.to_string())
    })
}

/// Sends a user message. `strategy` is `analyzer`, `gpt_like` or `manual`
/// (null means analyzer). Writes the chat response as JSON.
#[no_mangle]
pub unsafe extern "C" fn privmem_send_message(
    engine: *const PrivmemEngine,
    dialogue_id: *const c_char,
    text: *const c_char,
    strategy: *const c_char,
    out_json: *mut *mut c_char,
) -> PrivmemStatus {
    guard(|| {
        let e = engine_arg(engine)?;
        let d = DialogueId::from(str_arg(dialogue_id, "dialogue_id")?);
        let text = str_arg(text, "text")?;
        let strategy = match opt_str_arg(strategy, "strategy")? {
            Some(s) => s.parse::<Strategy>().map_err(|e| Failure(PrivmemStatus::InvalidInput, e.to_string()))?,
            None => Strategy::Analyzer,
        };
        let resp = e.handle_user_message(&d, text, strategy)?;
        write_json(out_json, &resp)
    })
}

/// Writes `{"status": "none"|"pending"|"failed"|"ready", ...}`.
#[no_mangle]
pub unsafe extern "C" fn privmem_findings_json(
    engine: *const PrivmemEngine,
    dialogue_id: *const c_char,
    out_json: *mut *mut c_char,
) -> PrivmemStatus {
    guard(|| {
        let e = engine_arg(engine)?;
        let d = DialogueId::from(str_arg(dialogue_id, "dialogue_id")?);
        let poll = e.findings(&d)?;
        let v = match poll {
            FindingsPoll::Ready { set } => {
                let mut v = serde_json::to_value(privmem::api::FindingSetView::from(set))?;
                v["status"] = "ready".into();
                v
            }
            other => serde_json::to_value(other)?,
        };
        write_json(out_json, &v)
    })
}

/// Applies an edit batch (JSON) and writes the change report. A rejected
/// batch is not an error: check `accepted` in the report.
#[no_mangle]
pub unsafe extern "C" fn privmem_apply_edits_json(
    engine: *const PrivmemEngine,
    batch_json: *const c_char,
    out_json: *mut *mut c_char,
) -> PrivmemStatus {
    guard(|| {
        let e = engine_arg(engine)?;
        let batch: EditBatch = serde_json::from_str(str_arg(batch_json, "batch_json")?)?;
        let report = e.apply_edits(&batch)?;
        write_json(out_json, &report)
    })
}

#[no_mangle]
pub unsafe extern "C" fn privmem_list_memories_json(
    engine: *const PrivmemEngine,
    include_deleted: bool,
    out_json: *mut *mut c_char,
) -> PrivmemStatus {
    guard(|| {
        let e = engine_arg(engine)?;
        write_json(out_json, &e.list_memories(include_deleted))
    })
}

/// `group_by` is `dialogue` or `task`; null means dialogue.
#[no_mangle]
pub unsafe extern "C" fn privmem_metrics_summary_json(
    engine: *const PrivmemEngine,
    group_by: *const c_char,
    out_json: *mut *mut c_char,
) -> PrivmemStatus {
    guard(|| {
        let e = engine_arg(engine)?;
        let g = match opt_str_arg(group_by, "group_by")? {
            Some(s) => s.parse::<GroupBy>()?,
            None => GroupBy::Dialogue,
        };
        write_json(out_json, &e.summarize(&Window::all(), g))
    })
}

/// Sensitivity in [0, 1] of a category under the engine's table.
#[no_mangle]
pub unsafe extern "C" fn privmem_sensitivity_of(
    engine: *const PrivmemEngine,
    category: *const c_char,
    out: *mut c_double,
) -> PrivmemStatus {
    guard(|| {
        let e = engine_arg(engine)?;
        let s = e.table().sensitivity_of(str_arg(category, "category")?)?;
        write_out(out, s)
    })
}

/// Display color for a finding with the given confidence and sensitivity.
#[no_mangle]
pub unsafe extern "C" fn privmem_color_of(confidence: c_double, sensitivity: c_double, out: *mut PrivmemColor) -> PrivmemStatus {
    guard(|| {
        let c = privmem::sensitivity::color_of(confidence, sensitivity);
        write_out(out, PrivmemColor { r: c.r, g: c.g, b: c.b, a: c.a })
    })
}
