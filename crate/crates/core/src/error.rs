use thiserror::Error;

use crate::persistence::Stream;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dialogue {0}")]
    UnknownDialogue(String),
    #[error("unknown turn {0}")]
    UnknownTurn(String),
    #[error("unknown memory {0}")]
    UnknownMemory(String),
    #[error("unknown finding {0}")]
    UnknownFinding(String),
    #[error("text must not be empty")]
    EmptyText,
    #[error("memory {0} is already deleted")]
    AlreadyDeleted(String),

    #[error("provider failure after {attempts} attempt(s): {message}")]
    ProviderFailure { attempts: u32, message: String },
    #[error("provider timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("provider rejected credentials: {0}")]
    AuthFailure(String),
    #[error("mock provider has no script step matching request: {0}")]
    UnmatchedRequest(String),
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),

    #[error("memory verdict could not be parsed: {0}")]
    MalformedVerdict(String),
    #[error("nothing to infer from: no user turns and no active memories")]
    EmptyInput,
    #[error("provider output does not match the findings schema: {0}")]
    ParseFailure(String),

    #[error("unknown privacy category {0}")]
    UnknownCategory(String),
    #[error("invalid sensitivity table: {0}")]
    InvalidTable(String),

    #[error("invalid {kind} event payload: {reason}")]
    InvalidPayload { kind: String, reason: String },

    #[error("corrupt record in {stream} log at sequence {sequence}: {reason}")]
    CorruptRecord {
        stream: Stream,
        sequence: u64,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Why a single batch entry was refused.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rejection {
    pub target_id: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnknownTarget,
    AlreadyDeleted,
    ConflictingEntries,
    EmptyText,
    SpanOutOfBounds,
    WrongDialogue,
    /// The batch id was already applied.
    AlreadyApplied,
    /// Entry was valid but the batch as a whole was refused.
    BatchAborted,
}

impl Error {
    /// Stable machine-readable name, shared by the HTTP and C surfaces.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnknownDialogue(_) => "unknown_dialogue",
            Error::UnknownTurn(_) => "unknown_turn",
            Error::UnknownMemory(_) => "unknown_memory",
            Error::UnknownFinding(_) => "unknown_finding",
            Error::EmptyText => "empty_text",
            Error::AlreadyDeleted(_) => "already_deleted",
            Error::ProviderFailure { .. } => "provider_failure",
            Error::Timeout { .. } => "timeout",
            Error::AuthFailure(_) => "auth_failure",
            Error::UnmatchedRequest(_) => "unmatched_request",
            Error::InvalidRequest(_) => "invalid_request",
            Error::MalformedVerdict(_) => "malformed_verdict",
            Error::EmptyInput => "empty_input",
            Error::ParseFailure(_) => "parse_failure",
            Error::UnknownCategory(_) => "unknown_category",
            Error::InvalidTable(_) => "invalid_table",
            Error::InvalidPayload { .. } => "invalid_payload",
            Error::CorruptRecord { .. } => "corrupt_record",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
