//! Append-only, line-delimited event logs.
//!
//! Each stream lives in `<data-dir>/<stream>.log`, one JSON record per line:
//!
//! ```text
//! {"sequence":1,"stream":"turns","kind":"turn_appended","entity_id":"…","payload":{…},"timestamp":"…","checksum":"…"}
//! ```
//!
//! `checksum` is the first 16 hex digits of SHA-256 over
//! `sequence \n stream \n kind \n entity_id \n timestamp \n payload-json`.
//! A store's state is the deterministic fold of its stream.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use chrono::SecondsFormat;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ids::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Turns,
    Memories,
    Findings,
    Metrics,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::Turns, Stream::Memories, Stream::Findings, Stream::Metrics];

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Turns => "turns",
            Stream::Memories => "memories",
            Stream::Findings => "findings",
            Stream::Metrics => "metrics",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.log", self.as_str())
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub sequence: u64,
    pub stream: Stream,
    pub kind: String,
    pub entity_id: String,
    pub payload: Value,
    pub timestamp: Timestamp,
    pub checksum: String,
}

impl LogRecord {
    pub fn new(
        sequence: u64,
        stream: Stream,
        kind: impl Into<String>,
        entity_id: impl Into<String>,
        payload: Value,
        timestamp: Timestamp,
    ) -> Self {
        let mut rec = Self {
            sequence,
            stream,
            kind: kind.into(),
            entity_id: entity_id.into(),
            payload,
            timestamp,
            checksum: String::new(),
        };
        rec.checksum = rec.compute_checksum();
        rec
    }

    pub fn compute_checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.sequence.to_string());
        h.update(b"\n");
        h.update(self.stream.as_str());
        h.update(b"\n");
        h.update(&self.kind);
        h.update(b"\n");
        h.update(&self.entity_id);
        h.update(b"\n");
        h.update(self.timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true));
        h.update(b"\n");
        h.update(self.payload.to_string());
        hex::encode(&h.finalize()[..8])
    }

    pub fn verify(&self) -> bool {
        self.checksum == self.compute_checksum()
    }
}

/// Whether an append is fsync'd before it is acknowledged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    #[default]
    Sync,
    /// Flushed to the OS only. Used by tests and throwaway runs.
    Flush,
}

/// Outcome of reading a log back from disk.
#[derive(Debug, Default)]
pub struct Replay {
    pub records: Vec<LogRecord>,
    pub warnings: Vec<String>,
    /// Byte length of the valid prefix.
    valid_len: u64,
}

/// Reads and validates a stream file. A final line with no terminating
/// newline that fails to decode is treated as a torn write: the valid prefix
/// is returned with a warning. Any other bad line is a `CorruptRecord`.
pub fn replay_file(path: &Path, stream: Stream) -> Result<Replay> {
    let mut out = Replay::default();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    let mut last_seq = 0u64;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        let complete = buf.last() == Some(&b'\n');
        let line = if complete { &buf[..n - 1] } else { &buf[..] };
        if line.iter().all(u8::is_ascii_whitespace) && complete {
            out.valid_len += n as u64;
            continue;
        }
        let decoded = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<LogRecord>(s).map_err(|e| e.to_string()));
        let rec = match decoded {
            Ok(rec) => rec,
            Err(reason) if !complete => {
                out.warnings.push(format!(
                    "{stream} log: discarded torn trailing record after sequence {last_seq} ({reason})"
                ));
                break;
            }
            Err(reason) => {
                return Err(Error::CorruptRecord {
                    stream,
                    sequence: last_seq + 1,
                    reason,
                })
            }
        };
        if !rec.verify() {
            return Err(Error::CorruptRecord {
                stream,
                sequence: rec.sequence,
                reason: "checksum mismatch".into(),
            });
        }
        if rec.stream != stream || rec.sequence <= last_seq {
            return Err(Error::CorruptRecord {
                stream,
                sequence: rec.sequence,
                reason: format!("out-of-order or foreign record after sequence {last_seq}"),
            });
        }
        last_seq = rec.sequence;
        out.valid_len += n as u64;
        out.records.push(rec);
    }
    Ok(out)
}

/// One stream's log. Records are kept in memory as well as (optionally) on
/// disk, so the log can be re-folded without touching the file.
#[derive(Debug)]
pub struct EventLog {
    stream: Stream,
    records: Vec<LogRecord>,
    file: Option<(PathBuf, File)>,
    durability: Durability,
}

impl EventLog {
    pub fn in_memory(stream: Stream) -> Self {
        Self {
            stream,
            records: Vec::new(),
            file: None,
            durability: Durability::Flush,
        }
    }

    /// Opens (creating if needed) `<dir>/<stream>.log`, replaying what is
    /// there. A torn tail is cut off so later appends start on a clean line.
    pub fn open(dir: &Path, stream: Stream, durability: Durability) -> Result<(Self, Vec<String>)> {
        fs::create_dir_all(dir)?;
        let path = dir.join(stream.file_name());
        let replay = replay_file(&path, stream)?;
        let file = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        if file.metadata()?.len() != replay.valid_len {
            file.set_len(replay.valid_len)?;
        }
        Ok((
            Self {
                stream,
                records: replay.records,
                file: Some((path, file)),
                durability,
            },
            replay.warnings,
        ))
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn last_sequence(&self) -> u64 {
        self.records.last().map_or(0, |r| r.sequence)
    }

    /// Appends a record; returns its sequence once it is written out.
    pub fn append(&mut self, kind: &str, entity_id: &str, payload: Value, at: Timestamp) -> Result<u64> {
        let rec = LogRecord::new(self.last_sequence() + 1, self.stream, kind, entity_id, payload, at);
        if let Some((_, file)) = self.file.as_mut() {
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
            if self.durability == Durability::Sync {
                file.sync_data()?;
            }
        }
        let seq = rec.sequence;
        self.records.push(rec);
        Ok(seq)
    }

    /// Rewrites the stream keeping only the records `keep` accepts,
    /// renumbering sequences. Used by maintenance purges only.
    pub fn rewrite(&mut self, keep: impl Fn(&LogRecord) -> bool) -> Result<usize> {
        let before = self.records.len();
        let kept: Vec<LogRecord> = self
            .records
            .iter()
            .filter(|r| keep(r))
            .enumerate()
            .map(|(i, r)| {
                LogRecord::new(i as u64 + 1, self.stream, r.kind.clone(), r.entity_id.clone(), r.payload.clone(), r.timestamp)
            })
            .collect();
        if let Some((path, file)) = self.file.as_mut() {
            let tmp = path.with_extension("log.tmp");
            {
                let mut out = File::create(&tmp)?;
                for r in &kept {
                    let mut line = serde_json::to_vec(r)?;
                    line.push(b'\n');
                    out.write_all(&line)?;
                }
                out.sync_all()?;
            }
            fs::rename(&tmp, &*path)?;
            *file = OpenOptions::new().read(true).append(true).open(&*path)?;
        }
        self.records = kept;
        Ok(before - self.records.len())
    }

    /// The records as JSON lines, exactly as they are written to disk.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Reads the current file contents verbatim (empty for in-memory logs).
    pub fn raw_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        if let Some((path, _)) = &self.file {
            File::open(path)?.read_to_end(&mut out)?;
        }
        Ok(out)
    }
}

/// A typed event that lives in exactly one stream.
///
/// Implementors are serde enums tagged as `{"kind": …, "payload": …}`; the
/// tag becomes the record kind and the content becomes the payload.
pub trait StreamEvent: Serialize + DeserializeOwned {
    const STREAM: Stream;

    fn entity_id(&self) -> String;

    /// Record kind and payload for this event.
    fn encode(&self) -> Result<(String, Value)> {
        encode_tagged(self)
    }

    fn decode(kind: &str, payload: &Value) -> std::result::Result<Self, serde_json::Error> {
        decode_tagged(kind, payload)
    }
}

pub fn encode_tagged<E: Serialize>(ev: &E) -> Result<(String, Value)> {
    match serde_json::to_value(ev)? {
        Value::Object(mut map) => {
            let kind = match map.remove("kind") {
                Some(Value::String(k)) => k,
                _ => return Err(Error::Config("event enum must be tagged with `kind`".into())),
            };
            Ok((kind, map.remove("payload").unwrap_or(Value::Null)))
        }
        _ => Err(Error::Config("event must serialize to an object".into())),
    }
}

pub fn decode_tagged<E: DeserializeOwned>(kind: &str, payload: &Value) -> std::result::Result<E, serde_json::Error> {
    let mut map = serde_json::Map::new();
    map.insert("kind".into(), Value::String(kind.to_owned()));
    if !payload.is_null() {
        map.insert("payload".into(), payload.clone());
    }
    serde_json::from_value(Value::Object(map))
}

pub fn decode_event<E: StreamEvent>(rec: &LogRecord) -> Result<E> {
    E::decode(&rec.kind, &rec.payload).map_err(|e| Error::CorruptRecord {
        stream: rec.stream,
        sequence: rec.sequence,
        reason: e.to_string(),
    })
}

/// State that can be rebuilt by folding a stream's events in order.
pub trait Fold: Default {
    type Event: StreamEvent;

    fn apply(&mut self, event: &Self::Event);

    fn fold<'a>(records: impl IntoIterator<Item = &'a LogRecord>) -> Result<Self> {
        let mut state = Self::default();
        for rec in records {
            state.apply(&decode_event::<Self::Event>(rec)?);
        }
        Ok(state)
    }
}

/// An event log bound to one event type.
#[derive(Debug)]
pub struct Journal<E> {
    log: EventLog,
    _event: PhantomData<fn() -> E>,
}

impl<E: StreamEvent> Journal<E> {
    pub fn in_memory() -> Self {
        Self {
            log: EventLog::in_memory(E::STREAM),
            _event: PhantomData,
        }
    }

    pub fn open(dir: &Path, durability: Durability) -> Result<(Self, Vec<String>)> {
        let (log, warnings) = EventLog::open(dir, E::STREAM, durability)?;
        Ok((Self { log, _event: PhantomData }, warnings))
    }

    pub fn append(&mut self, ev: &E, at: Timestamp) -> Result<u64> {
        let (kind, payload) = ev.encode()?;
        self.log.append(&kind, &ev.entity_id(), payload, at)
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn events(&self) -> Result<Vec<E>> {
        self.log.records().iter().map(decode_event).collect()
    }

    pub fn replay<S: Fold<Event = E>>(&self) -> Result<S> {
        S::fold(self.log.records())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{Clock, SteppingClock};
    use serde_json::json;

    fn write_three(dir: &Path) -> EventLog {
        let clock = SteppingClock::fixed();
        let (mut log, warnings) = EventLog::open(dir, Stream::Turns, Durability::Flush).unwrap();
        assert!(warnings.is_empty());
        for i in 0..3 {
            log.append("turn_appended", &format!("t{i}"), json!({"text": format!("hello {i}")}), clock.now())
                .unwrap();
        }
        log
    }

    #[test]
    fn round_trip_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let log = write_three(dir.path());
        let replay = replay_file(&dir.path().join("turns.log"), Stream::Turns).unwrap();
        assert_eq!(replay.records, log.records());
        assert!(replay.warnings.is_empty());
    }

    #[test]
    fn torn_tail_is_tolerated_and_trimmed() {
        let dir = tempfile::tempdir().unwrap();
        let log = write_three(dir.path());
        let path = dir.path().join("turns.log");
        let bytes = fs::read(&path).unwrap();
        // chop the last record in half
        let last_start = bytes[..bytes.len() - 1].iter().rposition(|b| *b == b'\n').unwrap() + 1;
        let cut = last_start + (bytes.len() - last_start) / 2;
        fs::write(&path, &bytes[..cut]).unwrap();

        let replay = replay_file(&path, Stream::Turns).unwrap();
        assert_eq!(replay.records, log.records()[..2]);
        assert_eq!(replay.warnings.len(), 1);

        let (mut reopened, warnings) = EventLog::open(dir.path(), Stream::Turns, Durability::Flush).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(reopened.last_sequence(), 2);
        reopened
            .append("turn_appended", "t9", json!({}), SteppingClock::fixed().now())
            .unwrap();
        let again = replay_file(&path, Stream::Turns).unwrap();
        assert_eq!(again.records.len(), 3);
        assert!(again.warnings.is_empty());
    }

    #[test]
    fn bit_flip_is_reported_at_its_sequence() {
        let dir = tempfile::tempdir().unwrap();
        write_three(dir.path());
        let path = dir.path().join("turns.log");
        let text = fs::read_to_string(&path).unwrap();
        let flipped = text.replacen("hello 1", "hellp 1", 1);
        fs::write(&path, flipped).unwrap();
        match replay_file(&path, Stream::Turns) {
            Err(Error::CorruptRecord { sequence, .. }) => assert_eq!(sequence, 2),
            other => panic!("expected CorruptRecord, got {other:?}"),
        }
    }

    #[test]
    fn garbage_mid_file_is_corrupt_not_torn() {
        let dir = tempfile::tempdir().unwrap();
        write_three(dir.path());
        let path = dir.path().join("turns.log");
        let mut text = fs::read_to_string(&path).unwrap();
        text.insert_str(0, "{not json\n");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            replay_file(&path, Stream::Turns),
            Err(Error::CorruptRecord { sequence: 1, .. })
        ));
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let replay = replay_file(&dir.path().join("nope.log"), Stream::Metrics).unwrap();
        assert!(replay.records.is_empty());
    }
}
