//! Provider output → source-tracked findings.
//!
//! Wire shape: a JSON list of
//! `{statement, category, confidence, source_inputs: [{id, keywords}], source_memories: [{id, keywords}]}`.
//! Recoverable problems are dropped or repaired and reported as [`Warning`]s;
//! only an output with no recognizable list at all is a `ParseFailure`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{FindingStatus, KeywordSpan, MemoryRef, PrivacyFinding, TurnRef};
use crate::error::{Error, Result};
use crate::ids::{FindingId, IdSource, MemoryId, Timestamp, TurnId};
use crate::memory::first_json;
use crate::sensitivity::SensitivityTable;

/// What the parser may look up: source texts as they were placed in the
/// prompt, the allowed categories and the sensitivity table.
pub struct StoreView<'a> {
    pub turns: BTreeMap<TurnId, String>,
    pub memories: BTreeMap<MemoryId, String>,
    pub categories: Vec<String>,
    pub table: &'a SensitivityTable,
    pub ids: &'a dyn IdSource,
    pub now: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    /// Item is not an object or lacks a usable statement/category/confidence.
    MalformedItem,
    /// A source entry is not `{id, keywords}` shaped.
    MalformedSource,
    ConfidenceClamped,
    /// Category outside the configured set; remapped to `other` or dropped.
    UnknownCategory,
    /// Source id not present in the store view; the reference was dropped.
    DanglingSource,
    /// Every source reference was dropped, so the item was dropped.
    NoSources,
    /// Keyword is not a substring of its source; the keyword was dropped.
    KeywordNotFound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub kind: WarningKind,
    /// Index of the offending item in the provider's list.
    pub item: Option<usize>,
    pub detail: String,
}

fn warn(out: &mut Vec<Warning>, kind: WarningKind, item: usize, detail: impl Into<String>) {
    out.push(Warning { kind, item: Some(item), detail: detail.into() });
}

fn top_level_items(raw: &str) -> Result<Vec<Value>> {
    let v = first_json(raw, '[')
        .or_else(|| first_json(raw, '{'))
        .ok_or_else(|| Error::ParseFailure("no JSON list in provider output".into()))?;
    match v {
        Value::Array(items) => Ok(items),
        Value::Object(mut map) => {
            for key in ["findings", "items", "results"] {
                if let Some(Value::Array(items)) = map.remove(key) {
                    return Ok(items);
                }
            }
            Err(Error::ParseFailure("expected a JSON list of findings".into()))
        }
        _ => Err(Error::ParseFailure("expected a JSON list of findings".into())),
    }
}

/// `(id, keywords)` pairs from one `source_*` field, merged per id in first
/// appearance order.
fn source_entries(
    field: Option<&Value>,
    name: &str,
    item: usize,
    warnings: &mut Vec<Warning>,
) -> Vec<(String, Vec<String>)> {
    let entries = match field {
        None | Some(Value::Null) => return Vec::new(),
        Some(Value::Array(a)) => a,
        Some(_) => {
            warn(warnings, WarningKind::MalformedSource, item, format!("{name} is not a list"));
            return Vec::new();
        }
    };
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for e in entries {
        let (id, kws) = match e {
            Value::String(id) => (id.clone(), Vec::new()),
            Value::Object(o) => {
                let Some(id) = o.get("id").and_then(id_string) else {
                    warn(warnings, WarningKind::MalformedSource, item, format!("{name} entry without id"));
                    continue;
                };
                let kws = match o.get("keywords") {
                    None | Some(Value::Null) => Vec::new(),
                    Some(Value::Array(ks)) => ks
                        .iter()
                        .filter_map(|k| match k {
                            Value::String(s) => Some(s.clone()),
                            other => {
                                warn(warnings, WarningKind::MalformedSource, item, format!("non-string keyword {other}"));
                                None
                            }
                        })
                        .collect(),
                    Some(Value::String(s)) => vec![s.clone()],
                    Some(_) => {
                        warn(warnings, WarningKind::MalformedSource, item, format!("{name} keywords is not a list"));
                        Vec::new()
                    }
                };
                (id, kws)
            }
            other => {
                warn(warnings, WarningKind::MalformedSource, item, format!("{name} entry {other} is not an object"));
                continue;
            }
        };
        match out.iter_mut().find(|(existing, _)| *existing == id) {
            Some((_, existing)) => existing.extend(kws),
            None => out.push((id, kws)),
        }
    }
    out
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_owned()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn resolve_spans(text: &str, keywords: &[String], item: usize, warnings: &mut Vec<Warning>) -> Vec<KeywordSpan> {
    let mut spans: Vec<KeywordSpan> = Vec::new();
    for kw in keywords {
        match KeywordSpan::locate(text, kw) {
            Some(span) if !spans.contains(&span) => spans.push(span),
            Some(_) => {}
            None => warn(warnings, WarningKind::KeywordNotFound, item, format!("{kw:?} not found in source")),
        }
    }
    spans
}

fn parse_item(
    index: usize,
    obj: &Map<String, Value>,
    view: &StoreView<'_>,
    warnings: &mut Vec<Warning>,
) -> Option<PrivacyFinding> {
    let statement = match obj.get("statement") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_owned(),
        _ => {
            warn(warnings, WarningKind::MalformedItem, index, "missing or empty statement");
            return None;
        }
    };
    let mut category = match obj.get("category") {
        Some(Value::String(s)) => s.trim().to_lowercase(),
        _ => {
            warn(warnings, WarningKind::MalformedItem, index, "missing category");
            return None;
        }
    };
    if !view.categories.contains(&category) {
        if view.categories.iter().any(|c| c == "other") {
            warn(warnings, WarningKind::UnknownCategory, index, format!("{category:?} remapped to other"));
            category = "other".into();
        } else {
            warn(warnings, WarningKind::UnknownCategory, index, format!("{category:?} is not configured"));
            return None;
        }
    }
    let raw_conf = match obj.get("confidence").and_then(Value::as_f64) {
        Some(c) => c,
        None => {
            warn(warnings, WarningKind::MalformedItem, index, "missing or non-numeric confidence");
            return None;
        }
    };
    let confidence = raw_conf.clamp(0.0, 1.0);
    if confidence != raw_conf {
        warn(warnings, WarningKind::ConfidenceClamped, index, format!("{raw_conf} clamped to {confidence}"));
    }

    let mut turn_refs = Vec::new();
    for (id, kws) in source_entries(obj.get("source_inputs"), "source_inputs", index, warnings) {
        let turn_id = TurnId::new(id);
        let Some(text) = view.turns.get(&turn_id) else {
            warn(warnings, WarningKind::DanglingSource, index, format!("input {turn_id} does not exist"));
            continue;
        };
        let keyword_spans = resolve_spans(text, &kws, index, warnings);
        turn_refs.push(TurnRef { turn_id, keyword_spans });
    }
    let mut memory_refs = Vec::new();
    for (id, kws) in source_entries(obj.get("source_memories"), "source_memories", index, warnings) {
        let memory_id = MemoryId::new(id);
        let Some(text) = view.memories.get(&memory_id) else {
            warn(warnings, WarningKind::DanglingSource, index, format!("memory {memory_id} does not exist"));
            continue;
        };
        let keyword_spans = resolve_spans(text, &kws, index, warnings);
        memory_refs.push(MemoryRef { memory_id, keyword_spans });
    }
    if turn_refs.is_empty() && memory_refs.is_empty() {
        warn(warnings, WarningKind::NoSources, index, "no resolvable sources; item dropped");
        return None;
    }

    let sensitivity = match view.table.sensitivity_of(&category) {
        Ok(s) => s,
        Err(e) => {
            warn(warnings, WarningKind::UnknownCategory, index, e.to_string());
            return None;
        }
    };
    Some(PrivacyFinding {
        id: FindingId::new(view.ids.next_hex()),
        statement: statement.into(),
        category: category.into(),
        confidence,
        sensitivity,
        source_turn_refs: turn_refs,
        source_memory_refs: memory_refs,
        created_at: view.now,
        status: FindingStatus::Open,
        stale: false,
    })
}

pub fn parse_findings(raw: &str, view: &StoreView<'_>) -> Result<(Vec<PrivacyFinding>, Vec<Warning>)> {
    let items = top_level_items(raw)?;
    let mut warnings = Vec::new();
    let mut findings = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let Value::Object(obj) = item else {
            warn(&mut warnings, WarningKind::MalformedItem, i, format!("item is not an object: {item}"));
            continue;
        };
        if let Some(f) = parse_item(i, obj, view, &mut warnings) {
            findings.push(f);
        }
    }
    Ok((findings, warnings))
}
