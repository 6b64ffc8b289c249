use std::collections::hash_map::Entry;
use std::collections::HashMap;

use super::{KeywordSpan, PrivacyFinding};

/// Case-folded with whitespace runs collapsed to one space.
pub fn normalize_statement(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    push_normalized(&mut out, s);
    out
}

fn push_normalized(out: &mut String, s: &str) {
    if !s.is_ascii() {
        out.push_str(&s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase());
        return;
    }
    for (i, word) in s.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.extend(word.chars().map(|c| c.to_ascii_lowercase()));
    }
}

fn union_spans(into: &mut Vec<KeywordSpan>, from: Vec<KeywordSpan>) {
    for s in from {
        if !into.contains(&s) {
            into.push(s);
        }
    }
}

/// Merges `other` into `into`: max confidence, earliest timestamp, and
/// sources unioned per source id in first-appearance order.
fn merge(into: &mut PrivacyFinding, other: PrivacyFinding) {
    into.confidence = into.confidence.max(other.confidence);
    into.created_at = into.created_at.min(other.created_at);
    for r in other.source_turn_refs {
        match into.source_turn_refs.iter_mut().find(|x| x.turn_id == r.turn_id) {
            Some(x) => union_spans(&mut x.keyword_spans, r.keyword_spans),
            None => into.source_turn_refs.push(r),
        }
    }
    for r in other.source_memory_refs {
        match into.source_memory_refs.iter_mut().find(|x| x.memory_id == r.memory_id) {
            Some(x) => union_spans(&mut x.keyword_spans, r.keyword_spans),
            None => into.source_memory_refs.push(r),
        }
    }
}

/// Below this size a linear scan over seen keys beats hashing.
const LINEAR_SCAN_MAX: usize = 32;

/// Collapses findings with the same normalized statement and category.
/// The first occurrence keeps its id, wording and position.
pub fn dedup_findings(findings: Vec<PrivacyFinding>) -> Vec<PrivacyFinding> {
    if findings.len() <= LINEAR_SCAN_MAX {
        return dedup_small(findings);
    }
    let mut out: Vec<PrivacyFinding> = Vec::with_capacity(findings.len());
    let mut slot: HashMap<(String, String), usize> = HashMap::new();
    for f in findings {
        match slot.entry(f.dedup_key()) {
            Entry::Occupied(e) => merge(&mut out[*e.get()], f),
            Entry::Vacant(e) => {
                e.insert(out.len());
                out.push(f);
            }
        }
    }
    out
}

/// Whether two statements normalize to the same text, without allocating
/// for ASCII input.
fn same_statement(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    if !a.is_ascii() || !b.is_ascii() {
        return normalize_statement(a) == normalize_statement(b);
    }
    let (mut wa, mut wb) = (a.split_whitespace(), b.split_whitespace());
    loop {
        match (wa.next(), wb.next()) {
            (None, None) => return true,
            (Some(x), Some(y)) if x.eq_ignore_ascii_case(y) => {}
            _ => return false,
        }
    }
}

// Compacts in place, keeping each first occurrence where it was.
fn dedup_small(mut out: Vec<PrivacyFinding>) -> Vec<PrivacyFinding> {
    let mut i = 0;
    while i < out.len() {
        let f = &out[i];
        match out[..i].iter().position(|o| o.category == f.category && same_statement(&o.statement, &f.statement)) {
            Some(j) => {
                let f = out.remove(i);
                merge(&mut out[j], f);
            }
            None => i += 1,
        }
    }
    out
}
