use std::collections::BTreeMap;

use chrono::{TimeZone, Utc};
use proptest::prelude::*;

use privmem::conversation::{ConversationStore, Role};
use privmem::edits::{coverage_of, EditBatch, TextRange, TurnEdit};
use privmem::ids::{DialogueId, FindingId, MemoryId, SeededIds, TurnId};
use privmem::inference::{
    char_slice, dedup_findings, parse_findings, FindingStatus, KeywordSpan, PrivacyFinding, StoreView, TurnRef,
};
use privmem::memory::{MemoryStore, Verdict};
use privmem::sensitivity::{channels, color_of, SensitivityTable};

fn finding(i: usize, statement: &str, category: &str, confidence: f64, turn: &str) -> PrivacyFinding {
    PrivacyFinding {
        id: FindingId::new(format!("f{i}")),
        statement: statement.into(),
        category: category.into(),
        confidence,
        sensitivity: 0.5,
        source_turn_refs: vec![TurnRef { turn_id: TurnId::new(turn), keyword_spans: vec![] }],
        source_memory_refs: vec![],
        created_at: Utc.timestamp_opt(1_700_000_000 + i as i64, 0).unwrap(),
        status: FindingStatus::Open,
        stale: false,
    }
}

fn arb_findings() -> impl Strategy<Value = Vec<PrivacyFinding>> {
    let statements = prop::sample::select(vec!["Lives in Lyon", "lives  in LYON", "Has asthma", "Works at a lab"]);
    let categories = prop::sample::select(vec!["location", "health", "other"]);
    let turns = prop::sample::select(vec!["t1", "t2", "t3"]);
    prop::collection::vec((statements, categories, 0.0..=1.0f64, turns), 0..8).prop_map(|items| {
        items.into_iter().enumerate().map(|(i, (s, c, conf, t))| finding(i, s, c, conf, t)).collect()
    })
}

proptest! {
    #[test]
    fn dedup_is_idempotent_and_keys_are_unique(fs in arb_findings()) {
        let once = dedup_findings(fs.clone());
        prop_assert_eq!(dedup_findings(once.clone()), once.clone());
        let mut keys: Vec<_> = once
            .iter()
            .map(|f| (f.statement.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase(), f.category.clone()))
            .collect();
        let n = keys.len();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys.len(), n);
        prop_assert!(once.len() <= fs.len());
    }

    #[test]
    fn located_spans_slice_back_to_keyword(prefix in "\\PC{0,12}", kw in "\\PC{1,6}", suffix in "\\PC{0,12}") {
        let source = format!("{prefix}{kw}{suffix}");
        let span = KeywordSpan::locate(&source, &kw).expect("keyword is present");
        prop_assert_eq!(char_slice(&source, span.start, span.end), Some(kw.as_str()));
        prop_assert_eq!(&*span.surface, kw.as_str());
        prop_assert!(span.matches(&source));
        prop_assert!(span.start <= prefix.chars().count());
    }

    #[test]
    fn color_is_monotone_in_sensitivity(c in 0.0..=1.0f64, s1 in 0.0..=1.0f64, s2 in 0.0..=1.0f64) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let (a, b) = (color_of(c, lo), color_of(c, hi));
        prop_assert!(a.r <= b.r && a.g >= b.g && a.b >= b.b);
        prop_assert_eq!(a.a, c);
        let ch = channels(lo);
        prop_assert!((ch[0] - a.r as f64).abs() <= 0.5);
    }

    #[test]
    fn sensitivity_preserves_rating_order(ratings in prop::collection::btree_map("[a-z]{1,8}", -10.0..10.0f64, 1..20)) {
        let table = SensitivityTable::new("p", ratings.clone()).unwrap();
        for (a, ra) in &ratings {
            let sa = table.sensitivity_of(a).unwrap();
            prop_assert!((0.0..=1.0).contains(&sa));
            for (b, rb) in &ratings {
                let sb = table.sensitivity_of(b).unwrap();
                if ra < rb {
                    prop_assert!(sa < sb);
                }
            }
        }
    }

    #[test]
    fn parser_never_panics_and_output_is_well_formed(raw in "\\PC{0,200}") {
        let table = SensitivityTable::default();
        let ids = SeededIds::new(1);
        let view = StoreView {
            turns: BTreeMap::from([(TurnId::new("t1"), "I live in Lyon".to_owned())]),
            memories: BTreeMap::new(),
            categories: vec!["location".into(), "other".into()],
            table: &table,
            ids: &ids,
            now: Utc.timestamp_opt(0, 0).unwrap(),
        };
        if let Ok((fs, _)) = parse_findings(&raw, &view) {
            for f in fs {
                prop_assert!(f.has_sources());
                prop_assert!((0.0..=1.0).contains(&f.confidence));
            }
        }
    }

    #[test]
    fn coverage_is_a_fraction(spans in prop::collection::vec((0usize..20, 0usize..5), 0..6)) {
        let text = "I live in Lyon with my cat";
        let mut f = finding(0, "Lives in Lyon", "location", 0.9, "t1");
        f.source_turn_refs[0].keyword_spans = vec![KeywordSpan::locate(text, "Lyon").unwrap()];
        let batch = EditBatch {
            id: "b".into(),
            dialogue_id: DialogueId::new("d"),
            turn_edits: vec![TurnEdit {
                turn_id: TurnId::new("t1"),
                new_text: "x".into(),
                edited_spans: spans.iter().map(|&(s, w)| TextRange::new(s, s + w)).collect(),
            }],
            memory_edits: vec![],
            memory_deletes: vec![],
            submitted_at: Utc.timestamp_opt(0, 0).unwrap(),
        };
        let c = coverage_of(&batch, &[&f]);
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn store_replay_equals_live(ops in prop::collection::vec((0u8..5, 0usize..8, "[a-z ]{0,12}"), 1..60)) {
        let t0 = Utc.timestamp_opt(1_700_000_000, 0).unwrap();
        let mut conv = ConversationStore::in_memory();
        let mut mem = MemoryStore::in_memory();
        let d = conv.create_dialogue(DialogueId::new("d"), "t".into(), t0).unwrap();
        let mut turns: Vec<TurnId> = Vec::new();
        let mut memories: Vec<MemoryId> = Vec::new();
        for (n, (op, pick, text)) in ops.into_iter().enumerate() {
            let at = t0 + chrono::Duration::seconds(n as i64);
            // Errors (empty text, deleted targets) are part of the property:
            // a failed op must leave no trace in the log.
            match op {
                0 => {
                    if let Ok(id) = conv.append_turn(TurnId::new(format!("t{n}")), &d, Role::User, &text, at) {
                        turns.push(id);
                    }
                }
                1 if !turns.is_empty() => {
                    let _ = conv.update_turn_text(&turns[pick % turns.len()], &text, at);
                }
                2 if !turns.is_empty() => {
                    let turn = conv.state().turn(&turns[pick % turns.len()]).unwrap().clone();
                    let v = Verdict { store: !text.trim().is_empty(), memory_text: text.clone() };
                    if let Ok(Some(m)) = mem.record_extraction(&turn, &v, MemoryId::new(format!("m{n}")), at) {
                        memories.push(m.id);
                    }
                }
                3 if !memories.is_empty() => {
                    let _ = mem.update_memory(&memories[pick % memories.len()], &text, at);
                }
                4 if !memories.is_empty() => {
                    let _ = mem.delete_memory(&memories[pick % memories.len()], at);
                }
                _ => {}
            }
        }
        prop_assert_eq!(&conv.journal().replay::<privmem::conversation::ConversationState>().unwrap(), conv.state());
        prop_assert_eq!(&mem.journal().replay::<privmem::memory::MemoryState>().unwrap(), mem.state());
    }
}
