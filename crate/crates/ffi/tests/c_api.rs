use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::ptr;

use privmem_ffi::*;

const SCRIPT: &str = r#"[
  {"matcher": {"purpose": "chat"}, "outcome": {"type": "reply", "value": "Noted."}, "repeat": true},
  {"matcher": {"purpose": "memory_extraction"},
   "outcome": {"type": "reply", "value": "{\"store\": \"yes\", \"memory_text\": \"User lives in Lyon\"}"}},
  {"matcher": {"purpose": "privacy_inference"}, "outcome": {"type": "reply", "value": "[]"}, "repeat": true}
]"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
    privmem_string_free(p);
    s
}

unsafe fn last_error() -> String {
    let p = privmem_last_error();
    assert!(!p.is_null());
    CStr::from_ptr(p).to_string_lossy().into_owned()
}

unsafe fn mock_engine() -> *mut PrivmemEngine {
    let mut e = ptr::null_mut();
    assert_eq!(privmem_engine_new_mock(c(SCRIPT).as_ptr(), 7, &mut e), PrivmemStatus::Ok);
    assert!(!e.is_null());
    e
}

#[test]
fn chat_findings_and_memories_round_trip() {
    unsafe {
        let e = mock_engine();
        let mut id = ptr::null_mut();
        assert_eq!(privmem_create_dialogue(e, c("trip").as_ptr(), &mut id), PrivmemStatus::Ok);
        let dialogue = take(id);
        assert_eq!(dialogue.len(), 32);

        let mut out = ptr::null_mut();
        let status = privmem_send_message(e, c(&dialogue).as_ptr(), c("I live in Lyon").as_ptr(), ptr::null(), &mut out);
        assert_eq!(status, PrivmemStatus::Ok);
        let resp: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(resp["assistant_text"], "Noted.");
        assert_eq!(resp["strategy"], "analyzer");
        assert!(resp["finding_set_ref"].is_string());

        assert_eq!(privmem_wait_idle(e), PrivmemStatus::Ok);
        assert_eq!(privmem_findings_json(e, c(&dialogue).as_ptr(), &mut out), PrivmemStatus::Ok);
        let poll: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(poll["status"], "ready");
        assert_eq!(poll["inputs_used"], 1);
        assert_eq!(poll["memories_used"], 1);

        assert_eq!(privmem_list_memories_json(e, false, &mut out), PrivmemStatus::Ok);
        let mems: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(mems[0]["text"], "User lives in Lyon");

        assert_eq!(privmem_metrics_summary_json(e, c("task").as_ptr(), &mut out), PrivmemStatus::Ok);
        let summary: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(summary["counts"]["inference_run"], 1);
        privmem_engine_free(e);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let e = mock_engine();
        let mut out = ptr::null_mut();
        let status = privmem_send_message(e, c("nope").as_ptr(), c("hi").as_ptr(), ptr::null(), &mut out);
        assert_eq!(status, PrivmemStatus::UnknownEntity);
        assert!(last_error().starts_with("unknown_dialogue"));

        let status = privmem_send_message(e, ptr::null(), c("hi").as_ptr(), ptr::null(), &mut out);
        assert_eq!(status, PrivmemStatus::NullArgument);

        let mut id = ptr::null_mut();
        privmem_create_dialogue(e, ptr::null(), &mut id);
        let d = take(id);
        let status = privmem_send_message(e, c(&d).as_ptr(), c("hi").as_ptr(), c("clipboard").as_ptr(), &mut out);
        assert_eq!(status, PrivmemStatus::InvalidInput);

        let status = privmem_apply_edits_json(e, c("{not json").as_ptr(), &mut out);
        assert_eq!(status, PrivmemStatus::InvalidJson);

        let mut s = 0.0;
        assert_eq!(privmem_sensitivity_of(e, c("astrology").as_ptr(), &mut s), PrivmemStatus::InvalidInput);
        assert_eq!(privmem_sensitivity_of(e, c("other").as_ptr(), &mut s), PrivmemStatus::Ok);
        assert_eq!(s, 0.0);

        let mut bad = ptr::null_mut();
        assert_eq!(privmem_engine_new_mock(c("[").as_ptr(), 0, &mut bad), PrivmemStatus::InvalidJson);
        privmem_engine_free(e);
        privmem_engine_free(ptr::null_mut());
    }
}

#[test]
fn color_endpoints() {
    let mut col = PrivmemColor { r: 0, g: 0, b: 0, a: 0.0 };
    unsafe {
        assert_eq!(privmem_color_of(1.0, 1.0, &mut col), PrivmemStatus::Ok);
    }
    assert_eq!((col.r, col.g, col.b, col.a), (255, 117, 117, 1.0));
    unsafe {
        assert_eq!(privmem_color_of(0.8, 0.0, &mut col), PrivmemStatus::Ok);
        assert_eq!(privmem_color_of(0.8, 0.0, ptr::null_mut()), PrivmemStatus::NullArgument);
    }
    assert_eq!((col.r, col.g, col.b, col.a), (109, 172, 255, 0.8));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/privmem.h")).unwrap();
    for name in [
        "privmem_last_error",
        "privmem_string_free",
        "privmem_engine_new_mock",
        "privmem_engine_open",
        "privmem_engine_free",
        "privmem_wait_idle",
        "privmem_create_dialogue",
        "privmem_send_message",
        "privmem_findings_json",
        "privmem_apply_edits_json",
        "privmem_list_memories_json",
        "privmem_metrics_summary_json",
        "privmem_sensitivity_of",
        "privmem_color_of",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    // Syntax-check with a C compiler when one is installed.
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-xc", "-std=c99", "-Wall", "-Werror"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include/privmem.h"))
        .status()
    else {
        eprintln!("cc not found; skipped header compile check");
        return;
    };
    assert!(status.success(), "header does not compile as C99");
}
