//! HttpProvider against a local stub speaking the chat-completions shape.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use privmem::llm::{ChatMessage, HttpProvider, LlmClient, ProviderConfig, Purpose};

struct Seen {
    path: String,
    auth: String,
    body: serde_json::Value,
}

enum Reply {
    Status(u16, String),
    Hang(Duration),
}

/// Serves one canned reply per connection, in order.
fn stub(replies: Vec<Reply>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for reply in replies {
            let Ok((mut stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or("").to_owned();
            let (mut len, mut auth) = (0usize, String::new());
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = v.trim().to_owned(),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let _ = tx.send(Seen { path, auth, body: serde_json::from_slice(&body).unwrap() });
            match reply {
                Reply::Status(code, text) => {
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                        text.len()
                    );
                }
                Reply::Hang(d) => thread::sleep(d),
            }
        }
    });
    (format!("http://{addr}/v1"), rx)
}

fn ok(content: &str) -> Reply {
    Reply::Status(200, serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string())
}

fn client(base_url: String, retry_limit: u32, timeout: Duration) -> LlmClient {
    let config = ProviderConfig {
        base_url,
        api_key: "sk-test".into(),
        model_name: "test-model".into(),
        retry_limit,
        backoff_base: Duration::from_millis(1),
        timeout,
        ..ProviderConfig::default()
    };
    LlmClient::new(Arc::new(HttpProvider::new(&config)), config)
}

#[test]
fn sends_openai_shape_and_reads_first_choice() {
    let (url, seen) = stub(vec![ok("Hello back")]);
    let c = client(url, 0, Duration::from_secs(5));
    let req = c.request(Purpose::Chat, vec![ChatMessage::system("be brief"), ChatMessage::user("hello")]);
    assert_eq!(c.complete(&req).unwrap(), "Hello back");
    let s = seen.recv().unwrap();
    assert_eq!(s.path, "/v1/chat/completions");
    assert_eq!(s.auth, "Bearer sk-test");
    assert_eq!(s.body["model"], "test-model");
    assert_eq!(s.body["messages"][0]["role"], "system");
    assert_eq!(s.body["messages"][1]["content"], "hello");
    assert!(s.body.get("purpose").is_none());
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = stub(vec![Reply::Status(503, "{}".into()), ok("second time")]);
    let c = client(url, 2, Duration::from_secs(5));
    let req = c.request(Purpose::Chat, vec![ChatMessage::user("x")]);
    assert_eq!(c.complete(&req).unwrap(), "second time");
    assert_eq!(seen.try_iter().count(), 2);
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, seen) = stub(vec![Reply::Status(401, "{}".into()), ok("never")]);
    let c = client(url, 3, Duration::from_secs(5));
    let err = c.complete(&c.request(Purpose::Chat, vec![ChatMessage::user("x")])).unwrap_err();
    assert_eq!(err.code(), "auth_failure");
    assert_eq!(seen.try_iter().count(), 1);
}

#[test]
fn malformed_body_is_provider_failure() {
    let (url, _seen) = stub(vec![Reply::Status(200, "{\"nope\": 1}".into())]);
    let c = client(url, 0, Duration::from_secs(5));
    let err = c.complete(&c.request(Purpose::Chat, vec![ChatMessage::user("x")])).unwrap_err();
    assert_eq!(err.code(), "provider_failure");
}

#[test]
fn slow_server_times_out() {
    let (url, _seen) = stub(vec![Reply::Hang(Duration::from_secs(2)), Reply::Hang(Duration::from_secs(2))]);
    let c = client(url, 1, Duration::from_millis(200));
    let err = c.complete(&c.request(Purpose::Chat, vec![ChatMessage::user("x")])).unwrap_err();
    assert_eq!(err.code(), "timeout", "{err}");
}
