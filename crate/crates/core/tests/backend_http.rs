use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use tablegen_core::backend::{
    read_transcript, record_transcript, BackendError, CallContext, CallSettings, ChatBackend, ChatRequest,
    ChatResponse, HttpBackend, Message, ModelClient, ReplayBackend, RetryPolicy, ScriptedBackend, TranscriptSink,
};

struct Recorded {
    headers: String,
    body: String,
}

/// Serves one canned (status, body) per connection, in order, then stops.
fn stub_server(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Recorded>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = String::new();
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
                headers.push_str(&line);
            }
            let mut buf = vec![0u8; content_length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Recorded { headers, body: String::from_utf8(buf).unwrap() });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let mut stream = stream;
            stream.write_all(reply.as_bytes()).unwrap();
            stream.flush().unwrap();
        }
    });
    (url, seen, handle)
}

fn completion(text: &str, prompt_tokens: u64, completion_tokens: u64) -> String {
    serde_json::json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens, "total_tokens": prompt_tokens + completion_tokens}
    })
    .to_string()
}

fn fast_retry(max_retries: u32) -> RetryPolicy {
    RetryPolicy { max_retries, base_delay_ms: 1, max_delay_ms: 5 }
}

fn settings() -> CallSettings {
    CallSettings { model: "llama-test".into(), temperature: 0.0, max_output_tokens: 256 }
}

#[test]
fn canned_completion_is_returned_and_accounted() {
    let (url, seen, handle) = stub_server(vec![(200, completion("Team | Wins\nHawks | 30", 42, 9))]);
    let backend = HttpBackend::new(&url, Some("secret".into()), Duration::from_secs(5)).unwrap();
    let client = ModelClient::new(Arc::new(backend), settings());
    let resp = client
        .chat(vec![Message::system("sys"), Message::user("make a table")], &CallContext::new("g1", "generate"))
        .unwrap();
    handle.join().unwrap();
    assert_eq!(resp.text, "Team | Wins\nHawks | 30");
    assert_eq!((resp.tokens_in, resp.tokens_out), (42, 9));

    let entries = client.ledger().entries();
    assert_eq!(entries.len(), 1);
    assert_eq!((entries[0].tokens_in, entries[0].tokens_out), (42, 9));
    assert_eq!(entries[0].example_id, "g1");

    let seen = seen.lock().unwrap();
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "llama-test");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 256);
    assert_eq!(body["stream"], false);
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["messages"][1]["content"], "make a table");
    assert!(seen[0].headers.to_ascii_lowercase().contains("authorization: bearer secret"));
    assert!(seen[0].headers.starts_with("POST /v1/chat/completions"));
}

#[test]
fn transient_failures_are_retried() {
    let (url, seen, handle) = stub_server(vec![
        (503, "{\"error\":\"busy\"}".into()),
        (429, "{\"error\":\"slow down\"}".into()),
        (200, completion("ok", 1, 1)),
    ]);
    let backend = HttpBackend::new(&url, None, Duration::from_secs(5)).unwrap().with_retry(fast_retry(3));
    let client = ModelClient::new(Arc::new(backend), settings());
    let resp = client.chat(vec![Message::user("x")], &CallContext::new("g", "generate")).unwrap();
    handle.join().unwrap();
    assert_eq!(resp.text, "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(client.ledger().len(), 1);
}

#[test]
fn retries_are_capped() {
    let (url, seen, handle) = stub_server(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
    let backend = HttpBackend::new(&url, None, Duration::from_secs(5)).unwrap().with_retry(fast_retry(2));
    let client = ModelClient::new(Arc::new(backend), settings());
    let err = client.chat(vec![Message::user("x")], &CallContext::new("g", "generate")).unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::BackendUnavailable { attempts: 3, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert!(client.ledger().is_empty());
}

#[test]
fn context_overflow_is_distinct_and_not_retried() {
    let body = r#"{"error":{"message":"This model's maximum context length is 8192 tokens","code":"context_length_exceeded"}}"#;
    let (url, seen, handle) = stub_server(vec![(400, body.into())]);
    let backend = HttpBackend::new(&url, None, Duration::from_secs(5)).unwrap().with_retry(fast_retry(3));
    let err = backend
        .complete(&ChatRequest { model: "m".into(), messages: vec![Message::user("x")], temperature: 0.0, max_output_tokens: 8 })
        .unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, BackendError::ContextOverflow(_)), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpBackend::new(format!("http://127.0.0.1:{port}/v1/chat/completions"), None, Duration::from_secs(2))
        .unwrap()
        .with_retry(fast_retry(1));
    let err = backend
        .complete(&ChatRequest { model: "m".into(), messages: vec![Message::user("x")], temperature: 0.0, max_output_tokens: 8 })
        .unwrap_err();
    assert!(matches!(err, BackendError::BackendUnavailable { attempts: 2, .. }), "{err}");
}

#[test]
fn transcript_replays_without_http() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transcript.jsonl");
    let (url, _seen, handle) = stub_server(vec![(200, completion("A | B\n1 | 2", 5, 4))]);
    let live = ModelClient::new(Arc::new(HttpBackend::new(&url, None, Duration::from_secs(5)).unwrap()), settings())
        .with_transcript(Arc::new(TranscriptSink::open(&path).unwrap()));
    let messages = vec![Message::user("table please")];
    let first = live.chat(messages.clone(), &CallContext::new("g", "generate")).unwrap();
    handle.join().unwrap();

    let lines = read_transcript(&path).unwrap();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0].stage_label, "generate");
    assert_eq!(lines[0].prompt_messages, messages);

    let replay = ModelClient::new(Arc::new(ReplayBackend::from_transcript(&path).unwrap()), settings());
    let again = replay.chat(messages, &CallContext::new("g", "generate")).unwrap();
    assert_eq!(again, first);
}

#[test]
fn transcript_line_schema_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let req = ChatRequest { model: "m".into(), messages: vec![Message::user("q")], temperature: 0.0, max_output_tokens: 8 };
    let resp = ChatResponse { text: "a".into(), tokens_in: 1, tokens_out: 2, latency_ms: 3 };
    record_transcript(&req, &resp, "ex", "generate", &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        ["example_id", "fingerprint", "latency_ms", "prompt_messages", "response_text", "stage_label", "tokens_in", "tokens_out"]
    );
    assert_eq!(v["prompt_messages"][0], serde_json::json!({"role": "user", "content": "q"}));
    assert_eq!(v["fingerprint"], req.fingerprint());
}

#[test]
fn concurrent_appends_lose_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let sink = Arc::new(TranscriptSink::open(&path).unwrap());
    let backend = Arc::new(ScriptedBackend::new(|req: &ChatRequest| Ok(format!("echo {}", req.messages[0].content))));
    let client = ModelClient::new(backend, settings()).with_transcript(sink);
    thread::scope(|s| {
        for t in 0..4 {
            let client = &client;
            s.spawn(move || {
                for i in 0..50 {
                    client.chat(vec![Message::user(format!("{t}-{i}"))], &CallContext::new(format!("e{t}"), "generate")).unwrap();
                }
            });
        }
    });
    let lines = read_transcript(&path).unwrap();
    assert_eq!(lines.len(), 200);
    assert_eq!(client.ledger().len(), 200);
    let mut prompts: Vec<String> = lines.iter().map(|l| l.prompt_messages[0].content.clone()).collect();
    prompts.sort();
    prompts.dedup();
    assert_eq!(prompts.len(), 200);
    let totals = client.ledger().totals();
    assert_eq!(totals.tokens_out, client.ledger().entries().iter().map(|e| e.tokens_out).sum::<u64>());
}
