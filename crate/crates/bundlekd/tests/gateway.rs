//! HTTP client behaviour against a local server, and the response cache.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use bundlekd::gateway::{
    CachedProvider, ChatProvider, ChatRequest, GatewayError, HttpProvider, MockProvider, MockScript, ProviderConfig,
};
use bundlekd_core::ChatMessage;

struct Received {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, in order, recording
/// each request.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Received>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            assert!(line.starts_with("POST /v1/chat/completions "), "{line}");
            let (mut len, mut auth) = (0, None);
            loop {
                line.clear();
                reader.read_line(&mut line).unwrap();
                let header = line.trim_end();
                if header.is_empty() {
                    break;
                }
                let (name, value) = header.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Received { auth, body: serde_json::from_slice(&buf).unwrap() });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({
        "id": "c1",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 5, "completion_tokens": 2, "total_tokens": 7}
    })
    .to_string()
}

fn client(url: &str, sleeps: Arc<Mutex<Vec<Duration>>>) -> HttpProvider {
    let mut cfg = ProviderConfig::openai(url, "gpt-test");
    cfg.backoff_ms = 100;
    cfg.backoff_max_ms = 150;
    cfg.api_key_env = Some("BUNDLEKD_TEST_KEY".into());
    std::env::set_var("BUNDLEKD_TEST_KEY", "sk-test");
    HttpProvider::new(cfg).unwrap().with_sleep(move |d| sleeps.lock().unwrap().push(d))
}

fn request() -> ChatRequest {
    ProviderConfig::openai("http://unused", "gpt-test").request(&[ChatMessage::user("hello")])
}

#[test]
fn retries_rate_limits_then_succeeds() {
    let (url, seen) = serve(vec![(429, "{}".into()), (503, "busy".into()), (200, ok_body("{\"bundle1\": []}"))]);
    let sleeps = Arc::new(Mutex::new(Vec::new()));
    let reply = client(&url, sleeps.clone()).complete(&request()).unwrap();
    assert_eq!(reply.content, "{\"bundle1\": []}");
    assert_eq!(reply.usage.unwrap().total_tokens, 7);
    assert_eq!(*sleeps.lock().unwrap(), [Duration::from_millis(100), Duration::from_millis(150)]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(
        seen[0].body,
        serde_json::json!({"model": "gpt-test", "messages": [{"role": "user", "content": "hello"}], "temperature": 0.0})
    );
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, seen) = serve(vec![(401, "bad key".into()), (200, ok_body("late"))]);
    let sleeps = Arc::new(Mutex::new(Vec::new()));
    match client(&url, sleeps.clone()).complete(&request()) {
        Err(GatewayError::Auth { status: 401, body }) => assert_eq!(body, "bad key"),
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
    assert!(sleeps.lock().unwrap().is_empty());
}

#[test]
fn other_client_errors_and_bad_bodies() {
    let (url, _) = serve(vec![(400, "nope".into()), (200, "{\"choices\": []}".into())]);
    let http = client(&url, Arc::new(Mutex::new(Vec::new())));
    assert!(matches!(http.complete(&request()), Err(GatewayError::Http { status: 400, .. })));
    assert!(matches!(http.complete(&request()), Err(GatewayError::MalformedBody(_))));
}

#[test]
fn gives_up_after_max_retries() {
    let (url, seen) = serve(vec![(500, "x".into()); 4]);
    match client(&url, Arc::new(Mutex::new(Vec::new()))).complete(&request()) {
        Err(GatewayError::ExhaustedRetries { attempts: 4, last }) => assert_eq!(last, "HTTP 500"),
        other => panic!("{other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn connection_refused_is_retried() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let sleeps = Arc::new(Mutex::new(Vec::new()));
    let err = client(&format!("http://127.0.0.1:{port}"), sleeps.clone()).complete(&request()).unwrap_err();
    assert!(matches!(err, GatewayError::ExhaustedRetries { attempts: 4, .. }), "{err:?}");
    assert_eq!(sleeps.lock().unwrap().len(), 3);
}

struct Counting(AtomicUsize);

impl ChatProvider for Counting {
    fn complete(&self, r: &ChatRequest) -> Result<bundlekd::gateway::ChatResponse, GatewayError> {
        let n = self.0.fetch_add(1, Ordering::SeqCst);
        Ok(bundlekd::gateway::ChatResponse {
            content: format!("reply {n} to {}", r.messages[0].content),
            usage: None,
            fingerprint: "counting".into(),
            cache_hit: false,
        })
    }

    fn fingerprint(&self) -> String {
        "counting".into()
    }
}

#[test]
fn cache_hits_misses_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cached = CachedProvider::new(Counting(AtomicUsize::new(0)), dir.path());
    let r = request();
    let first = cached.complete(&r).unwrap();
    let second = cached.complete(&r).unwrap();
    assert!(!first.cache_hit && second.cache_hit);
    assert_eq!(first.content, second.content);
    assert_eq!((cached.hits(), cached.misses(), cached.inner().0.load(Ordering::SeqCst)), (1, 1, 1));

    let mut warmer = r.clone();
    warmer.temperature = 0.7;
    assert!(!cached.complete(&warmer).unwrap().cache_hit, "temperature is part of the key");

    std::fs::write(cached.path_for(&r.cache_key()), "{ truncated").unwrap();
    let recomputed = cached.complete(&r).unwrap();
    assert!(!recomputed.cache_hit);
    assert_eq!(recomputed.content, "reply 2 to hello");
    assert!(cached.complete(&r).unwrap().cache_hit, "corrupt entry was rewritten");

    // A fresh provider over the same directory starts warm.
    let reopened = CachedProvider::new(Counting(AtomicUsize::new(0)), dir.path());
    assert!(reopened.complete(&r).unwrap().cache_hit);
    assert_eq!(reopened.inner().0.load(Ordering::SeqCst), 0);
}

#[test]
fn mock_script_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("script.json");
    let hash = bundlekd::gateway::prompt_hash(&request().messages);
    std::fs::write(&path, serde_json::json!({"replies": {hash: ["one", "two"]}, "strict": true}).to_string()).unwrap();
    let mock = MockProvider::from_file("m", &path).unwrap();
    assert_eq!(mock.complete(&request()).unwrap().content, "one");
    assert_eq!(mock.complete(&request()).unwrap().content, "two");
    assert!(MockProvider::new("m", MockScript::default()).complete(&request()).is_err());
}
