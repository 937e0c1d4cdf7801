use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use distilkd::augment::{backend_complete, BackendError, BackendRequest, HttpBackend, RetryPolicy};

/// Serves the canned `(status, body)` replies in order, one per connection,
/// and records each request's authorization header and body.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<(Option<String>, String)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            log.lock().unwrap().push((auth, String::from_utf8(req).unwrap()));
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, seen)
}

fn backend(url: String) -> HttpBackend {
    HttpBackend {
        token: Some("secret".into()),
        retry: RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(5),
        },
        timeout: Duration::from_secs(10),
        ..HttpBackend::new(url, "teacher-model")
    }
}

fn ok_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn request() -> BackendRequest {
    BackendRequest::new("[agent:respond] be brief", "Say hi.", 9)
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = stub(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, ok_body("hi there")),
    ]);
    let text = backend_complete(&backend(url), &request()).unwrap();
    assert_eq!(text, "hi there");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].0.as_deref(), Some("Bearer secret"));
    let body: serde_json::Value = serde_json::from_str(&seen[2].1).unwrap();
    assert_eq!(body["model"], "teacher-model");
    assert_eq!(body["seed"], 9);
    assert_eq!(body["messages"][1]["content"], "Say hi.");
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, seen) = stub(vec![
        (500, "a".into()),
        (500, "b".into()),
        (500, "c".into()),
        (200, ok_body("late")),
    ]);
    let err = backend_complete(&backend(url), &request()).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 500, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![(400, "bad".into()), (200, ok_body("never"))]);
    let err = backend_complete(&backend(url), &request()).unwrap_err();
    assert!(matches!(err, BackendError::Status { status: 400, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_and_empty_replies_are_errors() {
    let (url, _) = stub(vec![(200, "{\"nothing\": true}".into())]);
    assert!(matches!(
        backend_complete(&backend(url), &request()),
        Err(BackendError::Malformed(_))
    ));
    let (url, _) = stub(vec![(200, ok_body("   "))]);
    assert!(backend_complete(&backend(url), &request()).is_err());
}

#[test]
fn unreachable_host_is_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let b = backend(format!("http://127.0.0.1:{port}/v1"));
    match backend_complete(&b, &request()) {
        Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
}
