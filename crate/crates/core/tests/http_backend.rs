use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use delora::relabel::{HttpLlm, RelabelBackend, RelabelRequest};
use delora::Error;

struct Captured {
    headers: Vec<String>,
    body: String,
}

/// Serves `replies` in order, one connection each, and forwards what it saw.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let _ = tx.send(Captured {
                headers,
                body: String::from_utf8(body).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1/completions"), rx)
}

fn options() -> Vec<String> {
    vec!["negative".into(), "positive".into()]
}

fn request<'a>(options: &'a [String]) -> RelabelRequest<'a> {
    RelabelRequest {
        sample_id: "s1",
        text: "a fine film",
        options,
        demos: &[],
        true_label: None,
    }
}

#[test]
fn labels_from_openai_style_reply() {
    let reply = r#"{"choices":[{"message":{"content":"The tone is warm.\nLABEL: positive"}}]}"#;
    let (url, rx) = serve(vec![(200, reply.into())]);
    let llm = HttpLlm::new(&url, "m1", Duration::from_secs(5), 0, "DELORA_TEST_UNSET_KEY");
    let opts = options();
    assert_eq!(llm.label(&request(&opts)).unwrap(), 1);
    assert_eq!(llm.backend_calls(), 1);

    let seen = rx.recv().unwrap();
    let body: serde_json::Value = serde_json::from_str(&seen.body).unwrap();
    assert_eq!(body["model"], "m1");
    assert_eq!(body["temperature"], 0);
    assert!(body["prompt"].as_str().unwrap().contains("a fine film"));
    assert!(!seen.headers.iter().any(|h| h.to_ascii_lowercase().starts_with("authorization")));
}

#[test]
fn sends_bearer_token_from_env() {
    std::env::set_var("DELORA_TEST_KEY_SET", "sekrit");
    let (url, rx) = serve(vec![(200, r#"{"text":"negative"}"#.into())]);
    let llm = HttpLlm::new(&url, "m", Duration::from_secs(5), 0, "DELORA_TEST_KEY_SET");
    let opts = options();
    assert_eq!(llm.label(&request(&opts)).unwrap(), 0);
    let seen = rx.recv().unwrap();
    assert!(seen.headers.iter().any(|h| h == "authorization: Bearer sekrit" || h == "Authorization: Bearer sekrit"));
}

#[test]
fn retries_after_server_error() {
    let (url, _rx) = serve(vec![(500, "{}".into()), (200, r#"{"response":"LABEL: positive"}"#.into())]);
    let llm = HttpLlm::new(&url, "m", Duration::from_secs(5), 1, "DELORA_TEST_UNSET_KEY");
    let opts = options();
    assert_eq!(llm.label(&request(&opts)).unwrap(), 1);
    assert_eq!(llm.backend_calls(), 2);
}

#[test]
fn unparseable_replies_exhaust_retries() {
    let (url, _rx) = serve(vec![(200, r#"{"text":"no idea"}"#.into()), (200, r#"{"text":"maybe"}"#.into())]);
    let llm = HttpLlm::new(&url, "m", Duration::from_secs(5), 1, "DELORA_TEST_UNSET_KEY");
    let opts = options();
    let err = llm.label(&request(&opts)).unwrap_err();
    assert!(matches!(err, Error::PseudoLabelUnavailable { ref sample_id, .. } if sample_id == "s1"));
    assert_eq!(llm.backend_calls(), 2);
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let llm = HttpLlm::new(&format!("http://127.0.0.1:{port}/"), "m", Duration::from_secs(2), 0, "X");
    let opts = options();
    assert!(matches!(llm.label(&request(&opts)), Err(Error::PseudoLabelUnavailable { .. })));
}
