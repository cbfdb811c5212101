//! Shared fixtures: the documentation example dictionary and a local
//! chat-completions stub server.

#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use horizon_core::taskgen::{TaskDictionary, Turn};
use serde_json::{json, Value};

pub const GOLDEN_PROMPT_K2: &str = include_str!("../golden/system_prompt_k2.txt");

/// The ten-entry dictionary of the documented prompt example.
pub fn example_dictionary() -> TaskDictionary {
    TaskDictionary::new(
        [
            ("doubt", -64),
            ("alone", 46),
            ("adult", 84),
            ("fault", -19),
            ("brain", -45),
            ("blind", 68),
            ("coach", -31),
            ("alarm", 88),
            ("could", 25),
            ("cable", -32),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
    )
}

/// First turn of the documented example: `alarm, coach` → 88 − 31 = 57.
pub fn example_turn() -> Turn {
    Turn {
        index: 1,
        keys: vec!["alarm".into(), "coach".into()],
        values: vec![88, -31],
        true_increment: 57,
        true_state: 57,
        stateful: true,
    }
}

#[derive(Debug, Clone)]
pub struct Captured {
    pub body: Value,
    pub authorization: Option<String>,
}

#[derive(Clone)]
struct StubState {
    requests: Arc<Mutex<Vec<Captured>>>,
    remaining_failures: Arc<AtomicUsize>,
    fail_status: u16,
    reply: String,
}

/// A chat-completions endpoint on 127.0.0.1 that fails the first
/// `fail_first` requests with `fail_status`, then answers every request
/// with `reply`. The server lives for the rest of the test process.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Captured>>>,
}

impl StubServer {
    pub fn spawn(fail_first: usize, fail_status: u16, reply: &str) -> StubServer {
        let state = StubState {
            requests: Arc::new(Mutex::new(Vec::new())),
            remaining_failures: Arc::new(AtomicUsize::new(fail_first)),
            fail_status,
            reply: reply.to_string(),
        };
        let requests = Arc::clone(&state.requests);
        let (tx, rx) = mpsc::channel::<SocketAddr>();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(1)
                .enable_all()
                .build()
                .expect("runtime");
            rt.block_on(async move {
                let app = Router::new().route("/v1/chat/completions", post(handle)).with_state(state);
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
                tx.send(listener.local_addr().expect("addr")).expect("send addr");
                axum::serve(listener, app).await.expect("serve");
            });
        });
        let addr = rx.recv().expect("stub address");
        StubServer {
            url: format!("http://{addr}/v1/chat/completions"),
            requests,
        }
    }

    pub fn captured(&self) -> Vec<Captured> {
        self.requests.lock().unwrap().clone()
    }
}

async fn handle(State(state): State<StubState>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    state.requests.lock().unwrap().push(Captured {
        body,
        authorization: headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string),
    });
    let fail = state
        .remaining_failures
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok();
    if fail {
        let status = StatusCode::from_u16(state.fail_status).expect("status");
        return (status, Json(json!({ "error": { "message": "injected failure" } })));
    }
    (
        StatusCode::OK,
        Json(json!({
            "id": "stub-1",
            "object": "chat.completion",
            "choices": [{
                "index": 0,
                "message": { "role": "assistant", "content": state.reply },
                "finish_reason": "stop"
            }],
            "usage": { "prompt_tokens": 321, "completion_tokens": 7, "total_tokens": 328 }
        })),
    )
}

/// Checks a request body against the chat-completions schema the client
/// documents. Returns a description of the first violation.
pub fn check_wire_schema(body: &Value) -> Result<(), String> {
    let obj = body.as_object().ok_or("body is not an object")?;
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    if keys != ["max_tokens", "messages", "model", "temperature", "top_p"] {
        return Err(format!("unexpected top-level keys {keys:?}"));
    }
    if !obj["model"].is_string() {
        return Err("model is not a string".into());
    }
    for k in ["temperature", "top_p"] {
        if !obj[k].is_f64() {
            return Err(format!("{k} is not a number"));
        }
    }
    if !obj["max_tokens"].is_u64() {
        return Err("max_tokens is not an unsigned integer".into());
    }
    let msgs = obj["messages"].as_array().ok_or("messages is not an array")?;
    for m in msgs {
        let m = m.as_object().ok_or("message is not an object")?;
        let mut mk: Vec<&str> = m.keys().map(String::as_str).collect();
        mk.sort_unstable();
        if mk != ["content", "role"] {
            return Err(format!("message keys {mk:?}"));
        }
        if !matches!(m["role"].as_str(), Some("system" | "user" | "assistant")) {
            return Err(format!("role {}", m["role"]));
        }
        if !m["content"].is_string() {
            return Err("content is not a string".into());
        }
    }
    if msgs.first().and_then(|m| m["role"].as_str()) != Some("system") {
        return Err("first message is not the system prompt".into());
    }
    if msgs.last().and_then(|m| m["role"].as_str()) != Some("user") {
        return Err("last message is not a user message".into());
    }
    Ok(())
}
