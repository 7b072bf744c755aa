//! Shared test support: a tiny HTTP server speaking the chat-completions
//! wire format.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use comal::agent::ScriptedBackend;
use comal::llm_client::{BackendConfig, ChatTurn};
use serde_json::{json, Value};

/// Always set, so it can stand in for an API key without touching the
/// process environment.
pub const KEY_VAR: &str = "PATH";

pub struct Stub {
    pub url: String,
    hits: Arc<AtomicUsize>,
}

impl Stub {
    /// Requests received so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn config(&self) -> BackendConfig {
        BackendConfig {
            endpoint: self.url.clone(),
            api_key_env: KEY_VAR.into(),
            backoff_base_s: 0.01,
            timeout_s: 5.0,
            ..BackendConfig::default()
        }
    }
}

type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

fn read_request(stream: &mut TcpStream) -> Option<Value> {
    let mut reader = BufReader::new(stream);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    serde_json::from_slice(&body).ok()
}

/// Serves every request with `handler(request_index, body)`, one thread per
/// connection.
pub fn serve(handler: impl Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let handler: Arc<Handler> = Arc::new(handler);
    let counter = Arc::clone(&hits);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let handler = Arc::clone(&handler);
            let counter = Arc::clone(&counter);
            std::thread::spawn(move || {
                let Some(body) = read_request(&mut stream) else {
                    return;
                };
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, text) = handler(n, &body);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            });
        }
    });
    Stub { url, hits }
}

pub fn completion(content: &str) -> String {
    json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
}

/// A remote model that is really the scripted backend.
pub fn scripted_stub() -> Stub {
    serve(|_, body| {
        let turns: Vec<ChatTurn> = serde_json::from_value(body["messages"].clone()).unwrap();
        match ScriptedBackend.answer(&turns) {
            Ok(text) => (200, completion(&text)),
            Err(e) => (400, json!({ "error": e.to_string() }).to_string()),
        }
    })
}
