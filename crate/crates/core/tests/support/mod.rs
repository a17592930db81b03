//! Test helpers: a scripted HTTP server and small dataset builders.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use unspsc_core::ingest::PurchaseRecord;
use unspsc_core::taxonomy::parse_code;

#[derive(Debug, Clone)]
pub enum Reply {
    Json(u16, String),
    /// Wait this long before answering, to trip client timeouts.
    Stall(Duration),
}

#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl SeenRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

pub struct ScriptedServer {
    pub url: String,
    seen: Arc<Mutex<Vec<SeenRequest>>>,
}

impl ScriptedServer {
    /// Answers requests with `replies` in order; once exhausted, repeats the last one.
    pub fn start(replies: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let script = Arc::new(Mutex::new(VecDeque::from(replies)));
        let seen_srv = Arc::clone(&seen);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let reply = {
                    let mut script = script.lock().unwrap();
                    if script.len() > 1 { script.pop_front().unwrap() } else { script.front().cloned().unwrap() }
                };
                let seen = Arc::clone(&seen_srv);
                thread::spawn(move || serve(stream, reply, &seen));
            }
        });
        Self { url, seen }
    }

    pub fn requests(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, reply: Reply, seen: &Mutex<Vec<SeenRequest>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 || h.trim().is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let find = |name: &str| headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.clone());
    let mut body = Vec::new();
    if let Some(len) = find("content-length").and_then(|v| v.parse::<usize>().ok()) {
        body.resize(len, 0);
        let _ = reader.read_exact(&mut body);
    } else if find("transfer-encoding").is_some_and(|v| v.eq_ignore_ascii_case("chunked")) {
        loop {
            let mut size = String::new();
            reader.read_line(&mut size).unwrap();
            let n = usize::from_str_radix(size.trim(), 16).unwrap_or(0);
            let mut chunk = vec![0; n + 2];
            reader.read_exact(&mut chunk).unwrap();
            if n == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..n]);
        }
    }
    seen.lock().unwrap().push(SeenRequest { method, path, headers, body: String::from_utf8_lossy(&body).into_owned() });

    let (status, text) = match reply {
        Reply::Json(status, text) => (status, text),
        Reply::Stall(d) => {
            thread::sleep(d);
            (200, completion("late"))
        }
    };
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let _ = stream.flush();
}

/// A minimal chat-completions success body.
pub fn completion(content: &str) -> String {
    serde_json::json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 40, "completion_tokens": 3, "total_tokens": 43}
    })
    .to_string()
}

const GOLD: [&str; 6] = ["43212110", "43211503", "31201512", "44121618", "10101501", "72101507"];

pub fn records(n: usize) -> Vec<PurchaseRecord> {
    (0..n)
        .map(|i| PurchaseRecord {
            record_id: format!("r{i:05}"),
            item_name: format!("Item {i}"),
            item_description: format!("Description of item {i}"),
            gold_code: parse_code(GOLD[i % GOLD.len()]).unwrap(),
            source_row: i + 1,
        })
        .collect()
}

/// Writes `n` records as a CSV with the default column names.
pub fn write_dataset(path: &Path, n: usize) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["Item Name", "Item Description", "Normalized UNSPSC"]).unwrap();
    for r in records(n) {
        w.write_record([r.item_name.as_str(), r.item_description.as_str(), &r.gold_code.to_string()]).unwrap();
    }
    w.flush().unwrap();
}
