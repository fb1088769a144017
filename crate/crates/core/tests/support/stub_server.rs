//! Minimal HTTP/1.1 server for exercising the tile client.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

pub struct Response {
    pub status: u16,
    pub body: Vec<u8>,
}

type Handler = dyn Fn(&str, usize) -> Response + Send + Sync;

/// Serves every request with `handler(path, nth_request_for_path)`, counting
/// from zero, and records when each request arrived.
pub struct StubServer {
    pub base: String,
    log: Arc<Mutex<Vec<(Instant, String)>>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(&str, usize) -> Response + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let shared = log.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (log, handler) = (shared.clone(), handler.clone());
                thread::spawn(move || serve(stream, &log, &*handler));
            }
        });
        StubServer { base, log }
    }

    pub fn requests(&self) -> Vec<(Instant, String)> {
        self.log.lock().unwrap().clone()
    }

    pub fn count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<(Instant, String)>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or("/").to_string();
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
            break;
        }
    }
    let nth = {
        let mut log = log.lock().unwrap();
        let nth = log.iter().filter(|(_, p)| *p == path).count();
        log.push((Instant::now(), path.clone()));
        nth
    };
    let resp = handler(&path, nth);
    let mut out = stream;
    let head = format!(
        "HTTP/1.1 {} Stub\r\nContent-Type: image/png\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        resp.status,
        resp.body.len()
    );
    let _ = out.write_all(head.as_bytes());
    let _ = out.write_all(&resp.body);
    let _ = out.flush();
}
