//! The remote backend against an in-process server speaking the embedder
//! protocol, compared with the cosine backend over the same vectors.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Value};
use trajcurate::similarity::{CosineBackend, EmbeddingRecord, EmbeddingTable, RemoteBackend, SimilarityProvider};
use trajcurate::trajectory::write_jsonl;

const DIM: usize = 16;

/// Deterministic unit vector from hashed character trigrams.
fn toy_embed(text: &str) -> Vec<f64> {
    let mut v = [0.0; DIM];
    let chars: Vec<char> = format!("  {text}  ").chars().collect();
    for w in chars.windows(3) {
        let mut h: u64 = 1469598103934665603;
        for c in w {
            h = (h ^ *c as u64).wrapping_mul(1099511628211);
        }
        v[(h % DIM as u64) as usize] += if h & 1 == 0 { 1.0 } else { -0.5 };
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

struct Server {
    url: String,
    embed_calls: Arc<AtomicUsize>,
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) {
    let msg = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(msg.as_bytes()).unwrap();
}

fn handle(mut stream: TcpStream, calls: &AtomicUsize, wrong_dim: bool) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut request_line = String::new();
    reader.read_line(&mut request_line).unwrap();
    let mut length = 0;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        if line == "\r\n" || line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            length = v.trim().parse().unwrap();
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    if request_line.starts_with("GET /health") {
        respond(
            &mut stream,
            "200 OK",
            &json!({"model_id": "toy-trigram", "dim": DIM}).to_string(),
        );
    } else if request_line.starts_with("POST /embed") {
        calls.fetch_add(1, Ordering::SeqCst);
        let req: Value = serde_json::from_slice(&body).unwrap();
        let vectors: Vec<Vec<f64>> = req["texts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| {
                let mut v = toy_embed(t.as_str().unwrap());
                if wrong_dim {
                    v.push(0.0);
                }
                v
            })
            .collect();
        respond(&mut stream, "200 OK", &json!({"vectors": vectors}).to_string());
    } else {
        respond(&mut stream, "404 Not Found", "{}");
    }
}

fn serve(wrong_dim: bool) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let embed_calls = Arc::new(AtomicUsize::new(0));
    let calls = Arc::clone(&embed_calls);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let calls = Arc::clone(&calls);
            thread::spawn(move || handle(stream.unwrap(), &calls, wrong_dim));
        }
    });
    Server { url, embed_calls }
}

fn probe_texts() -> Vec<String> {
    (0..50)
        .map(|i| match i % 5 {
            0 => format!("[{i}] button 'Add to cart'"),
            1 => format!("buy red shoes size {i}"),
            2 => format!("<think>\nstep {i}\n</think>\nclick('a{i}')"),
            3 => format!("RootWebArea 'Shop' {}", "x".repeat(i)),
            _ => format!("ünïcödé text {i} ✓"),
        })
        .collect()
}

#[test]
fn health_sets_identity() {
    let server = serve(false);
    let remote = RemoteBackend::connect(&server.url).unwrap();
    assert_eq!(remote.id(), format!("remote:toy-trigram:dim{DIM}:affine01"));
    assert_eq!(remote.dim(), DIM);
}

#[test]
fn remote_matches_cosine_over_the_same_vectors() {
    let server = serve(false);
    let texts = probe_texts();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("toy.jsonl");
    let records: Vec<EmbeddingRecord> = texts
        .iter()
        .map(|t| EmbeddingRecord::for_text(t, toy_embed(t)))
        .collect();
    write_jsonl(&records, &file).unwrap();
    let table = EmbeddingTable::load(&file).unwrap();
    assert_eq!(table.len(), 50);
    let cosine = CosineBackend::from_file(&file).unwrap();
    let remote = RemoteBackend::connect(&server.url).unwrap();

    let pairs: Vec<(&str, &str)> = texts
        .iter()
        .flat_map(|a| texts.iter().map(move |b| (a.as_str(), b.as_str())))
        .collect();
    let r = remote.sim_many(&pairs).unwrap();
    let c = cosine.sim_many(&pairs).unwrap();
    for ((pair, x), y) in pairs.iter().zip(&r).zip(&c) {
        assert!((x - y).abs() <= 1e-6, "{pair:?}: remote {x} cosine {y}");
    }
    // 50 distinct texts fit in one batch; later calls hit the cache.
    assert_eq!(server.embed_calls.load(Ordering::SeqCst), 1);
    remote.sim(&texts[0], &texts[1]).unwrap();
    assert_eq!(server.embed_calls.load(Ordering::SeqCst), 1);
}

#[test]
fn large_requests_are_chunked() {
    let server = serve(false);
    let remote = RemoteBackend::connect(&server.url).unwrap();
    let texts: Vec<String> = (0..150).map(|i| format!("text number {i}")).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    remote.prefetch(&refs).unwrap();
    assert_eq!(server.embed_calls.load(Ordering::SeqCst), 3);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let server = serve(true);
    let remote = RemoteBackend::connect(&server.url).unwrap();
    let err = remote.sim("a", "b").unwrap_err().to_string();
    assert!(err.contains("dimension"), "{err}");
}

#[test]
fn unreachable_server_fails_to_connect() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    assert!(RemoteBackend::connect(&url).is_err());
}
