//! S3 backend against a minimal path-style HTTP server on loopback.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use skyhost_core::object::{ObjectError, RangeReader, S3Config, S3Object};
use skyhost_core::pipeline::{DataFormat, TransferOptions};
use skyhost_core::transfer::{run_transfer, Endpoints, ErrorCategory, TransferSpec};
use skyhost_core::uri::EndpointUri;

#[derive(Debug, Clone)]
struct Seen {
    method: String,
    path: String,
    range: Option<String>,
    authorization: Option<String>,
}

struct Server {
    endpoint: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

/// Serves `objects` (path -> body). With `honor_range` false every GET returns the
/// whole body with status 200.
fn serve(objects: Vec<(&str, Vec<u8>)>, honor_range: bool) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}", listener.local_addr().unwrap());
    let objects: Arc<Vec<(String, Vec<u8>)>> = Arc::new(objects.into_iter().map(|(p, b)| (p.to_string(), b)).collect());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let (objects, log) = (objects.clone(), log.clone());
            thread::spawn(move || connection(stream, &objects, &log, honor_range));
        }
    });
    Server { endpoint, seen }
}

fn connection(stream: TcpStream, objects: &[(String, Vec<u8>)], log: &Mutex<Vec<Seen>>, honor_range: bool) {
    let mut out = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut parts = request_line.split_whitespace();
        let (method, path) = (
            parts.next().unwrap_or("").to_string(),
            parts.next().unwrap_or("").to_string(),
        );
        let (mut range, mut authorization) = (None, None);
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            let (name, value) = line.split_once(':').unwrap_or((line, ""));
            match name.to_ascii_lowercase().as_str() {
                "range" => range = Some(value.trim().to_string()),
                "authorization" => authorization = Some(value.trim().to_string()),
                _ => {}
            }
        }
        log.lock().unwrap().push(Seen {
            method: method.clone(),
            path: path.clone(),
            range: range.clone(),
            authorization,
        });
        let Some((_, body)) = objects.iter().find(|(p, _)| *p == path) else {
            let _ = out.write_all(b"HTTP/1.1 404 Not Found\r\ncontent-length: 0\r\n\r\n");
            continue;
        };
        let (status, slice) = match range.as_deref().and_then(|r| r.strip_prefix("bytes=")) {
            Some(r) if honor_range && method == "GET" => {
                let (a, b) = r.split_once('-').unwrap();
                let (a, b): (usize, usize) = (a.parse().unwrap(), b.parse().unwrap());
                ("206 Partial Content", &body[a..=b])
            }
            _ => ("200 OK", &body[..]),
        };
        let head = format!("HTTP/1.1 {status}\r\ncontent-length: {}\r\n\r\n", slice.len());
        let _ = out.write_all(head.as_bytes());
        if method == "GET" {
            let _ = out.write_all(slice);
        }
    }
}

fn body(n: usize) -> Vec<u8> {
    (0..n).map(|i| (i * 31 % 251) as u8).collect()
}

fn config(server: &Server, signed: bool) -> S3Config {
    S3Config {
        endpoint: server.endpoint.clone(),
        region: "us-east-1".into(),
        credentials: signed.then(|| ("AKTEST".to_string(), "secret".to_string())),
    }
}

#[test]
fn ranged_reads_are_signed_and_exact() {
    let data = body(10_000);
    let server = serve(vec![("/bucket/dir/obj%20one.bin", data.clone())], true);
    let o = S3Object::open(config(&server, true), "bucket", "dir/obj one.bin").unwrap();
    assert_eq!(o.object_ref().size_bytes, 10_000);
    assert_eq!(o.read_range(0, 10).unwrap(), &data[..10]);
    assert_eq!(o.read_range(9_990, 10).unwrap(), &data[9_990..]);
    let seen = server.seen.lock().unwrap().clone();
    assert_eq!(seen[0].method, "HEAD");
    assert_eq!(seen[1].range.as_deref(), Some("bytes=0-9"));
    assert_eq!(seen[2].range.as_deref(), Some("bytes=9990-9999"));
    for s in &seen {
        let auth = s.authorization.as_deref().expect("signed request");
        assert!(auth.starts_with("AWS4-HMAC-SHA256 Credential=AKTEST/"), "{auth}");
        assert!(auth.contains("/us-east-1/s3/aws4_request"));
    }
}

#[test]
fn missing_object_and_ignored_range() {
    let server = serve(vec![("/b/k", body(100))], false);
    match S3Object::open(config(&server, false), "b", "nope") {
        Err(ObjectError::NotFound(url)) => assert!(url.ends_with("/b/nope")),
        other => panic!("expected NotFound, got {:?}", other.map(|o| o.object_ref())),
    }
    let o = S3Object::open(config(&server, false), "b", "k").unwrap();
    assert!(server.seen.lock().unwrap().iter().all(|s| s.authorization.is_none()));
    // a server that answers a range request with the whole object is not trusted
    assert!(matches!(o.read_range(10, 5), Err(ObjectError::Range { .. })));
}

#[test]
fn s3_to_file_transfer_through_the_pipeline() {
    let data = body(1_000_003);
    let server = serve(vec![("/bucket/big.bin", data.clone())], true);
    // the only test in this binary that reads the environment
    std::env::set_var("SKYHOST_S3_ENDPOINT", &server.endpoint);
    std::env::set_var("SKYHOST_S3_UNSIGNED", "1");

    let dir = tempfile::tempdir().unwrap();
    let dst = dir.path().join("out.bin");
    let opts = TransferOptions {
        format: DataFormat::Raw,
        chunk_bytes: 100_000,
        parallel: 3,
        ..Default::default()
    };
    let spec = TransferSpec::new(
        EndpointUri::parse("s3://bucket/big.bin").unwrap(),
        EndpointUri::parse(&format!("file://{}", dst.display())).unwrap(),
        opts.clone(),
    );
    let report = run_transfer(&spec, &Endpoints::new()).unwrap();
    // record bytes: each raw chunk carries its 8-byte offset key
    assert_eq!(report.bytes_moved, data.len() as u64 + 11 * 8);
    assert_eq!(std::fs::read(&dst).unwrap(), data);
    let seen = server.seen.lock().unwrap().clone();
    let gets: Vec<&Seen> = seen.iter().filter(|s| s.method == "GET").collect();
    assert_eq!(gets.len(), 11, "one ranged GET per chunk");
    assert!(gets.iter().all(|s| s.path == "/bucket/big.bin" && s.range.is_some()));

    let missing = TransferSpec::new(
        EndpointUri::parse("s3://bucket/absent.bin").unwrap(),
        EndpointUri::parse(&format!("file://{}", dir.path().join("x").display())).unwrap(),
        opts,
    );
    let err = run_transfer(&missing, &Endpoints::new()).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Usage, "{err}");
}

#[test]
fn body_reader_sanity() {
    // the helper server must frame responses so keep-alive clients stay in sync
    let server = serve(vec![("/b/k", body(50))], true);
    let mut s = TcpStream::connect(server.endpoint.trim_start_matches("http://")).unwrap();
    s.write_all(b"GET /b/k HTTP/1.1\r\nrange: bytes=0-4\r\n\r\nGET /b/k HTTP/1.1\r\n\r\n")
        .unwrap();
    s.shutdown(std::net::Shutdown::Write).unwrap();
    let mut all = Vec::new();
    s.read_to_end(&mut all).unwrap();
    let text = String::from_utf8_lossy(&all);
    assert_eq!(text.matches("HTTP/1.1").count(), 2);
    assert!(text.starts_with("HTTP/1.1 206"));
}
