use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::process::{Child, Command, Output, Stdio};
use std::thread;

fn skyhost(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skyhost")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Broker {
    child: Child,
    addr: String,
}

impl Broker {
    fn start() -> Self {
        let mut child = Command::new(env!("CARGO_BIN_EXE_skyhost"))
            .args(["broker", "serve", "--port", "0"])
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
        let addr = loop {
            let l = lines.next().expect("broker exited").unwrap();
            if let Some(a) = l.strip_prefix("broker listening on ") {
                break a.to_string();
            }
        };
        thread::spawn(move || for _ in lines {});
        Self { child, addr }
    }

    fn uri(&self, topic: &str) -> String {
        format!("stream://{}/{topic}", self.addr)
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn cp_file_to_stream_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.bin");
    let data: Vec<u8> = (0..3_000_017u32).map(|i| (i % 253) as u8).collect();
    std::fs::write(&src, &data).unwrap();
    let b = Broker::start();
    let o = skyhost(&["broker", "topic", "create", &b.uri("objs"), "--partitions", "2"]);
    assert!(o.status.success());

    let o = skyhost(&[
        "cp",
        &format!("file://{}", src.display()),
        &b.uri("objs"),
        "--chunk-bytes",
        "1M",
        "--parallel",
        "2",
        "--transport-port",
        "0",
        "--report",
        "json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["batches"], 4);
    assert_eq!(report["records_moved"], 4);

    let out = dir.path().join("out.bin");
    let o = skyhost(&[
        "broker",
        "consume",
        &b.uri("objs"),
        "--format",
        "reassemble",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&out).unwrap(), data);
}

#[test]
fn csv_lines_round_trip_through_a_topic() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("rows.csv");
    let body: String = std::iter::once("id,v\n".to_string())
        .chain((0..500).map(|i| format!("{i},x{i}\n")))
        .collect();
    std::fs::write(&src, &body).unwrap();
    let b = Broker::start();
    skyhost(&["broker", "topic", "create", &b.uri("rows"), "--partitions", "1"]);
    let o = skyhost(&[
        "cp",
        &format!("file://{}", src.display()),
        &b.uri("rows"),
        "--format",
        "csv",
        "--csv-header",
        "--batch-bytes",
        "1K",
        "--transport-port",
        "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = skyhost(&["broker", "consume", &b.uri("rows")]);
    let expect: String = (0..500).map(|i| format!("{i},x{i}\n")).collect();
    assert_eq!(stdout(&o), expect);
}

#[test]
fn predict_text_output() {
    let o = skyhost(&[
        "predict",
        "stream",
        "--bandwidth",
        "100M",
        "--arrival-rate",
        "10000",
        "--message-bytes",
        "100K",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("throughput = 100 MB/s"), "{text}");
    assert!(text.contains("limiting stage = network"), "{text}");

    let o = skyhost(&[
        "predict",
        "object",
        "--bandwidth",
        "1G",
        "--t-api-ms",
        "56",
        "--tau-ms-per-mb",
        "7.59",
        "--chunk-bytes",
        "96M",
        "--json",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let want = 96e6 / (0.056 + 7.59e-3 * 96.0);
    let got = v["throughput_bytes_per_sec"].as_f64().unwrap();
    assert!(((got - want) / want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn exit_codes_follow_error_category() {
    // usage
    assert_eq!(skyhost(&["cp", "gs://b/k", "file:///tmp/x"]).status.code(), Some(2));
    assert_eq!(
        skyhost(&["cp", "file:///definitely/not/here", "file:///tmp/x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(skyhost(&["cp", "/no/scheme", "file:///tmp/x"]).status.code(), Some(2));
    assert_eq!(
        skyhost(&[
            "predict",
            "stream",
            "--bandwidth",
            "-1",
            "--arrival-rate",
            "1",
            "--message-bytes",
            "1"
        ])
        .status
        .code(),
        Some(2)
    );

    // connectivity: nothing listens on this port
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("f");
    std::fs::write(&src, b"abc").unwrap();
    let o = skyhost(&[
        "cp",
        &format!("file://{}", src.display()),
        &format!("stream://127.0.0.1:{port}/t"),
        "--transport-port",
        "0",
        "--report",
        "json",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["error"]["category"], "connectivity");
    assert_eq!(v["error"]["exit_code"], 4);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("skyhost: connectivity error:"));
}
