use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use rand::{Rng, RngCore, SeedableRng};
use skyhost_core::pipeline::{BatchTriggerConfig, DataFormat, TransferOptions};
use skyhost_core::stream::{Broker, StreamClient};
use skyhost_core::transfer::{
    run_receive, run_transfer, Endpoints, ErrorCategory, ReceiveSpec, TransferError, TransferSpec,
};
use skyhost_core::uri::EndpointUri;

const BROKER: &str = "mem:9";

fn uri(s: &str) -> EndpointUri {
    EndpointUri::parse(s).unwrap()
}

fn random_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut v = vec![0u8; n];
    rand::rngs::StdRng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

fn env() -> (Arc<Broker>, Endpoints) {
    let b = Arc::new(Broker::new());
    let e = Endpoints::new().with_stream(BROKER, b.clone());
    (b, e)
}

fn reassemble(broker: &Broker, topic: &str) -> Vec<u8> {
    let mut chunks = Vec::new();
    for p in 0..broker.partitions(topic).unwrap() {
        for r in broker.read_all(topic, p).unwrap() {
            let off = u64::from_be_bytes(r.key.unwrap().try_into().unwrap());
            chunks.push((off, r.value));
        }
    }
    chunks.sort();
    chunks.into_iter().flat_map(|(_, v)| v).collect()
}

#[test]
fn raw_file_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = random_bytes(3_000_017, 1);
    let src = dir.path().join("src.bin");
    std::fs::write(&src, &data).unwrap();
    for (p, compress) in [(1, false), (4, true), (3, false)] {
        let dst = dir.path().join(format!("dst-{p}-{compress}.bin"));
        let opts = TransferOptions {
            chunk_bytes: 250_000,
            parallel: p,
            compression: compress,
            ..Default::default()
        };
        let spec = TransferSpec::new(
            uri(&format!("file://{}", src.display())),
            uri(&format!("file://{}", dst.display())),
            opts,
        );
        let report = run_transfer(&spec, &Endpoints::new()).unwrap();
        assert_eq!(std::fs::read(&dst).unwrap(), data, "P={p} compress={compress}");
        assert_eq!(report.batches, 13);
        assert!(report.bytes_moved >= data.len() as u64);
    }
}

#[test]
fn raw_file_to_stream_reassembles() {
    let dir = tempfile::tempdir().unwrap();
    let data = random_bytes(2_500_000, 2);
    let src = dir.path().join("src.bin");
    std::fs::write(&src, &data).unwrap();
    let (broker, env) = env();
    broker.create_topic("chunks", 3).unwrap();
    let opts = TransferOptions {
        chunk_bytes: 300_000,
        parallel: 2,
        ..Default::default()
    };
    let spec = TransferSpec::new(
        uri(&format!("file://{}", src.display())),
        uri(&format!("stream://{BROKER}/chunks")),
        opts,
    );
    let report = run_transfer(&spec, &env).unwrap();
    assert_eq!(report.records_moved, 9);
    assert_eq!(reassemble(&broker, "chunks"), data);
}

#[test]
fn csv_file_to_stream_round_robin() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("rows.csv");
    let mut body = String::from("id,v\n");
    for i in 0..3000 {
        body += &format!("{i},{}\n", "x".repeat(i % 17));
    }
    std::fs::write(&src, &body).unwrap();
    let (broker, env) = env();
    broker.create_topic("rows", 3).unwrap();
    let opts = TransferOptions {
        format: DataFormat::Csv,
        csv_header: true,
        trigger: BatchTriggerConfig::new(Some(4096), None, Some(500)).unwrap(),
        ..Default::default()
    };
    let spec = TransferSpec::new(
        uri(&format!("file://{}", src.display())),
        uri(&format!("stream://{BROKER}/rows")),
        opts,
    );
    let report = run_transfer(&spec, &env).unwrap();
    assert_eq!(report.records_moved, 3000);
    assert_eq!(report.emission_causes.total(), report.batches);
    let mut got = Vec::new();
    for p in 0..3 {
        let recs = broker.read_all("rows", p).unwrap();
        assert_eq!(recs.len(), 1000);
        got.extend(recs.into_iter().map(|r| String::from_utf8(r.value).unwrap()));
    }
    got.sort_by_key(|l| l.split(',').next().unwrap().parse::<u32>().unwrap());
    let want: Vec<String> = body.lines().skip(1).map(String::from).collect();
    assert_eq!(got, want);
}

#[test]
fn stream_to_stream_preserves_partitions_and_resumes() {
    let src = Arc::new(Broker::new());
    let dst = Arc::new(Broker::new());
    let env = Endpoints::new()
        .with_stream("src:1", src.clone())
        .with_stream("dst:1", dst.clone());
    src.create_topic("in", 4).unwrap();
    dst.create_topic("out", 4).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    for i in 0..2000u32 {
        let p = rng.random_range(0..4);
        let mut v = vec![0u8; 64];
        rng.fill_bytes(&mut v);
        src.produce("in", p, Some(&i.to_be_bytes()), &v).unwrap();
    }
    let opts = TransferOptions {
        preserve_partitions: true,
        parallel: 2,
        trigger: BatchTriggerConfig::new(Some(10_000), None, Some(100)).unwrap(),
        ..Default::default()
    };
    let spec = TransferSpec::new(uri("stream://src:1/in"), uri("stream://dst:1/out"), opts);
    let report = run_transfer(&spec, &env).unwrap();
    assert_eq!(report.records_moved, 2000);
    for p in 0..4 {
        let a: Vec<_> = src
            .read_all("in", p)
            .unwrap()
            .into_iter()
            .map(|r| (r.key, r.value))
            .collect();
        let b: Vec<_> = dst
            .read_all("out", p)
            .unwrap()
            .into_iter()
            .map(|r| (r.key, r.value))
            .collect();
        assert_eq!(a, b, "partition {p}");
    }
    assert_eq!(
        src.committed(&spec.group(), "in").unwrap(),
        src.end_offsets("in").unwrap().into_iter().map(Some).collect::<Vec<_>>()
    );

    // everything is committed, so a second run moves nothing
    let again = run_transfer(&spec, &env).unwrap();
    assert_eq!(again.records_moved, 0);
}

#[test]
fn preserve_partitions_needs_equal_counts() {
    let (broker, env) = env();
    broker.create_topic("a", 4).unwrap();
    broker.create_topic("b", 2).unwrap();
    let opts = TransferOptions {
        preserve_partitions: true,
        ..Default::default()
    };
    let spec = TransferSpec::new(
        uri(&format!("stream://{BROKER}/a")),
        uri(&format!("stream://{BROKER}/b")),
        opts,
    );
    let err = run_transfer(&spec, &env).unwrap_err();
    assert!(matches!(err, TransferError::Config(_)), "{err}");
    assert_eq!(err.category(), ErrorCategory::Usage);
}

#[test]
fn missing_destination_topic_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("x");
    std::fs::write(&src, b"hello").unwrap();
    let (_broker, env) = env();
    let spec = TransferSpec::new(
        uri(&format!("file://{}", src.display())),
        uri(&format!("stream://{BROKER}/nope")),
        TransferOptions::default(),
    );
    let err = run_transfer(&spec, &env).unwrap_err();
    assert_eq!(err.category().exit_code(), 2, "{err}");
}

#[test]
fn stream_to_object_is_rejected() {
    let (_broker, env) = env();
    let spec = TransferSpec::new(
        uri(&format!("stream://{BROKER}/t")),
        uri("file:///tmp/out"),
        TransferOptions::default(),
    );
    assert!(matches!(run_transfer(&spec, &env), Err(TransferError::Plan(_))));
}

#[test]
fn broker_down_is_connectivity_error() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("x");
    std::fs::write(&src, b"hello").unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let spec = TransferSpec::new(
        uri(&format!("file://{}", src.display())),
        uri(&format!("stream://127.0.0.1:{port}/t")),
        TransferOptions::default(),
    );
    let err = run_transfer(&spec, &Endpoints::new()).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Connectivity, "{err}");
}

#[test]
fn remote_receiver_process_topology() {
    let dir = tempfile::tempdir().unwrap();
    let data = random_bytes(1_000_000, 4);
    let src = dir.path().join("src.bin");
    let dst = dir.path().join("dst.bin");
    std::fs::write(&src, &data).unwrap();

    let rspec = ReceiveSpec {
        listen: "127.0.0.1:0".parse().unwrap(),
        destination: uri(&format!("file://{}", dst.display())),
        format: DataFormat::Raw,
        preserve_partitions: false,
        stage_dir: None,
        expected_connections: 0,
        queue_capacity: 4,
        max_write_rate: None,
    };
    let (tx, rx) = mpsc::channel();
    let recv = thread::spawn(move || run_receive(&rspec, &Endpoints::new(), |a| tx.send(a).unwrap()));
    let addr = rx.recv().unwrap();

    let opts = TransferOptions {
        chunk_bytes: 100_000,
        parallel: 3,
        compression: true,
        ..Default::default()
    };
    let mut spec = TransferSpec::new(
        uri(&format!("file://{}", src.display())),
        uri(&format!("file://{}", dst.display())),
        opts,
    );
    spec.remote_receiver = Some(addr.to_string());
    let report = run_transfer(&spec, &Endpoints::new()).unwrap();
    assert_eq!(report.batches, 10);
    let rr = recv.join().unwrap().unwrap();
    assert_eq!(rr.sink.batches, 10);
    assert_eq!(std::fs::read(&dst).unwrap(), data);
}
