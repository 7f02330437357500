use std::sync::Arc;
use std::thread;

use skyhost_core::stream::{Broker, BrokerConfig, BrokerError, BrokerServer, RemoteBroker, StreamClient};

#[test]
fn concurrent_remote_producers_get_dense_offsets() {
    let server = BrokerServer::bind("127.0.0.1:0", Arc::new(Broker::new()))
        .unwrap()
        .spawn();
    let addr = server.local_addr().to_string();
    RemoteBroker::new(addr.clone()).create_topic("t", 2).unwrap();

    let producers = 6;
    let per = 300;
    thread::scope(|s| {
        for w in 0..producers {
            let addr = addr.clone();
            s.spawn(move || {
                let c = RemoteBroker::new(addr);
                for i in 0..per {
                    let v = format!("{w}:{i}");
                    c.produce("t", (i % 2) as u32, Some(&[w as u8]), v.as_bytes()).unwrap();
                }
            });
        }
    });

    let c = RemoteBroker::new(addr);
    assert_eq!(c.end_offsets("t").unwrap(), vec![(producers * per / 2) as u64; 2]);
    for p in 0..2 {
        let recs = c.fetch("t", p, 0, usize::MAX).unwrap();
        assert!(
            recs.iter().enumerate().all(|(i, r)| r.offset == i as u64),
            "offsets not dense"
        );
        // each producer's records keep their relative order
        let mut last = vec![None; producers];
        for r in recs {
            let text = String::from_utf8(r.value).unwrap();
            let (w, i) = text.split_once(':').unwrap();
            let (w, i): (usize, usize) = (w.parse().unwrap(), i.parse().unwrap());
            assert_eq!(r.key.as_deref(), Some(&[w as u8][..]));
            assert!(last[w].is_none_or(|l| l < i));
            last[w] = Some(i);
        }
    }
    server.shutdown();
}

#[test]
fn persistent_broker_keeps_log_and_commits_across_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = || BrokerConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let server = BrokerServer::bind("127.0.0.1:0", Arc::new(Broker::with_config(config()).unwrap()))
        .unwrap()
        .spawn();
    let c = RemoteBroker::new(server.local_addr().to_string());
    c.create_topic("log", 3).unwrap();
    for p in 0..3 {
        let vals: Vec<Vec<u8>> = (0..50).map(|i| vec![p as u8; i]).collect();
        let batch: Vec<(Option<&[u8]>, &[u8])> = vals.iter().map(|v| (None, v.as_slice())).collect();
        assert_eq!(c.produce_batch("log", p, &batch).unwrap(), 0);
    }
    c.commit("g", "log", 1, 20).unwrap();
    server.shutdown();

    let server = BrokerServer::bind("127.0.0.1:0", Arc::new(Broker::with_config(config()).unwrap()))
        .unwrap()
        .spawn();
    let c = RemoteBroker::new(server.local_addr().to_string());
    assert_eq!(c.end_offsets("log").unwrap(), vec![50, 50, 50]);
    assert_eq!(c.committed("g", "log").unwrap(), vec![None, Some(20), None]);
    let recs = c.fetch("log", 2, 49, usize::MAX).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].value, vec![2u8; 49]);
    assert!(matches!(c.create_topic("log", 3), Err(BrokerError::TopicExists { .. })));
    assert!(matches!(
        c.fetch("log", 3, 0, 10),
        Err(BrokerError::PartitionOutOfRange { .. })
    ));
    server.shutdown();
}
