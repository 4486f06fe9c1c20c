use std::process::Command;
use std::time::{Duration, Instant};

use gazeward::mock::{MockBehavior, MockEmbedServer, MockReply};
use gazeward::remote::{CueKind, Payload, RemoteCueProvider, RetryPolicy};
use gazeward_core::cues::{CueMode, CueProvider, CueProviderConfig, PromptTemplate};
use gazeward_core::data::Sample;
use gazeward_core::Error;

fn config(endpoint: String) -> CueProviderConfig {
    CueProviderConfig {
        mode: CueMode::Remote,
        endpoint: Some(endpoint),
        timeout_ms: 2000,
        ..CueProviderConfig::default()
    }
}

fn seeded_server(behavior: impl FnOnce(MockBehavior) -> MockBehavior) -> (MockEmbedServer, CueProviderConfig) {
    let dims = CueProviderConfig::default().dims();
    let reply = MockReply::Seeded {
        visual_len: dims.visual_len(),
        text_len: dims.text_len(),
    };
    let server = MockEmbedServer::start("127.0.0.1:0", behavior(MockBehavior::new(reply))).unwrap();
    let cfg = config(server.endpoint());
    (server, cfg)
}

fn sample(id: &str) -> Sample {
    Sample {
        id: id.into(),
        features: vec![0.25; 24],
        label: None,
        source: "target".into(),
    }
}

#[test]
fn round_trip_and_cache() {
    let (server, cfg) = seeded_server(|b| b);
    let provider = RemoteCueProvider::new(&cfg).unwrap();
    let s = sample("u1");
    let v1 = provider.visual_cue(&s).unwrap();
    let v2 = provider.visual_cue(&s).unwrap();
    assert_eq!(v1, v2);
    assert_eq!(v1.tokens.data().len(), cfg.dims().visual_len());
    let t = provider.text_cue(&s, &PromptTemplate::default()).unwrap();
    assert_eq!(t.tokens.data().len(), cfg.dims().text_len());
    let log = server.requests();
    assert_eq!(log.len(), 2);
    assert_eq!(log[0].kind, Some(CueKind::Visual));
    assert_eq!(log[1].kind, Some(CueKind::Text));
    assert!(log.iter().all(|r| r.status == 200 && r.id.as_deref() == Some("u1")));
}

#[test]
fn wrong_length_is_a_protocol_error_without_retry() {
    let server = MockEmbedServer::start("127.0.0.1:0", MockBehavior::new(MockReply::Fixed(vec![1.0; 3]))).unwrap();
    let provider = RemoteCueProvider::new(&config(server.endpoint())).unwrap();
    let err = provider.visual_cue(&sample("a")).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err:?}");
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn transient_failures_follow_the_backoff_schedule() {
    let (server, cfg) = seeded_server(|b| b.failing_first(2));
    let provider = RemoteCueProvider::new(&cfg).unwrap();
    let start = Instant::now();
    provider
        .embed(CueKind::Visual, "x", Payload::Features(vec![0.0; 24]))
        .unwrap();
    assert!(start.elapsed() >= Duration::from_millis(500));
    let log = server.requests();
    let statuses: Vec<u16> = log.iter().map(|r| r.status).collect();
    assert_eq!(statuses, [500, 500, 200]);
    assert!(log[1].at - log[0].at >= Duration::from_millis(100));
    assert!(log[2].at - log[1].at >= Duration::from_millis(400));
}

#[test]
fn gives_up_after_the_last_retry() {
    let (server, cfg) = seeded_server(|b| b.failing_first(usize::MAX));
    let provider = RemoteCueProvider::new(&cfg).unwrap().with_retry(RetryPolicy {
        backoff: vec![Duration::from_millis(5); 3],
    });
    let err = provider.visual_cue(&sample("a")).unwrap_err();
    assert!(err.is_retryable(), "{err:?}");
    assert_eq!(server.requests().len(), 4);
}

#[test]
fn timeouts_are_retried() {
    let (server, mut cfg) = seeded_server(|b| b.with_delay(Duration::from_millis(150)));
    cfg.timeout_ms = 50;
    let provider = RemoteCueProvider::new(&cfg).unwrap().with_retry(RetryPolicy {
        backoff: vec![Duration::from_millis(1)],
    });
    assert!(provider.visual_cue(&sample("slow")).is_err());
    std::thread::sleep(Duration::from_millis(400));
    assert_eq!(server.requests().len(), 2);
}

#[test]
fn prefetch_fetches_each_cue_once() {
    let (server, mut cfg) = seeded_server(|b| b);
    cfg.max_in_flight = 3;
    let provider = RemoteCueProvider::new(&cfg).unwrap();
    let samples: Vec<Sample> = (0..10).map(|i| sample(&format!("s{i}"))).collect();
    let prompt = PromptTemplate::default();
    provider.prefetch(&samples, &prompt).unwrap();
    assert_eq!(server.requests().len(), 20);
    for s in &samples {
        provider.visual_cue(s).unwrap();
        provider.text_cue(s, &prompt).unwrap();
    }
    assert_eq!(server.requests().len(), 20);
}

#[test]
fn remote_cues_drive_a_training_run() {
    let (server, _) = seeded_server(|b| b);
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_gazeward");
    let data = dir.path().join("data");
    let gen = Command::new(bin)
        .args(["datagen", "--n-labeled", "20", "--n-unlabeled", "30", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(gen.status.success());
    let out = Command::new(bin)
        .args([
            "train-ssl",
            "--cues",
            "remote",
            "--teacher-epochs",
            "1",
            "--ssl-epochs",
            "1",
            "--batch-size",
            "10",
        ])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("run"))
        .env_remove("OMNIGAZE_SEED")
        .env("OMNIGAZE_EMBED_URL", server.endpoint())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(server.requests().len(), 2 * 50);
}

#[test]
fn unreachable_service_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_gazeward");
    let data = dir.path().join("data");
    assert!(Command::new(bin)
        .args(["datagen", "--n-labeled", "5", "--n-unlabeled", "5", "--out"])
        .arg(&data)
        .output()
        .unwrap()
        .status
        .success());
    // Bind then drop to get a port with nothing listening.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let out = Command::new(bin)
        .args([
            "train-ssl",
            "--cues",
            "remote",
            "--teacher-epochs",
            "1",
            "--ssl-epochs",
            "1",
        ])
        .arg("--embed-url")
        .arg(format!("http://127.0.0.1:{port}"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("run"))
        .env_remove("OMNIGAZE_EMBED_URL")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
