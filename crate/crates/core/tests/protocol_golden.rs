mod support;

use std::net::TcpListener;
use std::sync::Arc;

use epimem::protocol::{serve_tcp, ClientOptions, RemoteScorer, ScoreResponse, Scorer, Transport};
use support::checks::{golden_transcript, protocol_equivalence, protocol_fixtures, toy_model};

#[test]
fn golden_transcript_is_reproduced_byte_for_byte() {
    golden_transcript().unwrap();
}

#[test]
fn golden_responses_follow_the_schema() {
    let dir = support::checks::fixtures_dir().join("protocol");
    let text = std::fs::read_to_string(dir.join("golden_uniform_responses.jsonl")).unwrap();
    let mut lines = text.lines();
    let hs: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(hs["v"], 1);
    assert!(hs["max_context_bytes"].is_u64());
    for line in lines {
        let resp = ScoreResponse::parse(line).unwrap();
        assert_eq!(resp.to_line(), line);
    }
}

#[test]
fn toy_model_over_tcp_matches_direct_calls() {
    let direct = Arc::new(epimem::ModelScorer64::new(toy_model(9), "toy"));
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let served: Arc<dyn Scorer> = direct.clone();
    std::thread::spawn(move || serve_tcp(served, listener));
    let remote = RemoteScorer::connect(&Transport::Tcp(addr.to_string()), 3, ClientOptions::default()).unwrap();
    assert_eq!(remote.model_name(), "toy");
    let fixtures = protocol_fixtures(9, 50);
    let worst = protocol_equivalence(direct.as_ref(), &remote, &fixtures).unwrap();
    assert!(worst <= 1e-9, "{worst}");
}
