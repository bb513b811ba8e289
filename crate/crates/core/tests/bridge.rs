mod common;

use std::time::{Duration, Instant};

use serde_json::json;

use common::stub_bridge;
use ragdetect::bridge::{BridgeClient, BridgeError, Op};
use ragdetect::context::{assemble_prompt, SYSTEM_PROMPT};
use ragdetect::degrade::RasterImage;
use ragdetect::responder::{BridgeResponder, Responder};
use ragdetect::{Error, Label};

const T: Duration = Duration::from_secs(20);

fn spawn(args: &[&str]) -> BridgeClient {
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    BridgeClient::spawn(stub_bridge(), &args, T).unwrap()
}

fn write_png(dir: &std::path::Path, name: &str, value: u8) -> String {
    let path = dir.join(name);
    RasterImage::filled(8, 8, 3, value).unwrap().save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn hello_and_ping() {
    let mut c = spawn(&["--dim", "16", "--model", "toy"]);
    assert_eq!(c.hello().dim, 16);
    assert_eq!(c.hello().model, "toy");
    assert!(!c.hello().system_turn);
    c.ping().unwrap();
    c.ping().unwrap();
}

#[test]
fn embeddings_are_deterministic_per_file_content() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_png(dir.path(), "a.png", 10);
    let a2 = write_png(dir.path(), "a_copy.png", 10);
    let b = write_png(dir.path(), "b.png", 200);
    let mut c1 = spawn(&["--dim", "32"]);
    let mut c2 = spawn(&["--dim", "32"]);
    let va = c1.embed(&a).unwrap();
    assert_eq!(va.dim(), 32);
    assert_eq!(va, c2.embed(&a).unwrap());
    assert_eq!(va, c1.embed(&a2).unwrap());
    assert_ne!(va, c1.embed(&b).unwrap());
}

#[test]
fn missing_image_is_a_remote_error_and_connection_survives() {
    let mut c = spawn(&[]);
    match c.embed("/definitely/not/here.png") {
        Err(BridgeError::Remote { code, .. }) => assert_eq!(code, "not-found"),
        other => panic!("expected remote error, got {other:?}"),
    }
    c.ping().unwrap();
}

#[test]
fn scripted_answers_follow_the_query_image() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("script.json");
    std::fs::write(&script, r#"{"q1.png": "Fake.", "q2.png": "it is real"}"#).unwrap();
    let c = spawn(&["--script", script.to_str().unwrap(), "--answer", "unsure"]);
    let r = BridgeResponder::new("stub", vec![c]).unwrap();
    let shots = vec![("s.png".to_string(), Label::Real)];
    let d1 = r.respond(&assemble_prompt("q1.png", &shots).unwrap(), &[]).unwrap();
    let d2 = r.respond(&assemble_prompt("q2.png", &shots).unwrap(), &[]).unwrap();
    assert_eq!(d1.label, Label::Fake);
    assert_eq!(d1.raw_output.as_deref(), Some("Fake."));
    assert_eq!(d2.label, Label::Real);
    assert_eq!(r.id(), "bridge:stub");
    // Unscripted query falls back to the fixed answer, which does not parse.
    let e = r.respond(&assemble_prompt("q3.png", &shots).unwrap(), &[]);
    assert!(matches!(e, Err(Error::Parse { .. })));
}

#[test]
fn vote_mode_reads_context_labels() {
    let c = spawn(&["--vote"]);
    let r = BridgeResponder::new("stub", vec![c]).unwrap();
    let shots = vec![
        ("a".to_string(), Label::Fake),
        ("b".to_string(), Label::Fake),
        ("c".to_string(), Label::Real),
    ];
    assert_eq!(r.respond(&assemble_prompt("q", &shots).unwrap(), &[]).unwrap().label, Label::Fake);
}

#[test]
fn invalid_context_is_rejected_by_host() {
    let mut c = spawn(&[]);
    let bad = json!({ "context": [{ "text": "hello" }, { "image": "q.png" }] });
    match c.respond_raw(bad) {
        Err(BridgeError::Remote { code, .. }) => assert_eq!(code, "bad-context"),
        other => panic!("expected bad-context, got {other:?}"),
    }
    match c.request(Op::Respond, json!({ "context": 5 })) {
        Err(BridgeError::Remote { code, .. }) => assert_eq!(code, "bad-context"),
        other => panic!("expected bad-context, got {other:?}"),
    }
}

#[test]
fn system_prompt_sent_only_when_announced() {
    let dir = tempfile::tempdir().unwrap();
    let shots = vec![("s.png".to_string(), Label::Real)];
    let ctx = assemble_prompt("q.png", &shots).unwrap();
    for (flag, expect) in [(true, true), (false, false)] {
        let log = dir.path().join(format!("log_{flag}.jsonl"));
        let mut args = vec!["--log", log.to_str().unwrap()];
        if flag {
            args.push("--system-turn");
        }
        let mut c = spawn(&args);
        c.respond(&ctx, Some(SYSTEM_PROMPT)).unwrap();
        drop(c);
        let line = std::fs::read_to_string(&log).unwrap();
        let frame: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        assert_eq!(frame["op"], "respond");
        assert_eq!(frame["payload"]["system"].as_str() == Some(SYSTEM_PROMPT), expect);
        assert_eq!(frame["payload"]["context"], serde_json::to_value(&ctx).unwrap());
    }
}

#[test]
fn timeout_poisons_the_connection() {
    let args = vec!["--delay-ms".to_string(), "2000".to_string()];
    let mut c = BridgeClient::spawn(stub_bridge(), &args, Duration::from_millis(200)).unwrap();
    let start = Instant::now();
    assert!(matches!(c.ping(), Err(BridgeError::Timeout(_))));
    assert!(start.elapsed() < Duration::from_millis(1500));
    assert!(matches!(c.ping(), Err(BridgeError::Poisoned)));
}

#[test]
fn malformed_and_mismatched_frames_are_protocol_errors() {
    let mut c = spawn(&["--malformed"]);
    assert!(matches!(c.ping(), Err(BridgeError::Protocol { .. })));
    assert!(matches!(c.ping(), Err(BridgeError::Poisoned)));
    let mut c = spawn(&["--wrong-id"]);
    assert!(matches!(c.ping(), Err(BridgeError::Protocol { .. })));
}

fn scripted_host(script: &str) -> Result<BridgeClient, BridgeError> {
    BridgeClient::spawn("sh", &["-c".to_string(), script.to_string()], T)
}

#[test]
fn vector_length_must_match_hello() {
    let mut c = scripted_host(
        r#"echo '{"hello":{"protocol":1,"model":"liar","dim":4}}'; read l; echo '{"id":1,"reply":{"vector":[1,2]}}'; sleep 1"#,
    )
    .unwrap();
    assert!(matches!(c.embed("x.png"), Err(BridgeError::Protocol { .. })));
}

#[test]
fn unknown_protocol_version_is_refused() {
    let r = scripted_host(r#"echo '{"hello":{"protocol":99,"model":"m","dim":4}}'; sleep 1"#);
    assert!(matches!(r, Err(BridgeError::Protocol { .. })));
    let r = scripted_host(r#"echo 'hi there'; sleep 1"#);
    assert!(matches!(r, Err(BridgeError::Protocol { .. })));
}

#[test]
fn missing_host_program_fails_to_spawn() {
    assert!(BridgeClient::spawn_command_line("/no/such/host --flag", T).is_err());
    assert!(BridgeClient::spawn_command_line("   ", T).is_err());
}

#[test]
fn host_exit_is_reported_as_closed() {
    // `true` exits immediately without a hello frame.
    assert!(matches!(BridgeClient::spawn("true", &[], T), Err(BridgeError::Closed)));
}
