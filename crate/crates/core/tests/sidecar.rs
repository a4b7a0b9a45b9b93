mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;

use common::*;
use detagnostic_core::controller::{Controller, ControllerConfig, EpochReport};
use detagnostic_core::dataset::{parse_coco, Split};
use detagnostic_core::eval::{coco_map, parse_detections};
use detagnostic_core::sidecar::{bind, run_session, serve_listener, ServeOptions, Session};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn epoch_line(r: &EpochReport) -> String {
    json!({"kind": "epoch_end", "epoch": r.epoch, "iterations": r.iterations_in_epoch,
           "val_ap": r.val_metric, "lr": r.current_lr})
    .to_string()
}

fn hello_line(cfg: &ControllerConfig) -> String {
    json!({"kind": "hello", "config": cfg}).to_string()
}

fn random_tape(rng: &mut ChaCha8Rng, len: usize) -> Vec<EpochReport> {
    let metrics: Vec<f64> = (0..len).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
    let mut tape = tape_from(&metrics, 7, 0.01);
    for r in &mut tape {
        r.iterations_in_epoch = rng.gen_range(1..40);
    }
    tape
}

fn session_script(cfg: &ControllerConfig, tape: &[EpochReport]) -> Vec<String> {
    let mut lines = vec![hello_line(cfg)];
    lines.extend(tape.iter().map(epoch_line));
    lines.push(r#"{"kind":"bye"}"#.to_string());
    lines
}

#[test]
fn protocol_decisions_match_library() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let cfg = ControllerConfig {
            lr_patience: rng.gen_range(0..5),
            stop_patience: rng.gen_range(0..8),
            lr_iteration_patience: rng.gen_range(0..100),
            stop_iteration_patience: rng.gen_range(0..200),
            ..Default::default()
        };
        let tape = random_tape(&mut rng, 30);
        let mut lib = Controller::new(cfg.clone()).unwrap();
        let mut session = Session::new("t");
        let ack: Value = serde_json::from_str(&session.handle_line(&hello_line(&cfg))).unwrap();
        assert_eq!(ack["kind"], "ack");
        assert_eq!(ack["config"], serde_json::to_value(&cfg).unwrap());
        for r in &tape {
            let line = session.handle_line(&epoch_line(r));
            if lib.is_stopped() {
                assert!(line.contains("\"lifecycle\""), "case {case}: {line}");
                continue;
            }
            let d = lib.observe(r).unwrap();
            let payload = serde_json::to_string(&d).unwrap();
            let want = format!("{{\"kind\":\"decision\",{}", &payload[1..]);
            assert_eq!(line, want, "case {case}");
        }
    }
}

#[test]
fn first_decision_wire_form() {
    let mut s = Session::new("t");
    s.handle_line(r#"{"kind":"hello"}"#);
    let line = s.handle_line(r#"{"kind":"epoch_end","epoch":1,"iterations":10,"val_ap":0.5,"lr":0.01}"#);
    assert_eq!(line, r#"{"kind":"decision","action":"continue","best_metric":0.5,"should_checkpoint":true}"#);
}

#[test]
fn error_codes() {
    let mut s = Session::new("t");
    let code = |line: String| serde_json::from_str::<Value>(&line).unwrap()["code"].as_str().map(str::to_string);
    assert_eq!(code(s.handle_line(r#"{"kind":"epoch_end"}"#)).as_deref(), Some("bad_sequence"));
    assert_eq!(code(s.handle_line("{not json")).as_deref(), Some("bad_json"));
    assert_eq!(code(s.handle_line(r#"{"kind":"hello","config":{"lr_patience":"x"}}"#)).as_deref(), Some("bad_schema"));
    assert_eq!(code(s.handle_line(r#"{"kind":"hello","template":"nope"}"#)).as_deref(), Some("bad_config"));
    assert_eq!(code(s.handle_line(r#"{"kind":"hello","config":{"stop_patience":1}}"#)), None);
    let bad = s.handle_line(r#"{"kind":"epoch_end","epoch":1,"iterations":"many","val_ap":0.1,"lr":0.1}"#);
    assert!(bad.contains("bad_schema") && bad.contains("iterations"), "{bad}");
    s.handle_line(r#"{"kind":"epoch_end","epoch":1,"iterations":3,"val_ap":0.1,"lr":0.1}"#);
    assert_eq!(
        code(s.handle_line(r#"{"kind":"epoch_end","epoch":3,"iterations":3,"val_ap":0.1,"lr":0.1}"#)).as_deref(),
        Some("bad_sequence")
    );
    let stop = s.handle_line(r#"{"kind":"epoch_end","epoch":2,"iterations":3,"val_ap":0.1,"lr":0.1}"#);
    assert!(stop.contains("\"stop\""), "{stop}");
    assert_eq!(
        code(s.handle_line(r#"{"kind":"epoch_end","epoch":3,"iterations":3,"val_ap":0.1,"lr":0.1}"#)).as_deref(),
        Some("lifecycle")
    );
    assert!(s.handle_line(r#"{"kind":"snapshot_request"}"#).starts_with(r#"{"kind":"snapshot""#));
    assert!(s.handle_line(r#"{"kind":"bye"}"#).starts_with(r#"{"kind":"ack""#));
    assert_eq!(code(s.handle_line(r#"{"kind":"bye"}"#)).as_deref(), Some("lifecycle"));
}

#[test]
fn snapshot_resumes_in_new_session() {
    let tape = tape_from(&[0.1, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3, 0.3], 10, 0.01);
    let cfg = ControllerConfig { lr_patience: 2, stop_patience: 6, ..Default::default() };
    let mut whole = Session::new("a");
    whole.handle_line(&hello_line(&cfg));
    let expected: Vec<String> = tape.iter().map(|r| whole.handle_line(&epoch_line(r))).collect();

    let mut first = Session::new("b");
    first.handle_line(&hello_line(&cfg));
    let mut got: Vec<String> = tape[..3].iter().map(|r| first.handle_line(&epoch_line(r))).collect();
    let snap: Value = serde_json::from_str(&first.handle_line(r#"{"kind":"snapshot_request"}"#)).unwrap();
    let mut second = Session::new("c");
    second.handle_line(&json!({"kind": "hello", "snapshot": snap["snapshot"]}).to_string());
    got.extend(tape[3..].iter().map(|r| second.handle_line(&epoch_line(r))));
    assert_eq!(got, expected);
}

#[test]
fn evaluator_mode_scores_detections() {
    let dir = tempfile::tempdir().unwrap();
    let gt = json!({
        "images": [{"id": 1, "width": 100, "height": 100}],
        "categories": [{"id": 1, "name": "a"}],
        "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 10, 20, 20]}]
    });
    let dets = json!([{"image_id": 1, "category_id": 1, "bbox": [12, 10, 20, 20], "score": 0.9}]);
    let gt_path = dir.path().join("val.json");
    let det_path = dir.path().join("dets.json");
    std::fs::write(&gt_path, gt.to_string()).unwrap();
    std::fs::write(&det_path, dets.to_string()).unwrap();

    let index = parse_coco(gt.to_string().as_bytes(), Split::Val).unwrap();
    let want = coco_map(&parse_detections(dets.to_string().as_bytes()).unwrap(), &index, Split::Val).unwrap().ap_50_95;

    let mut s = Session::new("t");
    s.handle_line(r#"{"kind":"hello"}"#);
    let line = s.handle_line(
        &json!({"kind": "epoch_end", "epoch": 1, "iterations": 5, "lr": 0.01,
                "detections": det_path, "annotations": gt_path})
        .to_string(),
    );
    let v: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["best_metric"].as_f64().unwrap(), want);
    assert!(want > 0.0 && want < 1.0);

    let missing = s.handle_line(
        &json!({"kind": "epoch_end", "epoch": 2, "iterations": 5, "lr": 0.01,
                "detections": dir.path().join("nope.json"), "annotations": gt_path})
        .to_string(),
    );
    assert!(missing.contains("eval_failed"), "{missing}");
}

#[test]
fn stdio_line_accounting() {
    let tape = tape_from(&[0.1, 0.2, 0.3], 4, 0.01);
    let script = session_script(&ControllerConfig::default(), &tape).join("\n") + "\n";
    let mut out = Vec::new();
    let summary = run_session(script.as_bytes(), &mut out, &ServeOptions::default()).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_eq!(summary.requests, 5);
    assert!(summary.clean_bye);
}

fn serial(script: &[String]) -> Vec<String> {
    let input = script.join("\n") + "\n";
    let mut out = Vec::new();
    run_session(input.as_bytes(), &mut out, &ServeOptions::default()).unwrap();
    String::from_utf8(out).unwrap().lines().map(|l| strip_session(l)).collect()
}

// Session ids come from a global counter; drop them before comparing.
fn strip_session(line: &str) -> String {
    let mut v: Value = serde_json::from_str(line).unwrap();
    v.as_object_mut().unwrap().remove("session");
    v.to_string()
}

#[test]
fn concurrent_tcp_sessions_are_isolated() {
    let listener = bind(0).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || serve_listener(listener, ServeOptions::default()));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape_a = random_tape(&mut rng, 25);
    let tape_b = random_tape(&mut rng, 25);
    let script_a = session_script(&ControllerConfig { lr_patience: 1, stop_patience: 4, ..Default::default() }, &tape_a);
    let script_b = session_script(
        &ControllerConfig { lr_patience: 3, stop_patience: 20, lr_iteration_patience: 50, ..Default::default() },
        &tape_b,
    );

    let connect = || {
        let s = TcpStream::connect(addr).unwrap();
        s.set_nodelay(true).unwrap();
        (BufReader::new(s.try_clone().unwrap()), s)
    };
    let (mut ra, mut wa) = connect();
    let (mut rb, mut wb) = connect();
    let mut got_a = Vec::new();
    let mut got_b = Vec::new();
    // Interleave the two sessions request by request.
    for i in 0..script_a.len().max(script_b.len()) {
        for (script, r, w, got) in [(&script_a, &mut ra, &mut wa, &mut got_a), (&script_b, &mut rb, &mut wb, &mut got_b)] {
            if let Some(line) = script.get(i) {
                writeln!(w, "{line}").unwrap();
                let mut resp = String::new();
                r.read_line(&mut resp).unwrap();
                got.push(strip_session(resp.trim_end()));
            }
        }
    }
    assert_eq!(got_a, serial(&script_a));
    assert_eq!(got_b, serial(&script_b));
    assert_ne!(got_a, got_b);
}
