//! Remote backend and classifier against an in-process TCP peer.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::thread;

use serde_json::{json, Value};

use quotasteer::attribute::{quantize_target, TargetSpec};
use quotasteer::belief::{BeliefSource, RemoteClassifier};
use quotasteer::control::{self, LoopConfig, RunError};
use quotasteer::generator::{presets, Backend, BackendError, GenerationRequest, RemoteBackend};
use quotasteer::harness::{self, ExitStatus, ExperimentConfig};

/// Serve one connection, answering each request line with `reply(request)`.
/// Returning `None` closes the connection.
fn serve(reply: impl Fn(usize, Value) -> Option<Value> + Send + 'static) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut out = stream.try_clone().unwrap();
        for (i, line) in BufReader::new(stream).lines().enumerate() {
            let Ok(line) = line else { break };
            let req: Value = serde_json::from_str(&line).unwrap();
            match reply(i, req) {
                Some(v) => writeln!(out, "{v}").unwrap(),
                None => break,
            }
        }
    });
    format!("tcp://{addr}")
}

/// A compliant peer: always claims the first menu entry.
fn first_of_menu(i: usize, req: Value) -> Option<Value> {
    let label = req["menu"][0].as_str().unwrap().to_string();
    Some(json!({ "claimed_label": label, "image_ref": format!("remote:{i}:{label}") }))
}

#[test]
fn remote_backend_drives_the_loop() {
    let endpoint = serve(first_of_menu);
    let schema = std::sync::Arc::new(presets::binary_gender_schema());
    let ledger = quantize_target(&TargetSpec::uniform(schema), 10).unwrap();
    let mut backend = RemoteBackend::connect(&endpoint).unwrap();
    let report = control::run(&LoopConfig::new(ledger), &mut backend, &["h".into()]).unwrap();
    assert!(report.converged);
    assert_eq!(report.final_histogram().counts(), &[5, 5]);
}

#[test]
fn request_wire_format() {
    let (tx, rx) = std::sync::mpsc::channel();
    let endpoint = serve(move |i, req| {
        tx.send(req.clone()).unwrap();
        first_of_menu(i, req)
    });
    let mut backend = RemoteBackend::connect(&endpoint).unwrap();
    let mut req = GenerationRequest::with_menu(
        "Team wins",
        quotasteer::generator::PromptTier::AttributeList,
        vec!["male".into(), "female".into()],
    );
    req.quotas = Some(vec![3, 4]);
    backend.generate(&req).unwrap();
    let sent = rx.recv().unwrap();
    assert_eq!(sent["prompt_text"], "Team wins");
    assert_eq!(sent["tier"], "attribute_list");
    assert_eq!(sent["menu"], json!(["male", "female"]));
    assert_eq!(sent["quotas"], json!([3, 4]));
}

#[test]
fn peer_errors_surface_as_backend_failures() {
    let endpoint = serve(|_, _| Some(json!({ "error": "quota exceeded" })));
    let mut backend = RemoteBackend::connect(&endpoint).unwrap();
    let err = backend
        .generate(&GenerationRequest::baseline("h"))
        .unwrap_err();
    assert!(err.to_string().contains("quota exceeded"), "{err}");
}

#[test]
fn dropped_connection_keeps_the_partial_trace() {
    let endpoint = serve(|i, req| (i < 3).then(|| first_of_menu(i, req)).flatten());
    let schema = std::sync::Arc::new(presets::binary_gender_schema());
    let ledger = quantize_target(&TargetSpec::uniform(schema), 10).unwrap();
    let cfg = LoopConfig::new(ledger).with_batch_size(1);
    let mut backend = RemoteBackend::connect(&endpoint).unwrap();
    match control::run(&cfg, &mut backend, &["h".into()]) {
        Err(RunError::Backend { partial, source }) => {
            assert!(matches!(
                source,
                BackendError::Unavailable(_) | BackendError::Malformed(_)
            ));
            assert_eq!(partial.accepted().count(), 3);
            assert!(!partial.converged);
        }
        other => panic!("expected backend failure, got {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_exits_with_backend_failure() {
    // bind then drop to get a port nobody listens on
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "seed = 1\nn = 4\n[target]\nname = \"g\"\nkind = \"nominal\"\nlabels = [\"male\", \"female\"]\n\
         counts = [2, 2]\n[generator]\nbackend = \"remote\"\nendpoint = \"tcp://127.0.0.1:{port}\"\n"
    );
    let cfg = ExperimentConfig::from_toml_str(&text, dir.path()).unwrap();
    assert_eq!(harness::cmd_run(&cfg).status, ExitStatus::BackendFailure);
}

#[test]
fn remote_classifier_supplies_external_belief() {
    // the backend always claims "male"; the classifier reads the truth from the ref
    let gen =
        serve(|i, _| Some(json!({ "claimed_label": "male", "image_ref": format!("img{i}") })));
    let cls = serve(|_, req| {
        assert_eq!(req["schema"], "gender");
        assert_eq!(req["labels"], json!(["male", "female"]));
        let n: usize = req["image_ref"].as_str().unwrap()[3..].parse().unwrap();
        Some(json!({ "label": if n.is_multiple_of(2) { "male" } else { "female" } }))
    });
    let schema = std::sync::Arc::new(presets::binary_gender_schema());
    let ledger = quantize_target(&TargetSpec::uniform(schema), 6).unwrap();
    let cfg = LoopConfig::new(ledger)
        .with_batch_size(1)
        .with_belief(BeliefSource::external(
            RemoteClassifier::connect("remote", &cls).unwrap(),
        ));
    let mut backend = RemoteBackend::connect(&gen).unwrap();
    let report = control::run(&cfg, &mut backend, &["h".into()]).unwrap();
    assert!(report.converged);
    assert_eq!(report.final_histogram().counts(), &[3, 3]);
    assert!(report
        .accepted()
        .any(|r| r.claimed.as_deref() == Some("male") && r.believed.as_deref() == Some("female")));
}
