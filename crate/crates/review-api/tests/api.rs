use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

use uniact_core::agent::EpisodeConfig;
use uniact_core::eval::run_task_episode;
use uniact_core::filter::{apply_review, ReviewAnnotation, ReviewOutcome};
use uniact_core::reflection::{build_pair, Correction};
use uniact_core::sim::OracleProvider;
use uniact_core::store::TraceStore;
use uniact_core::{TaskRegistry, Trace};
use uniact_review_api::{router, AppState};

struct Fixture {
    _dir: TempDir,
    store: TraceStore,
    app: Router,
    ids: Vec<String>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = TraceStore::open(dir.path()).unwrap();
    let registry = TaskRegistry::bundled();
    let mut ids = Vec::new();
    for id in ["form_contact", "files_delete", "browser_bookmark_two"] {
        let task = registry.get(id).unwrap();
        let t = run_task_episode(task, &OracleProvider::new(), 0, &EpisodeConfig::default()).trace;
        ids.push(store.save_trace(&t).unwrap());
    }
    ids.sort();
    let app = router(AppState::new(store.clone(), registry));
    Fixture {
        _dir: dir,
        store,
        app,
        ids,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn raw(app: &Router, uri: &str) -> Vec<u8> {
    let req = Request::builder().uri(uri).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    resp.into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec()
}

fn review(trace_id: &str, error_step: usize) -> Value {
    json!({
        "type": "review",
        "trace_id": trace_id,
        "error_step": error_step,
        "verdict": "truncate",
        "annotator": "ann-1",
        "note": "clicked the wrong thing"
    })
}

#[tokio::test]
async fn lists_three_summaries_in_id_order() {
    let f = fixture();
    let (code, body) = call(&f.app, "GET", "/traces", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["total"], 3);
    let ids: Vec<&str> = body["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["trace_id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, f.ids.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(body["items"]
        .as_array()
        .unwrap()
        .iter()
        .all(|i| i["status"] == "pending"));
}

#[tokio::test]
async fn paging_and_bad_params() {
    let f = fixture();
    let (code, body) = call(&f.app, "GET", "/traces?page=2&page_size=2", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["items"].as_array().unwrap().len(), 1);
    let (code, body) = call(&f.app, "GET", "/traces?page=9", None).await;
    assert_eq!(code, StatusCode::OK);
    assert!(body["items"].as_array().unwrap().is_empty());
    for bad in [
        "page=0",
        "page=x",
        "page_size=0",
        "page_size=1000",
        "status=done",
        "colour=red",
    ] {
        let (code, _) = call(&f.app, "GET", &format!("/traces?{bad}"), None).await;
        assert_eq!(code, StatusCode::BAD_REQUEST, "{bad}");
    }
}

#[tokio::test]
async fn status_filter_returns_only_matching_items() {
    let f = fixture();
    let id = &f.ids[1];
    let (code, _) = call(
        &f.app,
        "POST",
        &format!("/traces/{id}/annotations"),
        Some(review(id, 2)),
    )
    .await;
    assert_eq!(code, StatusCode::CREATED);
    let (_, pending) = call(&f.app, "GET", "/traces?status=pending", None).await;
    assert_eq!(pending["total"], 2);
    let (_, annotated) = call(&f.app, "GET", "/traces?status=annotated", None).await;
    assert_eq!(annotated["items"][0]["trace_id"], id.as_str());
}

#[tokio::test]
async fn fetch_returns_record_overlays_and_replay_flag() {
    let f = fixture();
    let id = &f.ids[0];
    let (code, body) = call(&f.app, "GET", &format!("/traces/{id}"), None).await;
    assert_eq!(code, StatusCode::OK);
    let trace = f.store.load_trace(id).unwrap();
    assert_eq!(
        body["record"]["steps"].as_array().unwrap().len(),
        trace.len()
    );
    assert_eq!(body["overlays"].as_array().unwrap().len(), trace.len());
    assert_eq!(body["replay_verified"], true);
    let stored: Value = serde_json::from_slice(&f.store.load_bytes(id).unwrap()).unwrap();
    assert_eq!(body["record"], stored);
    assert_eq!(
        raw(&f.app, &format!("/traces/{id}/raw")).await,
        f.store.load_bytes(id).unwrap()
    );

    let (code, _) = call(&f.app, "GET", "/traces/00ff", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, _) = call(&f.app, "GET", "/traces/not-an-id", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn tampered_record_fails_replay_check() {
    let f = fixture();
    let mut t: Trace = f.store.load_trace(&f.ids[0]).unwrap();
    let last = t.steps.len() - 1;
    t.steps.swap(0, last);
    for (i, s) in t.steps.iter_mut().enumerate() {
        s.step_index = i;
    }
    let t = t.with_content_id();
    let id = f.store.save_trace(&t).unwrap();
    let (_, body) = call(&f.app, "GET", &format!("/traces/{id}"), None).await;
    assert_eq!(body["replay_verified"], false);
}

#[tokio::test]
async fn repeated_reads_are_identical() {
    let f = fixture();
    let uri = format!("/traces/{}", f.ids[2]);
    assert_eq!(raw(&f.app, &uri).await, raw(&f.app, &uri).await);
    assert_eq!(raw(&f.app, "/traces").await, raw(&f.app, "/traces").await);
}

#[tokio::test]
async fn annotation_validation() {
    let f = fixture();
    let id = &f.ids[0];
    let uri = format!("/traces/{id}/annotations");
    let (code, body) = call(&f.app, "POST", &uri, Some(review(id, 99))).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"][0]["field"], "error_step");

    let bad_action = json!({
        "type": "correction",
        "trace_id": id,
        "step_index": 1,
        "corrected_thought": "Click the name field.",
        "corrected_action": "Click(0.5 0.5)",
        "kind": "error_correction"
    });
    let (code, body) = call(&f.app, "POST", &uri, Some(bad_action)).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"][0]["field"], "corrected_action");
    assert_eq!(body["fields"][0]["class"], "SyntaxError");

    let (code, _) = call(&f.app, "POST", &uri, Some(review("abcd", 1))).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, _) = call(
        &f.app,
        "POST",
        "/traces/00ff/annotations",
        Some(review("00ff", 1)),
    )
    .await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, _) = call(&f.app, "POST", &uri, Some(json!({"type": "status"}))).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);

    let (code, log) = call(&f.app, "GET", "/annotations", None).await;
    assert_eq!(code, StatusCode::OK);
    assert!(log.as_array().unwrap().is_empty());
}

#[tokio::test]
async fn accepted_annotations_feed_the_pipelines() {
    let f = fixture();
    let id = &f.ids[0];
    let trace = f.store.load_trace(id).unwrap();
    let uri = format!("/traces/{id}/annotations");
    let (code, body) = call(&f.app, "POST", &uri, Some(review(id, 2))).await;
    assert_eq!(code, StatusCode::CREATED);
    assert_eq!(body["status"], "annotated");

    let fix = trace.steps[1].action.clone();
    let other = if fix == uniact_core::Action::Wait {
        "Finished()"
    } else {
        "Wait()"
    };
    let correction = json!({
        "type": "correction",
        "trace_id": id,
        "step_index": 1,
        "corrected_thought": "Try again.",
        "corrected_action": other,
        "kind": "error_correction"
    });
    let (code, _) = call(&f.app, "POST", &uri, Some(correction)).await;
    assert_eq!(code, StatusCode::CREATED);

    let reviews: Vec<ReviewAnnotation> = f.store.annotations().reviews().unwrap();
    let corrections: Vec<Correction> = f.store.annotations().corrections().unwrap();
    assert!(
        matches!(apply_review(&trace, &reviews[0]).unwrap(), ReviewOutcome::Truncated(t) if t.len() == 2)
    );
    assert!(build_pair(&trace, &corrections[0]).is_ok());

    let (_, log) = call(&f.app, "GET", &format!("/annotations?trace_id={id}"), None).await;
    assert_eq!(log.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn status_moves_are_compare_and_set() {
    let f = fixture();
    let id = &f.ids[0];
    let uri = format!("/traces/{id}/status");
    let approve = json!({"from": "annotated", "to": "approved", "assigned_to": "ann-2"});
    let (code, body) = call(&f.app, "POST", &uri, Some(approve.clone())).await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert_eq!(body["current"], "pending");

    let (code, _) = call(
        &f.app,
        "POST",
        &uri,
        Some(json!({"from": "pending", "to": "approved"})),
    )
    .await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);

    call(
        &f.app,
        "POST",
        &format!("/traces/{id}/annotations"),
        Some(review(id, 1)),
    )
    .await;
    let (code, body) = call(&f.app, "POST", &uri, Some(approve.clone())).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["status"], "approved");
    assert_eq!(body["assigned_to"], "ann-2");
    let (code, _) = call(&f.app, "POST", &uri, Some(approve)).await;
    assert_eq!(code, StatusCode::CONFLICT);
}

#[tokio::test]
async fn concurrent_status_moves_apply_once() {
    let f = fixture();
    let id = f.ids[0].clone();
    call(
        &f.app,
        "POST",
        &format!("/traces/{id}/annotations"),
        Some(review(&id, 1)),
    )
    .await;
    let mut handles = Vec::new();
    for i in 0..8 {
        let app = f.app.clone();
        let uri = format!("/traces/{id}/status");
        let to = if i % 2 == 0 { "approved" } else { "rejected" };
        handles.push(tokio::spawn(async move {
            call(
                &app,
                "POST",
                &uri,
                Some(json!({"from": "annotated", "to": to})),
            )
            .await
            .0
        }));
    }
    let mut ok = 0;
    for h in handles {
        match h.await.unwrap() {
            StatusCode::OK => ok += 1,
            StatusCode::CONFLICT => {}
            other => panic!("unexpected {other}"),
        }
    }
    assert_eq!(ok, 1);
}

#[tokio::test]
async fn validate_action_endpoint() {
    let f = fixture();
    let (code, body) = call(
        &f.app,
        "POST",
        "/validate-action",
        Some(json!({"text": "Click(0.5, 0.25)"})),
    )
    .await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["valid"], true);
    assert_eq!(body["canonical"], "Click(0.5000, 0.2500)");
    let (_, body) = call(
        &f.app,
        "POST",
        "/validate-action",
        Some(json!({"text": "PressBack()", "platform": "desktop"})),
    )
    .await;
    assert_eq!(body["valid"], false);
    assert_eq!(body["class"], "PlatformError");
}
