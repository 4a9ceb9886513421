use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use e2l::api::router;
use e2l::runtime::{spawn, EngineHandle, EngineOptions};
use e2l_core::control::ScenarioConfig;
use e2l_core::engine::Simulation;
use futures::StreamExt;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

const SCENARIO: &str = r#"
schema_version = 1
seed = 3
duration_s = 60.0

[[gateways]]
id = 1
mode = "e2gw"
suppress_ns_forward_for_e2ed = true

[[gateways]]
id = 2
mode = "legacy"

[[devices]]
dev_eui = "70b3d57ed0000001"
mode = "legacy"
period_ms = 2000

[[devices]]
dev_eui = "70b3d57ed0000002"
mode = "e2ed"
period_ms = 2000
start_offset_ms = 500
"#;

fn config(pacing: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::parse(SCENARIO, "api-test").unwrap();
    cfg.pacing = pacing;
    cfg
}

fn app(pacing: f64, autostart: bool) -> (Router, EngineHandle) {
    let opts = EngineOptions { pacing, autostart, exit_when_finished: false };
    let (handle, _join) = spawn(config(pacing), None, opts).unwrap();
    (router(handle.clone()), handle)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_until(app: &Router, pred: impl Fn(&Value) -> bool) -> Value {
    for _ in 0..200 {
        let (_, state) = call(app, Method::GET, "/api/state", None).await;
        if pred(&state) {
            return state;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    panic!("condition not reached");
}

#[tokio::test]
async fn fast_mode_rejects_mutations_with_conflict() {
    let (app, _h) = app(0.0, false);
    let (status, _) = call(&app, Method::PUT, "/api/aggregation", Some(r#"{"window_len": 3}"#)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, Method::PUT, "/api/devices/70b3d57ed0000001", Some(r#"{"mode": "e2ed"}"#)).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn fast_run_completes_and_exposes_views() {
    let (app, _h) = app(0.0, true);
    let state = wait_until(&app, |s| s["finished"] == true).await;
    assert_eq!(state["devices"].as_array().unwrap().len(), 2);
    assert_eq!(state["interactive"], false);
    let (status, metrics) = call(&app, Method::GET, "/api/metrics", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(metrics["frames"]["edge_aggregates"].as_u64().unwrap() > 0);
    assert_eq!(metrics["accounting"]["unaccounted"], 0);

    let (status, view) = call(&app, Method::GET, "/api/security/view/70b3d57ed0000002", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["ns_can_read"], false);
    assert_eq!(view["plaintext_source"], "edge_gateway");
    assert!(view["plaintext"].is_array());
    assert!(!view["ciphertext_hex"].as_str().unwrap().is_empty());

    let (status, _) = call(&app, Method::GET, "/api/security/view/zz", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::GET, "/api/security/view/70b3d57ed00000ff", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn paced_mutations_are_validated_and_acknowledged() {
    let (app, _h) = app(20.0, false);
    let (status, state) = call(&app, Method::PUT, "/api/devices/70b3d57ed0000001", Some(r#"{"period_ms": 3000}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state["devices"][0]["period_ms"], 3000);

    let (status, body) = call(&app, Method::PUT, "/api/devices/70b3d57ed0000001", Some(r#"{"period_ms": 1}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("period_ms"));
    let (status, _) = call(&app, Method::PUT, "/api/devices/70b3d57ed0000001", Some(r#"{"colour": 1}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, Method::PUT, "/api/devices/70b3d57ed00000ff", Some(r#"{"mode": "e2ed"}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = call(&app, Method::PUT, "/api/aggregation", Some(r#"{"window_len": 0}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, state) = call(&app, Method::PUT, "/api/aggregation", Some(r#"{"function": "max", "window_len": 3}"#)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state["aggregation"]["function"], "max");
    assert_eq!(state["aggregation"]["window_len"], 3);

    let (status, state) = call(&app, Method::PUT, "/api/links/gw1-as", Some(r#"{"bandwidth_bps": 9600}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let link = state["links"].as_array().unwrap().iter().find(|l| l["id"] == "gw1-as").unwrap().clone();
    assert_eq!(link["bandwidth_bps"], 9600);
    let (status, _) = call(&app, Method::PUT, "/api/links/gw9-as", Some(r#"{"delay_ms": 5}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::PUT, "/api/links/gw1-as", Some(r#"{"bandwidth_bps": 0}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn run_control_and_monotone_metrics() {
    let (app, _h) = app(20.0, false);
    let (_, state) = call(&app, Method::GET, "/api/state", None).await;
    assert_eq!(state["running"], false);
    let (status, _) = call(&app, Method::POST, "/api/run/start", None).await;
    assert_eq!(status, StatusCode::OK);
    let first = wait_until(&app, |s| s["sim_time_us"].as_u64().unwrap() > 5_000_000).await;
    let (_, m1) = call(&app, Method::GET, "/api/metrics", None).await;
    let later = wait_until(&app, |s| s["sim_time_us"].as_u64() > first["sim_time_us"].as_u64()).await;
    let (_, m2) = call(&app, Method::GET, "/api/metrics", None).await;
    assert!(later["sim_time_us"].as_u64() > first["sim_time_us"].as_u64());
    for key in ["sent_legacy", "sent_e2ed", "accepted_at_gateways", "cloud_deliveries"] {
        assert!(m2["frames"][key].as_u64() >= m1["frames"][key].as_u64(), "{key}");
    }

    let (status, state) = call(&app, Method::POST, "/api/run/stop", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(state["running"], false);
    let (_, state) = call(&app, Method::POST, "/api/run/reset", None).await;
    assert_eq!(state["sim_time_us"], 0);
    let (status, _) = call(&app, Method::POST, "/api/run/rewind", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn mode_toggle_surfaces_activation_on_event_stream() {
    let (app, h) = app(50.0, true);
    let mut events = h.subscribe();
    wait_until(&app, |s| s["devices"][0]["activation"]["state"] == "active_legacy").await;
    let (status, _) = call(&app, Method::PUT, "/api/devices/70b3d57ed0000001", Some(r#"{"mode": "e2ed"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let found = tokio::time::timeout(std::time::Duration::from_secs(10), async {
        loop {
            let item = events.recv().await.unwrap();
            if item.event == "event" && item.data.contains("edge_activated") && item.data.contains("70b3d57ed0000001") {
                return item;
            }
        }
    })
    .await;
    assert!(found.is_ok(), "no activation event for the toggled device");
}

#[tokio::test]
async fn sse_stream_opens_with_a_snapshot() {
    let (app, _h) = app(0.0, false);
    let req = Request::builder().uri("/api/events").body(Body::empty()).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body().into_data_stream();
    let chunk = body.next().await.unwrap().unwrap();
    let text = String::from_utf8(chunk.to_vec()).unwrap();
    assert!(text.starts_with("event: snapshot"));
    assert!(text.contains("\"accounting\""));
}

#[test]
fn paced_run_matches_fast_run_trace() {
    let mut fast = Simulation::new(config(0.0), None).unwrap();
    fast.run_to_end().unwrap();

    let mut cfg = config(400.0);
    cfg.duration_s = 60.0;
    let opts = EngineOptions { pacing: 400.0, autostart: true, exit_when_finished: true };
    let (handle, join) = spawn(cfg, Some(3), opts).unwrap();
    drop(handle);
    let paced = join.join().unwrap();
    assert_eq!(paced.trace_hash(), fast.trace_hash());
    assert_eq!(paced.delivery_log(), fast.delivery_log());
}
