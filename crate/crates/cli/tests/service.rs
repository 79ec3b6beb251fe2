mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use visconet_cli::service::{router, ServeConfig, Service};

fn service(f: &common::Fixture, queue_depth: usize) -> Arc<Service> {
    let cfg = ServeConfig {
        checkpoint: f.checkpoint.clone(),
        dataset: Some(f.dataset.clone()),
        queue_depth,
        ..Default::default()
    };
    Arc::new(Service::load(&cfg).unwrap())
}

async fn call(s: &Arc<Service>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(s.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_presets_and_meta() {
    let f = common::fixture();
    let s = service(&f, 4);
    let (st, v) = call(&s, "GET", "/v1/health", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["checkpoint"], f.checkpoint.display().to_string());

    let (_, v) = call(&s, "GET", "/v1/presets", None).await;
    assert_eq!(v["presets"]["stylize"], json!([0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]));
    assert_eq!(v["groups"]["MB"], json!([4, 5, 6, 7, 8]));

    let (_, v) = call(&s, "GET", "/v1/meta", None).await;
    assert_eq!(v["conditioning"], "local");
    assert_eq!(v["dataset"]["count"], 12);
    assert!(v["vocab"].as_array().unwrap().iter().any(|w| w == "stripes"));
}

#[tokio::test]
async fn samples_are_browsable() {
    let f = common::fixture();
    let s = service(&f, 4);
    let (st, v) = call(&s, "GET", "/v1/samples/3", None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(v["text_label"].as_str().unwrap().starts_with("a person"));
    for key in ["image", "pose_map", "mask"] {
        assert!(!v[key].as_str().unwrap().is_empty(), "{key}");
    }
    assert!(v["style_images"]["face"].as_str().is_some_and(|x| !x.is_empty()));
    let (st, _) = call(&s, "GET", "/v1/samples/99", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (_, v) = call(&s, "GET", "/v1/samples?offset=10&limit=5", None).await;
    assert_eq!(v["samples"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn off_preset_matches_backbone_only_and_repeats_exactly() {
    let f = common::fixture();
    let s = service(&f, 4);
    let plain = json!({"prompt": "a person, red plain", "steps": 3, "seed": 7});
    let mut off = plain.clone();
    off["pose"] = json!({"sample": 2});
    off["style_refs"] = json!({"sample": 2});
    off["scales"] = json!("off");
    let (st, a) = call(&s, "POST", "/v1/generate", Some(plain.clone())).await;
    assert_eq!(st, StatusCode::OK, "{a}");
    let (_, b) = call(&s, "POST", "/v1/generate", Some(off.clone())).await;
    assert_eq!(a["image"], b["image"]);
    assert_eq!(b["metadata"]["scales"], json!(vec![0.0; 13]));
    assert_eq!(b["metadata"]["preset"], "off");
    assert_eq!(b["metadata"]["controlled"], true);

    let mut on = off.clone();
    on["scales"] = json!("faithful");
    let (_, c) = call(&s, "POST", "/v1/generate", Some(on.clone())).await;
    let (_, d) = call(&s, "POST", "/v1/generate", Some(on)).await;
    assert_eq!(c["image"], d["image"]);
    assert_ne!(c["image"], a["image"]);
    assert_ne!(c["id"], d["id"]);

    let (_, e) = call(&s, "POST", "/v1/generate", Some(c["metadata"]["request"].clone())).await;
    assert_eq!(e["image"], c["image"]);
}

#[tokio::test]
async fn invalid_requests_get_field_errors() {
    let f = common::fixture();
    let s = service(&f, 4);
    let (st, v) = call(&s, "POST", "/v1/generate", Some(json!({"prompt": "a person", "steps": 0, "guidance": -1}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let fields: Vec<&str> = v["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["guidance", "steps"]);

    let mut scales = vec![json!(1.0); 13];
    scales[4] = json!(2.5);
    let (st, v) = call(&s, "POST", "/v1/generate", Some(json!({"prompt": "a person", "scales": scales}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(v["fields"][0]["field"], "scales[4]");

    let (st, v) = call(&s, "POST", "/v1/generate", Some(json!({"prompt": "a person", "pose": {"sample": 40}}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(v["fields"][0]["field"], "pose.sample");

    let (st, _) = call(&s, "POST", "/v1/generate", Some(json!({"prompt": "a person", "colour": 1}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, _) = call(&s, "POST", "/v1/generate", Some(json!({"prompt": "a person", "scales": "loud"}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_words_are_listed() {
    let f = common::fixture();
    let s = service(&f, 4);
    let (st, v) = call(&s, "POST", "/v1/generate", Some(json!({"prompt": "a unicorn on mars", "negative_prompt": "dragon"}))).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["words"], json!(["unicorn", "on", "mars", "dragon"]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_queue_is_refused() {
    let f = common::fixture();
    let s = service(&f, 0);
    let slow = json!({"prompt": "a person", "steps": 1000, "seed": 1});
    let busy = {
        let s = s.clone();
        tokio::spawn(async move { call(&s, "POST", "/v1/generate", Some(slow)).await })
    };
    tokio::time::sleep(Duration::from_millis(300)).await;
    let (st, v) = call(&s, "POST", "/v1/generate", Some(json!({"prompt": "a person", "steps": 1}))).await;
    assert_eq!(st, StatusCode::CONFLICT, "{v}");
    assert_eq!(busy.await.unwrap().0, StatusCode::OK);
}

#[test]
fn port_override_replaces_only_the_port() {
    let cfg = ServeConfig { bind: "0.0.0.0:8080".into(), ..Default::default() };
    assert_eq!(cfg.address(Some("9001")).unwrap().to_string(), "0.0.0.0:9001");
    assert_eq!(cfg.address(None).unwrap().to_string(), "0.0.0.0:8080");
    assert!(cfg.address(Some("port")).is_err());
    let parsed: ServeConfig = toml::from_str("bind = \"127.0.0.1:1\"\ncheckpoint = \"a.bin\"\n").unwrap();
    assert_eq!(parsed.queue_depth, 4);
}
