mod common;

use std::fs;
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use visconet_cli::service::{router, ServeConfig, Service};

fn visconet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visconet")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn path(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_exits_2_with_usage() {
    let out = visconet(&["sample", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn eval_on_missing_checkpoint_exits_1_naming_the_path() {
    let out = visconet(&["eval", "--checkpoint", "/no/such/ck.bin", "--out", "/tmp/never.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/ck.bin"));
}

#[test]
fn sample_is_deterministic_and_validates() {
    let f = common::fixture();
    let a = f.dir.path().join("a.png");
    let b = f.dir.path().join("b.png");
    for out in [&a, &b] {
        let o = visconet(&[
            "sample", "--checkpoint", path(&f.checkpoint), "--dataset", path(&f.dataset),
            "--prompt", "a person, blue stripes", "--seed", "7", "--steps", "3",
            "--pose-sample", "1", "--style-sample", "1", "--scales", "stylize", "--out", path(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let bad = visconet(&["sample", "--checkpoint", path(&f.checkpoint), "--prompt", "a person", "--steps", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    let oov = visconet(&["sample", "--checkpoint", path(&f.checkpoint), "--prompt", "a unicorn"]);
    assert_eq!(oov.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&oov.stderr).contains("unicorn"));
}

#[tokio::test]
async fn cli_and_service_agree() {
    let f = common::fixture();
    let style = f.dir.path().join("top.png");
    let img = visconet::image::Image::filled(32, 32, [0.8, 0.1, 0.1]);
    fs::write(&style, img.to_png()).unwrap();
    let b64 = base64::engine::general_purpose::STANDARD.encode(img.to_png());
    let request = json!({
        "prompt": "a person, green gradient",
        "negative_prompt": "stripes",
        "guidance": 2.0,
        "steps": 3,
        "seed": 11,
        "pose": {"sample": 4},
        "style_refs": {"sample": 5, "images": {"top": b64, "hat": ""}},
        "mask": {"sample": 4},
        "scales": [0, 0, 0, 0, 1, 1, 1, 1, 1, 0.5, 0.5, 0.5, 0.5]
    });
    let cfg = ServeConfig { checkpoint: f.checkpoint.clone(), dataset: Some(f.dataset.clone()), ..Default::default() };
    let service = Arc::new(Service::load(&cfg).unwrap());
    let call = |body: Value| {
        let s = service.clone();
        async move {
            let req = Request::post("/v1/generate").body(Body::from(body.to_string())).unwrap();
            let resp = router(s).oneshot(req).await.unwrap();
            let bytes = resp.into_body().collect().await.unwrap().to_bytes();
            serde_json::from_slice::<Value>(&bytes).unwrap()
        }
    };
    let v = call(request.clone()).await;
    assert_eq!(v["fields"][0]["field"], "style_refs.images.hat", "{v}");

    let mut request = request;
    request["style_refs"]["images"] = json!({"top": b64, "headwear": ""});
    let v = call(request.clone()).await;
    let served = base64::engine::general_purpose::STANDARD.decode(v["image"].as_str().unwrap()).unwrap();

    let req_file = f.dir.path().join("req.json");
    fs::write(&req_file, request.to_string()).unwrap();
    let from_file = f.dir.path().join("file.png");
    let o = visconet(&[
        "sample", "--checkpoint", path(&f.checkpoint), "--dataset", path(&f.dataset),
        "--request", path(&req_file), "--out", path(&from_file),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&from_file).unwrap(), served);

    let from_flags = f.dir.path().join("flags.png");
    let top = format!("top={}", path(&style));
    let o = visconet(&[
        "sample", "--checkpoint", path(&f.checkpoint), "--dataset", path(&f.dataset),
        "--prompt", "a person, green gradient", "--negative-prompt", "stripes", "--guidance", "2",
        "--steps", "3", "--seed", "11", "--pose-sample", "4", "--mask-sample", "4", "--style-sample", "5",
        "--style", &top, "--style", "headwear=", "--scales", "0,0,0,0,1,1,1,1,1,0.5,0.5,0.5,0.5",
        "--out", path(&from_flags),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&from_flags).unwrap(), served);
}

#[test]
fn dataset_build_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let o = visconet(&["dataset", "build", "--n", "4", "--seed", "3", "--out", path(&out)]);
    assert!(o.status.success());
    assert_eq!(visconet::scenegen::Dataset::load(&out).unwrap().len(), 4);
}

#[test]
fn dataset_build_reads_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ranges.toml");
    std::fs::write(&cfg, "p_striped_garment = 1.0\nholdout = []\n").unwrap();
    let out = dir.path().join("ds");
    let o = visconet(&["dataset", "build", "--n", "3", "--out", path(&out), "--config", path(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ds = visconet::scenegen::Dataset::load(&out).unwrap();
    assert_eq!(ds.manifest.config.p_striped_garment, 1.0);
    assert!(ds.manifest.config.holdout.is_empty());

    std::fs::write(&cfg, "p_striped_garment = 2.0\n").unwrap();
    let o = visconet(&["dataset", "build", "--n", "3", "--out", path(&dir.path().join("bad")), "--config", path(&cfg)]);
    assert!(!o.status.success());
}
