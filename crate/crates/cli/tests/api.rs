use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use styleprobe::api::router;
use styleprobe::Session;
use styleprobe_core::config::Config;
use tower::ServiceExt;

struct Api {
    router: Router,
    _dir: tempfile::TempDir,
}

impl Api {
    fn new(config: Config) -> Api {
        let dir = tempfile::tempdir().unwrap();
        let session = Session::open(dir.path(), Some(&config)).unwrap();
        Api {
            router: router(Arc::new(session)),
            _dir: dir,
        }
    }

    async fn raw(&self, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        if body.is_some() {
            req = req.header("content-type", "application/json");
        }
        let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
        let res = self.router.clone().oneshot(req).await.unwrap();
        let status = res.status();
        (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        let (s, b) = self.raw("GET", uri, None).await;
        (s, serde_json::from_slice(&b).unwrap())
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        let (s, b) = self.raw("POST", uri, Some(body.to_string())).await;
        (s, serde_json::from_slice(&b).unwrap())
    }
}

fn tiny() -> Config {
    Config::preset("tiny8").unwrap()
}

#[tokio::test]
async fn session_and_layers() {
    let api = Api::new(tiny());
    let (s, v) = api.get("/api/session").await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["id"].as_str().unwrap().starts_with("sess-"));
    assert_eq!(v["bounds"]["single"], json!([-3.0, 3.0]));
    let (s, v) = api.get("/api/layers").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["spec"]["name"], "tiny8");
    assert!(!v["spec"]["layers"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn zero_edit_returns_the_original_png() {
    let api = Api::new(tiny());
    let (s, v) = api.post("/api/sample", json!({ "seed": 4 })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let sample = v["id"].as_str().unwrap().to_string();
    let (s, original) = api.raw("GET", &format!("/api/image/{sample}.png"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&original[1..4], b"PNG");

    let spec = json!({ "mode": "single", "channel": [1, 0], "alpha": 0.0 });
    let (s, v) = api.post("/api/edit", json!({ "sample_id": sample, "edit_spec": spec })).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!(v["deltas"].as_array().unwrap().iter().all(|d| d[1] == 0.0));
    let (_, edited) = api.raw("GET", &format!("/api/image/{}", v["image"].as_str().unwrap()), None).await;
    assert_eq!(edited, original);

    // a clamped edit reports what it applied
    let spec = json!({ "mode": "single", "channel": [1, 0], "alpha": 9.0 });
    let (_, v) = api.post("/api/edit", json!({ "sample_id": sample, "edit_spec": spec })).await;
    assert_eq!(v["effective_alpha"], 3.0);
    assert_eq!(v["clamped"], true);
}

#[tokio::test]
async fn detection_is_repeatable_and_drives_edits() {
    let api = Api::new(tiny());
    let body = json!({ "objective": "region:mouth", "k": 5, "n_samples": 3, "seed": 2 });
    let (s, a) = api.post("/api/detect", body.clone()).await;
    assert_eq!(s, StatusCode::OK, "{a}");
    let (_, b) = api.post("/api/detect", body).await;
    assert_eq!(a, b);
    assert_eq!(a["ranking"]["entries"].as_array().unwrap().len(), 5);

    let (_, sample) = api.post("/api/sample", json!({ "seed": 1, "index": 3 })).await;
    for selection in [json!({ "mode": "single", "rank": 0 }), json!({ "mode": "multi" })] {
        let (s, v) = api
            .post(
                "/api/edit",
                json!({ "sample_id": sample["id"], "detection_id": a["id"], "selection": selection, "alpha": 1.0 }),
            )
            .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["detection"], a["id"]);
    }
}

#[tokio::test]
async fn request_ids_make_posts_idempotent() {
    let api = Api::new(tiny());
    let body = json!({ "request_id": "r-1", "channel": [0, 2], "tag": "tint", "note": "warm", "timestamp": 10 });
    let (_, a) = api.post("/api/curate", body).await;
    let retry = json!({ "request_id": "r-1", "channel": [0, 2], "tag": "tint", "note": "warm", "timestamp": 99 });
    let (_, b) = api.post("/api/curate", retry).await;
    assert_eq!(a, b);
    let (_, v) = api.get("/api/session").await;
    assert_eq!(v["seq"], 1);
}

#[tokio::test]
async fn curations_round_trip() {
    let api = Api::new(tiny());
    let (s, c) = api.post("/api/curate", json!({ "channel": [1, 3], "tag": "mouth", "note": "reddens lips" })).await;
    assert_eq!(s, StatusCode::OK, "{c}");
    let (_, v) = api.get("/api/curations").await;
    let list = v["curations"].as_array().unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0]["channel"], json!([1, 3]));
    assert_eq!(list[0]["tag"], "mouth");
    assert_eq!(list[0]["note"], "reddens lips");
    assert_eq!(list[0], c);
}

#[tokio::test]
async fn error_statuses() {
    let api = Api::new(tiny());
    // malformed bodies
    let (s, _) = api.raw("POST", "/api/sample", Some("{not json".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = api.post("/api/sample", json!({ "seed": "four" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = api.post("/api/detect", json!({ "objective": "mouth", "k": 3 })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = api.post("/api/edit", json!({ "sample_id": "s1-0" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, v) = api.post("/api/curate", json!({ "channel": [99, 0], "tag": "x" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");

    // unknown ids
    let (s, _) = api.raw("GET", "/api/image/s7-7.png", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let spec = json!({ "mode": "single", "channel": [0, 0], "alpha": 1.0 });
    let (s, v) = api.post("/api/edit", json!({ "sample_id": "s7-7", "edit_spec": spec })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["kind"], "not-found");

    // a direction from another generator
    let (_, det) = api.post("/api/detect", json!({ "objective": "region:full", "k": 2, "n_samples": 2 })).await;
    let (_, sample) = api.post("/api/sample", json!({ "seed": 1 })).await;
    let mut ranking = det["ranking"].clone();
    ranking["fingerprint"] = json!("not-this-generator");
    let first = ranking["entries"][0].clone();
    let spec = json!({
        "mode": "multi",
        "ranking": ranking,
        "direction": { "components": [[[first[0], first[1]], 1.0]] },
        "alpha": 1.0,
    });
    let (s, v) = api.post("/api/edit", json!({ "sample_id": sample["id"], "edit_spec": spec })).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
}

#[tokio::test]
async fn numeric_failures_are_unprocessable() {
    let mut cfg = tiny();
    cfg.detection.max_attempts = 2;
    let api = Api::new(cfg);
    let (s, v) = api
        .post("/api/detect", json!({ "objective": "attr:mouth-redness", "k": 3, "n_samples": 30 }))
        .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(v["error"]["kind"], "numeric");
    assert!(v["error"]["message"].as_str().unwrap().contains("positive"), "{v}");
}

#[tokio::test]
async fn truncation_preview() {
    let api = Api::new(tiny());
    let (_, sample) = api.post("/api/sample", json!({ "seed": 2 })).await;
    let (s, v) = api
        .post("/api/truncate", json!({ "sample_id": sample["id"], "avg_samples": 200 }))
        .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let images = v["images"].as_array().unwrap();
    let (_, full) = api.raw("GET", &format!("/api/image/{}", sample["image"].as_str().unwrap()), None).await;
    let last = images.last().unwrap()["image"].as_str().unwrap();
    let (_, kept) = api.raw("GET", &format!("/api/image/{last}"), None).await;
    assert_eq!(kept, full);
}
