use std::sync::Arc;

use affground_core::dataio::{load_kb, save_kb, save_result, to_canonical};
use affground_core::engine::{ground, EnergyWeights, GroundingConfig};
use affground_core::kb::{EdgeEdit, KnowledgeBase};
use affground_core::percept::{EmbeddingTable, EmbeddingVector};
use affground_core::{BBox, GraspCandidate, GraspRect, Scene, SceneCandidate};
use affground_service::{router, Service};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn kb() -> KnowledgeBase {
    KnowledgeBase::builder()
        .vp("write", "tip_shaped", 0.9)
        .po("tip_shaped", "pen", 0.8)
        .po("tip_shaped", "mug", 0.1)
        .vp("drink", "hollow", 0.9)
        .po("hollow", "mug", 0.9)
        .build()
        .unwrap()
}

fn scene() -> Scene {
    let cand = |id: &str, label: &str, score: f64| SceneCandidate {
        roi_id: id.into(),
        bbox: BBox::new(0.0, 0.0, 5.0, 5.0),
        grasps: vec![GraspCandidate::new(GraspRect::new(2.0, 2.0, 2.0, 1.0, 0.0), score)],
        embedding_id: format!("roi:{id}"),
        hypothesis_label: Some(label.into()),
    };
    Scene { scene_id: "desk".into(), candidates: vec![cand("a", "pen", 0.8), cand("b", "mug", 0.8)], ground_truth: None }
}

fn embeddings() -> EmbeddingTable {
    EmbeddingTable::from_vectors(
        2,
        [
            EmbeddingVector::new("verb:write", vec![1.0, 0.0]),
            EmbeddingVector::new("verb:drink", vec![0.0, 1.0]),
            EmbeddingVector::new("roi:a", vec![1.0, 1.0]),
            EmbeddingVector::new("roi:b", vec![1.0, 1.0]),
            EmbeddingVector::new("object:pen", vec![1.0, 0.3]),
            EmbeddingVector::new("object:mug", vec![0.3, 1.0]),
        ],
    )
    .unwrap()
}

fn app() -> (Arc<Service>, axum::Router) {
    let svc = Arc::new(Service::new(kb(), vec![scene()], embeddings()));
    (svc.clone(), router(svc))
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn selected(v: &Value) -> String {
    v["result"]["selected_roi_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn ground_matches_engine_bytes() {
    let (_, app) = app();
    let (status, body) = call(&app, Method::POST, "/v1/ground", Some(json!({"scene_id": "desk", "verb": "write"}))).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    assert_eq!(v["transient"], false);
    let direct = ground(&scene(), "write", &kb(), &embeddings(), &EnergyWeights::default(), &GroundingConfig::default()).unwrap();
    assert_eq!(to_canonical(&v["result"]), save_result(&direct, None));
    assert_eq!(v["result"]["kb_version"], 1);
    assert_eq!(selected(&v), "a");
    // Responses are canonical documents.
    assert_eq!(to_canonical(&v), body);
}

#[tokio::test]
async fn inline_scene_and_explanations() {
    let (_, app) = app();
    let s = serde_json::to_value(scene()).unwrap();
    let (status, body) = call(&app, Method::POST, "/v1/ground", Some(json!({"scene": s, "verb": "write", "explain": true, "mode": "labels"}))).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    assert_eq!(v["result"]["explanations"].as_array().unwrap().len(), 2);
    assert!(v["result"]["ranked"][0]["posterior"].is_null());
}

#[tokio::test]
async fn error_statuses() {
    let (_, app) = app();
    let (status, body) = call(&app, Method::POST, "/v1/ground", Some(json!({"scene_id": "desk", "verb": "flurb"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(json_of(&body)["error"]["message"].as_str().unwrap().contains("flurb"));

    let (status, _) = call(&app, Method::POST, "/v1/ground", Some(json!({"scene_id": "attic", "verb": "write"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::POST, "/v1/ground", Some(json!({"scene_id": "desk", "verb": "write", "kb_version": 7}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, Method::POST, "/v1/ground", Some(json!({"scene_id": "desk"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::POST, "/v1/ground", Some(json!({"scene_id": "desk", "verb": "write", "weights": {"alpha": 0, "beta": 0, "gamma": 0}}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::GET, "/v1/scenes/attic", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let mut bad = scene();
    bad.candidates[1].embedding_id = "roi:ghost".into();
    let (status, body) = call(&app, Method::POST, "/v1/ground", Some(json!({"scene": bad, "verb": "write"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(String::from_utf8(body).unwrap().contains("roi:ghost"));

    let req = Request::builder().method(Method::POST).uri("/v1/ground").body(Body::from("{nope")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn ablated_weights_match_engine() {
    let (_, app) = app();
    let (_, body) = call(&app, Method::POST, "/v1/ground", Some(json!({"scene_id": "desk", "verb": "drink", "weights": {"alpha": 0, "beta": 1, "gamma": 1}}))).await;
    let v = json_of(&body);
    let w = EnergyWeights::new(0.0, 1.0, 1.0).unwrap();
    let direct = ground(&scene(), "drink", &kb(), &embeddings(), &w, &GroundingConfig::default()).unwrap();
    let mut two: Vec<(f64, &str)> = direct.ranked.iter().map(|b| (b.e_aff + b.e_align, b.roi_id.as_str())).collect();
    two.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(y.1)));
    let served: Vec<&str> = v["result"]["ranked"].as_array().unwrap().iter().map(|b| b["roi_id"].as_str().unwrap()).collect();
    assert_eq!(served, two.iter().map(|t| t.1).collect::<Vec<_>>());
}

#[tokio::test]
async fn patch_versions_and_audit() {
    let (svc, app) = app();
    let edit = json!([{"kind": "vp", "from": "write", "to": "tip_shaped", "weight": 0.5}]);
    let (status, body) = call(&app, Method::PATCH, "/v1/kb/edges", Some(edit)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body), json!({"old_version": 1, "new_version": 2}));

    let bad = json!([{"kind": "vp", "from": "write", "to": "tip_shaped", "weight": 0.2}, {"kind": "po", "from": "tip_shaped", "to": "pen", "weight": 1.5}]);
    let (status, _) = call(&app, Method::PATCH, "/v1/kb/edges", Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, body) = call(&app, Method::GET, "/v1/kb/version", None).await;
    assert_eq!(json_of(&body)["version"], 2);

    let second = json!([{"kind": "po", "from": "hollow", "to": "mug", "weight": 0.3}]);
    call(&app, Method::PATCH, "/v1/kb/edges", Some(second)).await;
    let (_, body) = call(&app, Method::GET, "/v1/kb/audit", None).await;
    assert_eq!(json_of(&body)["entries"].as_array().unwrap().len(), 2);
    assert_eq!(svc.replay().unwrap(), *svc.current_kb());

    let (_, body) = call(&app, Method::GET, "/v1/kb", None).await;
    assert_eq!(body, save_kb(&svc.current_kb()));
    assert_eq!(load_kb(&body).unwrap().version(), 3);

    let (status, _) = call(&app, Method::POST, "/v1/ground", Some(json!({"scene_id": "desk", "verb": "write", "kb_version": 1}))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, Method::PATCH, "/v1/kb/edges", Some(json!([]))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn whatif_is_isolated_and_consistent() {
    let base = json!({"scene_id": "desk", "verb": "write", "mode": "labels"});
    // b wins once w(tip_shaped, mug) exceeds w(tip_shaped, pen) = 0.8; at
    // equality the tie goes to `a`.
    for (w, winner) in [(0.79, "a"), (0.8, "a"), (0.81, "b"), (1.0, "b")] {
        let (svc, app) = app();
        let edits = json!([{"kind": "po", "from": "tip_shaped", "to": "mug", "weight": w}]);
        let mut req = base.clone();
        req["edits"] = edits.clone();
        let (status, body) = call(&app, Method::POST, "/v1/whatif", Some(req)).await;
        assert_eq!(status, StatusCode::OK);
        let what = json_of(&body);
        assert_eq!(what["transient"], true);
        assert_eq!(selected(&what), winner, "w = {w}");
        assert_eq!(svc.kb_version(), 1);

        let (_, body) = call(&app, Method::POST, "/v1/ground", Some(base.clone())).await;
        assert_eq!(selected(&json_of(&body)), "a");

        call(&app, Method::PATCH, "/v1/kb/edges", Some(edits)).await;
        let (_, body) = call(&app, Method::POST, "/v1/ground", Some(base.clone())).await;
        let committed = json_of(&body);
        assert_eq!(what["result"], committed["result"]);
    }

    let (_, app) = app();
    let mut empty = base.clone();
    empty["edits"] = json!([]);
    let (_, w) = call(&app, Method::POST, "/v1/whatif", Some(empty)).await;
    let (_, g) = call(&app, Method::POST, "/v1/ground", Some(base.clone())).await;
    assert_eq!(json_of(&w)["result"], json_of(&g)["result"]);

    let mut invalid = base.clone();
    invalid["edits"] = json!([{"kind": "po", "from": "tip_shaped", "to": "anvil", "weight": 0.5}]);
    let (status, _) = call(&app, Method::POST, "/v1/whatif", Some(invalid)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn read_endpoints() {
    let (_, app) = app();
    let (status, body) = call(&app, Method::GET, "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["status"], "ok");
    let (_, body) = call(&app, Method::GET, "/v1/scenes", None).await;
    assert_eq!(json_of(&body)["scenes"], json!(["desk"]));
    let (status, body) = call(&app, Method::GET, "/v1/scenes/desk", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, affground_core::dataio::save_scene(&scene()));

    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/v1/ground")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}

#[test]
fn concurrent_patches_serialize() {
    let svc = Arc::new(Service::new(kb(), vec![scene()], embeddings()));
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let svc = svc.clone();
            std::thread::spawn(move || {
                for i in 0..10 {
                    let w = f64::from(t * 10 + i) / 100.0;
                    svc.handle_kb_patch(&[EdgeEdit::vp("write", "tip_shaped", w)]).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let audit = svc.audit();
    assert_eq!(audit.len(), 80);
    for (i, e) in audit.iter().enumerate() {
        assert_eq!(e.old_version, i as u64 + 1);
        assert_eq!(e.new_version, i as u64 + 2);
    }
    assert_eq!(svc.replay().unwrap(), *svc.current_kb());
}

#[test]
fn loads_data_dir() {
    use affground_core::dataio::{save_embeddings_binary, save_scene};
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("kb.json"), save_kb(&kb())).unwrap();
    std::fs::write(dir.join("embeddings.bin"), save_embeddings_binary(&embeddings())).unwrap();
    std::fs::create_dir_all(dir.join("scenes")).unwrap();
    std::fs::write(dir.join("scenes/desk.json"), save_scene(&scene())).unwrap();
    let svc = Service::load(dir).unwrap();
    assert_eq!(svc.scene_ids(), ["desk"]);
    std::fs::remove_file(dir.join("embeddings.bin")).unwrap();
    assert!(Service::load(dir).is_err());
}
