use std::path::Path;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use attrground_core::geometry::{BoundingBox, ImageDims};
use attrground_core::knowledge::{
    generate_candidates, render_prompt, DefinitionStore, GenerationParams, KnowledgeStore, ScriptedClient,
};
use attrground_core::metrics::{build_report, EvalConfig, GroundingCase, GroupBy};
use attrground_core::outparse::PixelPrediction;
use attrground_core::runs::RunStore;
use attrground_service::{router, ServiceConfig, API_SCHEMA};

const CANDIDATES: [&str; 5] = [
    "A round bright spot in the upper lung field.",
    "A patchy hazy area near the lung base.",
    "Linear dense band along the pleural surface.",
    "Irregular grayish shadow in the middle zone.",
    "Small well-defined nodule with sharp margins.",
];

struct Fixture {
    _dir: tempfile::TempDir,
    config: ServiceConfig,
    run_id: String,
}

fn write_definitions(path: &Path) {
    let defs: Vec<Value> = DefinitionStore::vindr()
        .iter()
        .map(|d| json!({"class_name": d.class_name, "definition": d.definition, "source": d.source}))
        .collect();
    std::fs::write(path, serde_json::to_string(&defs).unwrap()).unwrap();
}

fn b(c: [f64; 4]) -> BoundingBox {
    BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let defs_path = dir.path().join("definitions.json");
    write_definitions(&defs_path);

    let store = KnowledgeStore::open(dir.path().join("store")).unwrap();
    let client = ScriptedClient::new(CANDIDATES);
    for def in DefinitionStore::vindr().iter() {
        let prompt = render_prompt(def).unwrap();
        store
            .save_pool(&generate_candidates(&prompt, &client, &GenerationParams::default()).unwrap())
            .unwrap();
    }

    let cases = vec![
        GroundingCase {
            image_id: "img_a".into(),
            class_name: "Nodule / Mass".into(),
            dims: Some(ImageDims::new(1000, 800).unwrap()),
            gt: vec![b([100.0, 100.0, 200.0, 200.0]), b([600.0, 500.0, 700.0, 650.0])],
            preds: vec![
                PixelPrediction { label: "Nodule / Mass".into(), bbox: b([610.0, 500.0, 710.0, 650.0]), score: 1.0, rank: 0 },
                PixelPrediction { label: "Nodule / Mass".into(), bbox: b([100.0, 110.0, 200.0, 210.0]), score: 1.0, rank: 1 },
            ],
        },
        GroundingCase {
            image_id: "img_b".into(),
            class_name: "Cardiomegaly".into(),
            dims: Some(ImageDims::new(2000, 2000).unwrap()),
            gt: vec![b([500.0, 900.0, 1400.0, 1500.0])],
            preds: vec![],
        },
    ];
    let report = build_report(&cases, GroupBy::Class, None, &EvalConfig::default()).unwrap();
    let runs = RunStore::new(dir.path().join("runs"));
    let record = runs.write(&json!({"fixture": true}), &report, &cases).unwrap();

    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::write(dir.path().join("images/img_a.png"), b"not really a png").unwrap();

    let config = ServiceConfig {
        definitions: Some(defs_path),
        store: Some(dir.path().join("store")),
        runs: Some(dir.path().join("runs")),
        images: Some(dir.path().join("images")),
        ui: None,
    };
    Fixture { _dir: dir, config, run_id: record.run_id }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

/// Validates `value` against `#/components/schemas/{name}` of the published document.
fn assert_schema(name: &str, value: &Value) {
    let doc: Value = serde_json::from_str(API_SCHEMA).unwrap();
    let schema = json!({
        "$ref": format!("#/components/schemas/{name}"),
        "components": doc["components"],
    });
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name} violates schema: {errors:?}\n{value:#}");
}

fn assert_schema_array(name: &str, value: &Value) {
    for item in value.as_array().expect("array response") {
        assert_schema(name, item);
    }
}

#[tokio::test]
async fn classes_list_every_definition() {
    let f = fixture();
    let app = router(f.config.clone());
    let (status, body) = get(&app, "/api/classes").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body.as_array().unwrap().len(), 22);
    assert_schema_array("ClassSummary", &body);
    assert!(body.as_array().unwrap().iter().all(|c| c["has_selection"] == false && c["has_candidates"] == true));
}

#[tokio::test]
async fn classes_unavailable_without_store_and_empty_for_empty_store() {
    let app = router(ServiceConfig::default());
    let (status, body) = get(&app, "/api/classes").await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_schema("Error", &body);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("defs.json");
    std::fs::write(&path, "[]").unwrap();
    let app = router(ServiceConfig { definitions: Some(path), ..Default::default() });
    let (status, body) = get(&app, "/api/classes").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!([]));
}

#[tokio::test]
async fn candidates_echo_pool_and_params() {
    let f = fixture();
    let app = router(f.config.clone());
    let (status, body) = get(&app, "/api/classes/Lung%20Opacity/candidates").await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("CandidatePool", &body);
    assert_eq!(body["candidates"], json!(CANDIDATES));
    let p = &body["generation_params"];
    assert_eq!(
        (p["temperature"].as_f64(), p["top_p"].as_f64(), p["repetition_penalty"].as_f64(), p["max_tokens"].as_u64(), p["n"].as_u64()),
        (Some(0.7), Some(0.7), Some(1.1), Some(1024), Some(5))
    );
    let (status, body) = get(&app, "/api/classes/Unicorn/candidates").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_schema("Error", &body);
}

#[tokio::test]
async fn selection_flow() {
    let f = fixture();
    let app = router(f.config.clone());
    let uri = "/api/classes/Edema/selection";

    let (status, _) = get(&app, uri).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&app, Method::POST, uri, Some(json!({"index": 2}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("AttributePrompt", &body);
    assert_eq!(body["selected_by"], "human");
    assert_eq!(body["description"], CANDIDATES[2]);

    let (status, body) = call(&app, Method::POST, uri, Some(json!({"index": 9}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_schema("IndexError", &body);
    assert_eq!((body["min"].as_u64(), body["max"].as_u64()), (Some(0), Some(4)));

    let (_, first) = call(&app, Method::POST, uri, Some(json!({"index": 4}))).await;
    let (_, current) = get(&app, uri).await;
    assert_eq!(current, first);
    assert_eq!(current["selected_index"], 4);

    let (_, classes) = get(&app, "/api/classes").await;
    let edema = classes.as_array().unwrap().iter().find(|c| c["class_name"] == "Edema").unwrap();
    assert_eq!(edema["has_selection"], true);

    let (status, _) = call(&app, Method::POST, "/api/classes/Unicorn/selection", Some(json!({"index": 0}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn repeated_post_is_idempotent() {
    let f = fixture();
    let app = router(f.config.clone());
    let uri = "/api/classes/Atelectasis/selection";
    let (_, a) = call(&app, Method::POST, uri, Some(json!({"index": 1}))).await;
    let ledger = f.config.store.as_ref().unwrap().join("selections.jsonl");
    let before = std::fs::read_to_string(&ledger).unwrap();
    let (_, b) = call(&app, Method::POST, uri, Some(json!({"index": 1}))).await;
    assert_eq!(a, b);
    assert_eq!(std::fs::read_to_string(&ledger).unwrap(), before);
}

#[tokio::test]
async fn dictionary_reports_coverage() {
    let f = fixture();
    let app = router(f.config.clone());
    let (status, body) = get(&app, "/api/dictionary").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_schema("CoverageError", &body);
    assert_eq!(body["uncovered"].as_array().unwrap().len(), 22);

    let (_, classes) = get(&app, "/api/classes").await;
    for c in classes.as_array().unwrap() {
        let name = c["class_name"].as_str().unwrap().replace(' ', "%20").replace('/', "%2F");
        let (status, _) = call(&app, Method::POST, &format!("/api/classes/{name}/selection"), Some(json!({"index": 0}))).await;
        assert_eq!(status, StatusCode::OK, "{name}");
    }
    let (status, body) = get(&app, "/api/dictionary").await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("PromptDictionary", &body);
    assert_eq!(body["entries"].as_object().unwrap().len(), 22);
}

#[tokio::test]
async fn runs_and_overlays() {
    let f = fixture();
    let app = router(f.config.clone());

    let (status, body) = get(&app, "/api/runs").await;
    assert_eq!(status, StatusCode::OK);
    assert_schema_array("RunRecord", &body);
    assert_eq!(body[0]["run_id"], f.run_id.as_str());

    let (status, body) = get(&app, &format!("/api/runs/{}", f.run_id)).await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("RunDetail", &body);

    let (_, cases) = get(&app, &format!("/api/runs/{}/cases", f.run_id)).await;
    assert_schema_array("CaseSummary", &cases);
    assert_eq!(cases.as_array().unwrap().len(), 2);

    let (status, overlay) = get(&app, &format!("/api/runs/{}/cases/0", f.run_id)).await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("OverlayPayload", &overlay);
    assert_eq!(overlay["gt"].as_array().unwrap().len() + overlay["predictions"].as_array().unwrap().len(), 4);
    let pairs: Vec<(u64, u64)> = overlay["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| (p["pred"].as_u64().unwrap(), p["gt"].as_u64().unwrap()))
        .collect();
    assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    assert_eq!(overlay["dims"], json!({"width": 1000, "height": 800}));
    assert_eq!(overlay["image_url"], "/images/img_a.png");

    let (_, overlay) = get(&app, &format!("/api/runs/{}/cases/1", f.run_id)).await;
    assert_schema("OverlayPayload", &overlay);
    assert_eq!(overlay["predictions"], json!([]));
    assert_eq!(overlay["gt"].as_array().unwrap().len(), 1);
    assert_eq!(overlay["image_url"], Value::Null);
    assert_eq!(overlay["canvas"], json!({"width": 2000, "height": 2000}));

    for uri in [
        format!("/api/runs/{}/cases/2", f.run_id),
        format!("/api/runs/{}/cases/x", f.run_id),
        "/api/runs/deadbeef/cases/0".to_string(),
        "/api/runs/..%2F..%2Fetc".to_string(),
        "/api/nope".to_string(),
    ] {
        let (status, body) = get(&app, &uri).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_schema("Error", &body);
    }
}

#[tokio::test]
async fn schema_and_health() {
    let app = router(ServiceConfig::default());
    let (status, doc) = get(&app, "/api/schema").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(doc["openapi"], "3.1.0");
    let (status, health) = get(&app, "/api/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("Health", &health);
}

#[tokio::test]
async fn concurrent_reads_and_writes() {
    let f = fixture();
    let app = router(f.config.clone());
    let mut tasks = Vec::new();
    for i in 0..40 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            if i % 4 == 0 {
                call(&app, Method::POST, "/api/classes/Emphysema/selection", Some(json!({"index": i % 5}))).await.0
            } else {
                get(&app, "/api/classes").await.0
            }
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let store = KnowledgeStore::open(f.config.store.as_ref().unwrap()).unwrap();
    // every write left a complete ledger line
    assert!(store.ledger().unwrap().iter().all(|e| e.class_name == "Emphysema"));
}
