mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use sdgan_cli::server::{router, ErrorBody, FramesResponse};
use sdgan_cli::session::{AttributesResponse, EditRequest, EditResponse, SampleInfo, ServiceError, Session};
use sdgan_core::evaluation::interpolate_edit;
use sdgan_core::latent::{LatentCode, LatentSpace};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::{fixture, session};

async fn call(s: &Arc<Session>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = router(s.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn call_json<T: DeserializeOwned>(
    s: &Arc<Session>,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, T) {
    let (status, bytes, _) = call(s, method, uri, body).await;
    let parsed =
        serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{status}: {e}: {}", String::from_utf8_lossy(&bytes)));
    (status, parsed)
}

fn id_of(image_ref: &str) -> &str {
    image_ref.strip_prefix("/image/").and_then(|r| r.strip_suffix(".png")).unwrap()
}

fn edit_req(sample_id: &str, eta: Option<f64>) -> EditRequest {
    EditRequest { sample_id: sample_id.into(), attribute: "face_mask".into(), eta, auto: false, zero_offset: false }
}

/// First sample whose face placement succeeds for a regular edit.
fn editable_sample(s: &Session, seed: u64) -> (String, EditResponse) {
    for info in s.sample(16, Some(seed)).unwrap() {
        match s.edit(&edit_req(&info.sample_id, Some(1.0))) {
            Ok(resp) => return (info.sample_id, resp),
            Err(ServiceError::Core(sdgan_core::Error::PlacementFailure(_))) => continue,
            Err(e) => panic!("{e}"),
        }
    }
    panic!("no editable sample among 16");
}

#[tokio::test]
async fn samples_returns_distinct_ids_and_pngs() {
    let s = session();
    let (status, infos): (_, Vec<SampleInfo>) =
        call_json(&s, "POST", "/api/samples", Some(json!({"count": 3, "seed": 5}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(infos.len(), 3);
    let mut ids: Vec<_> = infos.iter().map(|i| i.sample_id.clone()).collect();
    ids.dedup();
    assert_eq!(ids.len(), 3);
    for info in &infos {
        let (status, bytes, ctype) = call(&s, "GET", &info.thumbnail_ref, None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(ctype.as_deref(), Some("image/png"));
        assert_eq!(&bytes[1..4], b"PNG");
    }
}

#[tokio::test]
async fn same_seed_gives_identical_thumbnails() {
    let s = session();
    let a = s.sample(2, Some(11)).unwrap();
    let b = s.sample(2, Some(11)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_ne!(x.sample_id, y.sample_id);
        assert_eq!(s.image(id_of(&x.thumbnail_ref)).unwrap(), s.image(id_of(&y.thumbnail_ref)).unwrap());
    }
    let c = s.sample(1, None).unwrap();
    let d = s.sample(1, None).unwrap();
    assert_ne!(s.image(id_of(&c[0].thumbnail_ref)).unwrap(), s.image(id_of(&d[0].thumbnail_ref)).unwrap());
}

#[tokio::test]
async fn zero_count_returns_empty_list() {
    let s = session();
    let (status, infos): (_, Vec<SampleInfo>) = call_json(&s, "POST", "/api/samples", Some(json!({"count": 0}))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(infos.is_empty());
}

#[tokio::test]
async fn missing_models_is_model_not_loaded() {
    let s = Arc::new(Session::new(None, fixture().config.service.clone()));
    for (method, uri, body) in [
        ("POST", "/api/samples", Some(json!({"count": 1}))),
        ("POST", "/api/edit", Some(json!({"sample_id": "s1", "attribute": "face_mask"}))),
        ("GET", "/api/attributes", None),
    ] {
        let (status, err): (_, ErrorBody) = call_json(&s, method, uri, body).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
        assert_eq!(err.error, "ModelNotLoaded");
    }
}

#[tokio::test]
async fn zero_offset_at_zero_length_reproduces_thumbnail() {
    let s = session();
    let infos = s.sample(2, Some(21)).unwrap();
    for info in infos {
        let req = json!({"sample_id": info.sample_id, "attribute": "face_mask", "eta": 0.0, "zero_offset": true});
        let (status, resp): (_, EditResponse) = call_json(&s, "POST", "/api/edit", Some(req)).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(resp.eta_used, 0.0);
        assert_eq!(s.image(id_of(&resp.image_ref)).unwrap(), s.image(id_of(&info.thumbnail_ref)).unwrap());
    }
}

#[tokio::test]
async fn regular_edit_stores_image_and_defaults_eta() {
    let s = session();
    let (sample_id, first) = editable_sample(&s, 31);
    assert_eq!(first.eta_used, 1.0);
    assert!(first.score_breakdowns.is_none());
    let req = json!({"sample_id": sample_id, "attribute": "face_mask"});
    let (status, resp): (_, EditResponse) = call_json(&s, "POST", "/api/edit", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(resp.eta_used, fixture().models.bases["face_mask"].1.eta_m);
    let (status, bytes, _) = call(&s, "GET", &resp.image_ref, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, s.image(id_of(&resp.image_ref)).unwrap());
}

#[tokio::test]
async fn edit_errors_map_to_kinds() {
    let s = session();
    let id = s.sample(1, Some(41)).unwrap().remove(0).sample_id;
    let cases = [
        (json!({"sample_id": id, "attribute": "face_mask", "eta": 99.0}), StatusCode::BAD_REQUEST, "EtaOutOfRange"),
        (json!({"sample_id": id, "attribute": "face_mask", "eta": -0.5}), StatusCode::BAD_REQUEST, "EtaOutOfRange"),
        (json!({"sample_id": "s999999", "attribute": "face_mask"}), StatusCode::NOT_FOUND, "UnknownSample"),
        (json!({"sample_id": id, "attribute": "hat"}), StatusCode::NOT_FOUND, "UnknownAttribute"),
        (json!({"sample_id": id, "attribute": "sun_glasses"}), StatusCode::NOT_FOUND, "UnknownAttribute"),
    ];
    for (body, code, kind) in cases {
        let (status, err): (_, ErrorBody) = call_json(&s, "POST", "/api/edit", Some(body.clone())).await;
        assert_eq!((status, err.error.as_str()), (code, kind), "{body}");
    }
}

#[tokio::test]
async fn auto_edit_matches_cli_search() {
    let f = fixture();
    let s = session();
    let info = s.sample(1, Some(51)).unwrap().remove(0);
    let req = json!({"sample_id": info.sample_id, "attribute": "face_mask", "auto": true, "zero_offset": true});
    let (status, resp): (_, EditResponse) = call_json(&s, "POST", "/api/edit", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let breakdowns = resp.score_breakdowns.unwrap();
    assert_eq!(breakdowns.len(), f.config.service.search.grid.points().len());
    assert_eq!(breakdowns.len(), 51);
    assert!(breakdowns.iter().all(|b| b.total <= breakdowns.iter().find(|b| b.eta == resp.eta_used).unwrap().total));

    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.sdgt");
    let report = dir.path().join("search.json");
    let run = |args: &[&str]| {
        let out = std::process::Command::new(common::bin()).args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let gen = f.layout.generator();
    run(&[
        "sample",
        "--generator",
        gen.to_str().unwrap(),
        "--seed",
        "51",
        "--index",
        "0",
        "--out",
        w.to_str().unwrap(),
    ]);
    run(&[
        "search-eta",
        "--generator",
        gen.to_str().unwrap(),
        "--w",
        w.to_str().unwrap(),
        "--basis",
        f.layout.basis("face_mask").to_str().unwrap(),
        "--detector",
        f.layout.detector("face_mask").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    let cli: Value = serde_json::from_slice(&std::fs::read(report).unwrap()).unwrap();
    assert_eq!(cli["eta_m"].as_f64().unwrap(), resp.eta_used);
}

#[tokio::test]
async fn interpolation_endpoints_and_caching() {
    let s = session();
    let (sample_id, edit) = editable_sample(&s, 61);
    let body = |steps: usize| Some(json!({"edit_id": edit.edit_id, "steps": steps}));

    let (status, two): (_, FramesResponse) = call_json(&s, "POST", "/api/interpolate", body(2)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(two.frames, vec![format!("/image/{sample_id}.png"), edit.image_ref.clone()]);

    let (_, eight): (_, FramesResponse) = call_json(&s, "POST", "/api/interpolate", body(8)).await;
    assert_eq!(eight.frames.len(), 8);
    let (_, again): (_, FramesResponse) = call_json(&s, "POST", "/api/interpolate", body(8)).await;
    assert_eq!(eight.frames, again.frames);
    for r in &eight.frames {
        let (status, _, _) = call(&s, "GET", r, None).await;
        assert_eq!(status, StatusCode::OK);
    }

    let store = s.snapshot();
    let entry = &store.edits[&edit.edit_id];
    let w = LatentCode::new(store.samples[&sample_id].w.clone(), LatentSpace::W).unwrap();
    let frames = interpolate_edit(&fixture().models.generator, &w, &entry.n_a, 8).unwrap();
    let pngs: Vec<_> = frames.iter().map(|f| f.to_png().unwrap()).collect();
    for (png, r) in pngs.iter().zip(&eight.frames) {
        assert_eq!(png, &s.image(id_of(r)).unwrap(), "{r}");
    }
}

#[tokio::test]
async fn interpolation_errors() {
    let s = session();
    let (_, edit) = editable_sample(&s, 71);
    let max = s.config().max_steps;
    let cases = [
        (json!({"edit_id": "e999999", "steps": 4}), StatusCode::NOT_FOUND, "UnknownEdit"),
        (json!({"edit_id": edit.edit_id, "steps": 1}), StatusCode::BAD_REQUEST, "InvalidSteps"),
        (json!({"edit_id": edit.edit_id, "steps": max + 1}), StatusCode::BAD_REQUEST, "InvalidSteps"),
    ];
    for (body, code, kind) in cases {
        let (status, err): (_, ErrorBody) = call_json(&s, "POST", "/api/interpolate", Some(body.clone())).await;
        assert_eq!((status, err.error.as_str()), (code, kind), "{body}");
    }
}

#[tokio::test]
async fn attributes_lists_editable_ids() {
    let s = session();
    let (status, resp): (_, AttributesResponse) = call_json(&s, "GET", "/api/attributes", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<_> = resp.attributes.iter().map(|a| a.id.as_str()).collect();
    assert_eq!(ids, ["face_mask"]);
    assert_eq!((resp.grid_min, resp.grid_max, resp.grid_step), (0.0, 10.0, 0.2));
    assert_eq!(resp.attributes[0].eta_m, 1.0);
    assert_eq!(resp.max_steps, s.config().max_steps);
}

#[tokio::test]
async fn unknown_image_is_not_found() {
    let s = session();
    for uri in ["/image/s424242.png", "/image/nothing"] {
        let (status, err): (_, ErrorBody) = call_json(&s, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_eq!(err.error, "UnknownImage");
    }
}

#[tokio::test]
async fn export_import_roundtrip() {
    let s = session();
    let (_, edit) = editable_sample(&s, 81);
    s.interpolate(&edit.edit_id, 4).unwrap();
    let (status, tar, ctype) = call(&s, "GET", "/api/session/export", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("application/x-tar"));

    let restored = session();
    restored.import_bytes(&tar).unwrap();
    assert_eq!(restored.snapshot(), s.snapshot());
    assert_eq!(restored.interpolate(&edit.edit_id, 4).unwrap(), s.interpolate(&edit.edit_id, 4).unwrap());
    let fresh = restored.sample(1, Some(1)).unwrap();
    assert!(!s.snapshot().samples.contains_key(&fresh[0].sample_id));
    assert!(!restored.export_bytes().unwrap().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.tar");
    s.export_to(&path).unwrap();
    let from_file = session();
    from_file.import_from(&path).unwrap();
    assert_eq!(from_file.snapshot(), s.snapshot());
}

#[tokio::test]
async fn empty_session_exports_valid_archive() {
    let s = session();
    let bytes = s.export_bytes().unwrap();
    let other = session();
    other.sample(1, Some(3)).unwrap();
    other.import_bytes(&bytes).unwrap();
    assert_eq!(other.snapshot(), s.snapshot());
    assert!(other.snapshot().samples.is_empty());
}

#[tokio::test]
async fn export_to_unwritable_path_is_io_error() {
    let s = session();
    let dir = tempfile::tempdir().unwrap();
    let err = s.export_to(dir.path().join("missing").join("session.tar")).unwrap_err();
    assert_eq!(err.kind(), "IoError");
    assert_eq!(session().import_from(dir.path().join("nope.tar")).unwrap_err().kind(), "IoError");
    assert!(session().import_bytes(b"not a tar").is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_edits_get_distinct_ids() {
    let s = session();
    let (sample_id, _) = editable_sample(&s, 91);
    let tasks: Vec<_> = (0..6)
        .map(|i| {
            let s = s.clone();
            let body = json!({"sample_id": sample_id, "attribute": "face_mask", "eta": 0.2 * i as f64});
            tokio::spawn(async move { call_json::<EditResponse>(&s, "POST", "/api/edit", Some(body)).await })
        })
        .collect();
    let mut ids = Vec::new();
    for t in tasks {
        let (status, resp) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        ids.push(resp.edit_id);
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 6);
    assert_eq!(s.snapshot().edits.len(), 7);
}
