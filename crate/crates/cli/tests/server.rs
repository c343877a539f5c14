use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use c3edit::image::ViewImage;
use c3edit::pipeline::{read_manifest, EditSession, Phase, RunConfig};
use c3edit::scene::make_ring_scene_with_resolution;
use c3edit_cli::server::{router, CandidateEntry, JobSnapshot};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

fn create(dir: &Path, intra_iters: usize) {
    let (scene, cams) = make_ring_scene_with_resolution(4, 30, 1, 16).unwrap();
    let cfg = RunConfig {
        intra_iters,
        inter_iters_per_view: 1,
        num_denoise_steps: 2,
        lift_steps: 10,
        candidate_seeds: vec![0, 1, 2],
        ..RunConfig::default()
    };
    EditSession::create(dir, scene, cams, "paint it blue", 3, cfg, false).unwrap();
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &Router, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

async fn post(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::post(uri).body(Body::empty()).unwrap()).await
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

async fn wait_idle(app: &Router) -> JobSnapshot {
    loop {
        let (_, body) = get(app, "/api/progress").await;
        let snap: JobSnapshot = serde_json::from_slice(&body).unwrap();
        if !snap.running {
            return snap;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

async fn run_job(app: &Router, op: &str) {
    let (status, body) = post(app, &format!("/api/phase/{op}")).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&body));
    let snap = wait_idle(app).await;
    assert_eq!(snap.error, None);
}

fn multipart(view: &str, png: Option<&[u8]>) -> Request<Body> {
    let b = "XBOUNDARYX";
    let mut body = format!("--{b}\r\nContent-Disposition: form-data; name=\"view_id\"\r\n\r\n{view}\r\n").into_bytes();
    if let Some(png) = png {
        body.extend(
            format!("--{b}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"gt.png\"\r\nContent-Type: image/png\r\n\r\n")
                .bytes(),
        );
        body.extend_from_slice(png);
        body.extend(b"\r\n");
    }
    body.extend(format!("--{b}--\r\n").bytes());
    Request::post("/api/select-gt")
        .header("content-type", format!("multipart/form-data; boundary={b}"))
        .body(Body::from(body))
        .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn session_and_gallery() {
    let dir = tempfile::tempdir().unwrap();
    create(dir.path(), 2);
    let app = router(dir.path());
    let (status, body) = get(&app, "/api/session").await;
    assert_eq!(status, StatusCode::OK);
    let s = json(&body);
    assert_eq!(s["phase"], "created");
    assert_eq!(s["view_ids"], serde_json::json!([0, 1, 2, 3]));
    let (_, body) = get(&app, "/api/candidates").await;
    assert_eq!(json(&body), serde_json::json!([]));

    run_job(&app, "candidates").await;
    let (_, body) = get(&app, "/api/candidates").await;
    let list: Vec<CandidateEntry> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.len(), 4 * 3);
    let (status, png) = get(&app, &list[5].image_url).await;
    assert_eq!(status, StatusCode::OK);
    let on_disk = std::fs::read(dir.path().join("candidates/view1_seed2.png")).unwrap();
    assert_eq!(list[5].image_url, "/api/images/candidates/view1_seed2.png");
    assert_eq!(png, on_disk);
    for bad in [
        "/api/images/../manifest.json",
        "/api/images/candidates/..%2Fgt.png",
        "/api/images/manifest.json",
    ] {
        let (status, _) = get(&app, bad).await;
        assert!(
            status == StatusCode::BAD_REQUEST || status == StatusCode::NOT_FOUND,
            "{bad}: {status}"
        );
    }
    let (status, _) = get(&app, "/api/images/edits/view0.png").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn wrong_phase_and_unknown_ops_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    create(dir.path(), 2);
    let app = router(dir.path());
    let (status, body) = post(&app, "/api/phase/fit").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(json(&body)["error"].as_str().unwrap().contains("gt_selected"));
    let (status, body) = post_json(&app, "/api/select-gt", r#"{"view_id": 1}"#).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(json(&body)["error"].as_str().unwrap().contains("candidates_ready"));
    let (status, _) = post(&app, "/api/phase/bogus").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = get(&app, "/api/metrics").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(!wait_idle(&app).await.running);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn upload_validation() {
    let dir = tempfile::tempdir().unwrap();
    create(dir.path(), 2);
    let app = router(dir.path());
    run_job(&app, "candidates").await;

    let wrong = ViewImage::filled(2, 20, 12, [0.1, 0.5, 0.9])
        .unwrap()
        .encode_png()
        .unwrap();
    let (status, body) = send(&app, multipart("2", Some(&wrong))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let msg = json(&body)["error"].as_str().unwrap().to_string();
    assert!(msg.contains("20x12") && msg.contains("16x16"), "{msg}");
    assert_eq!(read_manifest(dir.path()).unwrap().phase, Phase::CandidatesReady);

    let good = ViewImage::filled(2, 16, 16, [0.2, 0.4, 0.6])
        .unwrap()
        .encode_png()
        .unwrap();
    let (status, body) = send(&app, multipart("2", Some(&good))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let m = json(&body);
    assert_eq!(m["gt_view_id"], 2);
    assert_eq!(m["gt_overridden"], true);
    assert_eq!(std::fs::read(dir.path().join("gt.png")).unwrap(), good);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn multipart_without_image_uses_candidate() {
    let dir = tempfile::tempdir().unwrap();
    create(dir.path(), 2);
    let app = router(dir.path());
    run_job(&app, "candidates").await;
    let (status, _) = send(&app, multipart("7", None)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = send(&app, multipart("3", None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["gt_overridden"], false);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn one_job_at_a_time_and_progress_advances() {
    let dir = tempfile::tempdir().unwrap();
    create(dir.path(), 60);
    let app = router(dir.path());
    run_job(&app, "candidates").await;
    let (status, _) = post_json(&app, "/api/select-gt", r#"{"view_id": 1}"#).await;
    assert_eq!(status, StatusCode::OK);

    let (a, b) = tokio::join!(post(&app, "/api/phase/fit"), post(&app, "/api/phase/fit"));
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::ACCEPTED, StatusCode::CONFLICT]);
    let (status, _) = post_json(&app, "/api/select-gt", r#"{"view_id": 2}"#).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let mut seen = Vec::new();
    loop {
        let (_, body) = get(&app, "/api/progress").await;
        let snap: JobSnapshot = serde_json::from_slice(&body).unwrap();
        if snap.phase.as_deref() == Some("fit_gt") {
            seen.push(snap.iteration);
            assert_eq!(snap.total, 60);
            assert!(snap.latest_loss.unwrap().is_finite());
        }
        if !snap.running {
            assert_eq!(snap.error, None);
            break;
        }
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    assert!(seen.windows(2).all(|w| w[0] <= w[1]), "{seen:?}");
    seen.dedup();
    assert!(seen.len() >= 3, "{seen:?}");
    assert_eq!(*seen.last().unwrap(), 60);
    assert_eq!(read_manifest(dir.path()).unwrap().phase, Phase::GtFitted);

    let (_, log) = get(&app, "/api/losslog").await;
    let lines: Vec<Value> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 60);
    for key in ["phase", "iteration", "view_id", "loss", "components"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    let (_, tail) = get(&app, "/api/losslog?since=58").await;
    assert_eq!(String::from_utf8(tail).unwrap().lines().count(), 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn api_and_cli_share_state() {
    let dir = tempfile::tempdir().unwrap();
    create(dir.path(), 2);
    let app = router(dir.path());
    run_job(&app, "candidates").await;
    let (status, _) = post_json(&app, "/api/select-gt", r#"{"view_id": 0}"#).await;
    assert_eq!(status, StatusCode::OK);
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_c3edit"))
        .arg("--session")
        .arg(dir.path())
        .arg("fit")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, body) = get(&app, "/api/session").await;
    assert_eq!(json(&body)["phase"], "gt_fitted");
    for op in ["propagate", "edit", "lift", "eval"] {
        run_job(&app, op).await;
    }
    let (status, body) = get(&app, "/api/metrics").await;
    assert_eq!(status, StatusCode::OK);
    let report = json(&body);
    assert!(report["image_image_score"].as_f64().unwrap() > 0.0);
    assert_eq!(read_manifest(dir.path()).unwrap().phase, Phase::Lifted);
}
