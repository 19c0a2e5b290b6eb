use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body, Bytes};
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use diffcolor::diffusion::toy::{self, ToyConfig};
use diffcolor::stage2::{PromptOptions, PromptSet};
use diffcolor::{rgb_to_gray, synthetic, PipelineConfig};
use diffcolor_app::service::{router, Service};
use serde_json::{json, Value};
use tower::ServiceExt;

const PROMPT: &str = "A pink square and a yellow triangle on a purple background.";

fn config(stage2_steps: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::toy_demo();
    cfg.stage1.steps = 30;
    cfg.stage2.embed_steps = stage2_steps;
    cfg.stage2.finetune_steps = stage2_steps;
    cfg
}

fn app(dir: &Path, stage2_steps: usize) -> Router {
    let models = toy::pretrained(&ToyConfig::default()).unwrap();
    router(Service::new(dir, config(stage2_steps), models).unwrap())
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, HeaderMap, Bytes) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let (parts, body) = resp.into_parts();
    (parts.status, parts.headers, to_bytes(body, usize::MAX).await.unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, HeaderMap, Bytes) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, HeaderMap, Bytes) {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    send(app, req).await
}

fn json_of(b: &Bytes) -> Value {
    serde_json::from_slice(b).unwrap_or_else(|_| panic!("not JSON: {}", String::from_utf8_lossy(b)))
}

const BOUNDARY: &str = "diffcolor-test-boundary";

fn multipart(fields: &[(&str, Option<&str>, &[u8])]) -> Request<Body> {
    let mut body = Vec::new();
    for (name, filename, data) in fields {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match filename {
            Some(f) => body.extend_from_slice(
                format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{f}\"\r\nContent-Type: image/png\r\n\r\n")
                    .as_bytes(),
            ),
            None => body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes()),
        }
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/api/jobs/stage1")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn with_uri(mut req: Request<Body>, uri: &str) -> Request<Body> {
    *req.uri_mut() = uri.parse().unwrap();
    req
}

fn sample_gray_png() -> Vec<u8> {
    std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/sample_gray.png")).unwrap()
}

async fn wait_for(app: &Router, job_id: &str) -> Value {
    for _ in 0..2400 {
        let (status, _, body) = get(app, &format!("/api/jobs/{job_id}")).await;
        assert_eq!(status, StatusCode::OK);
        let job = json_of(&body);
        if job["status"] == "done" || job["status"] == "failed" {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {job_id} did not finish");
}

/// `(event, id, data)` triples of an SSE body.
fn parse_sse(body: &str) -> Vec<(String, usize, Value)> {
    body.split("\n\n")
        .filter(|block| block.contains("data:"))
        .map(|block| {
            let field = |k: &str| {
                block.lines().find_map(|l| l.strip_prefix(k)).map(|v| v.trim().to_string()).unwrap_or_default()
            };
            (field("event:"), field("id:").parse().unwrap(), serde_json::from_str(&field("data:")).unwrap())
        })
        .collect()
}

/// Runs a Stage-1 job and a session build on the sample; returns the session id.
async fn build_session(app: &Router, session_id: &str) -> String {
    let gray = sample_gray_png();
    let (status, _, body) = send(app, multipart(&[("gray", Some("gray.png"), &gray), ("prompt", None, PROMPT.as_bytes())])).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&body));
    let job = wait_for(app, json_of(&body)["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "done", "{job}");
    let result = &job["result"];
    let req = json!({
        "image_ref": result["aligned_ref"],
        "gray_ref": result["gray_ref"],
        "prompt": PROMPT,
        "objects": ["square", "triangle"],
        "session_id": session_id,
    });
    let (status, _, body) = post_json(app, "/api/jobs/session", req).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&body));
    let job = wait_for(app, json_of(&body)["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "done", "{job}");
    session_id.to_string()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stage1_job_streams_ordered_progress() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 20);
    let gray = sample_gray_png();
    let req = multipart(&[
        ("gray", Some("gray.png"), &gray),
        ("prompt", None, PROMPT.as_bytes()),
        ("negatives", None, br#"["A grayscale photograph."]"#),
        ("seed", None, b"4"),
    ]);
    let (status, _, body) = send(&app, req).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job_id = json_of(&body)["job_id"].as_str().unwrap().to_string();

    // the stream replays from the start and closes when the job ends
    let (status, headers, body) = get(&app, &format!("/api/jobs/{job_id}/events")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(headers["content-type"].to_str().unwrap().starts_with("text/event-stream"));
    let events = parse_sse(&String::from_utf8_lossy(&body));
    assert_eq!(events.last().unwrap().0, "done");
    assert!(events.iter().enumerate().all(|(i, e)| e.1 == i));
    let steps: Vec<u64> = events.iter().filter(|e| e.0 == "progress").map(|e| e.2["step"].as_u64().unwrap()).collect();
    assert_eq!(steps.len(), 30);
    assert!(steps.windows(2).all(|w| w[0] < w[1]));

    let job = wait_for(&app, &job_id).await;
    assert_eq!(job["kind"], "stage1");
    assert_eq!(job["progress"]["fraction"], 1.0);
    assert_eq!(job["result"]["manifest"]["negatives"], json!(["A grayscale photograph."]));
    assert_eq!(job["result"]["manifest"]["seed"], 4);
    for key in ["x_pri", "x_pri_aligned", "training_log", "manifest", "effective_config"] {
        let url = job["result"]["urls"][key].as_str().unwrap();
        let (status, _, _) = get(&app, url).await;
        assert_eq!(status, StatusCode::OK, "{url}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn session_render_contract() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 40);
    let id = build_session(&app, "shapes").await;

    let (status, _, body) = get(&app, &format!("/api/sessions/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    let info = json_of(&body);
    assert_eq!(info["status"], "ready");
    assert_eq!(info["manifest"]["rewritten"], "A pink [*] square and a yellow [*] triangle on a purple background.");
    assert_eq!(info["checkpoints"], json!(["reference.ckpt", "finetuned.ckpt"]));
    let seed = info["seeds"]["reconstruction"].as_u64().unwrap();
    let (_, _, reconstruction) = get(&app, info["urls"]["reconstruction"].as_str().unwrap()).await;

    // η = 0 at the stored seed is the stored reconstruction, with no gradient work
    let render = format!("/api/sessions/{id}/render");
    let (status, headers, png) = post_json(&app, &render, json!({ "eta": 0.0, "seed": seed })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    assert_eq!(headers["x-gradient-evaluations"], "0");
    assert_eq!(png, reconstruction);

    // concurrent renders on one session
    let colors = json!({ "square": "green", "triangle": "blue" });
    let reqs: Vec<_> = (0..4u64)
        .map(|seed| post_json(&app, &render, json!({ "color_assignments": colors, "eta": 0.9, "seed": seed })))
        .collect();
    let results = futures::future::join_all(reqs).await;
    for (status, headers, _) in &results {
        assert_eq!(*status, StatusCode::OK);
        assert_eq!(headers["x-gradient-evaluations"], "0");
        assert_eq!(headers["x-target-prompt"], "A pink green square and a yellow blue triangle on a purple background.");
    }
    assert_ne!(results[0].2, results[1].2);
    let (_, _, again) = post_json(&app, &render, json!({ "color_assignments": colors, "eta": 0.9, "seed": 0 })).await;
    assert_eq!(again, results[0].2);

    let (status, _, body) =
        post_json(&app, &format!("/api/sessions/{id}/variants"), json!({ "color_assignments": colors, "count": 8 })).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let v = json_of(&body);
    assert_eq!(v["gradient_evaluations"], 0);
    let list = v["variants"].as_array().unwrap();
    assert_eq!(list.len(), 8);
    let etas: Vec<f64> = list.iter().map(|x| x["eta"].as_f64().unwrap()).collect();
    assert!(etas.windows(2).all(|w| w[0] < w[1]));
    assert_eq!((etas[0], etas[7]), (0.7, 0.975));
    let (status, headers, _) = get(&app, list[3]["url"].as_str().unwrap()).await;
    assert_eq!((status, headers["content-type"].to_str().unwrap()), (StatusCode::OK, "image/png"));

    let (status, _, body) = post_json(
        &app,
        &format!("/api/sessions/{id}/variants"),
        json!({ "color_assignments": colors, "count": 3, "eta_range": [0.5, 0.9], "seeds": [5, 6, 7] }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let list = json_of(&body)["variants"].clone();
    assert_eq!(list.as_array().unwrap().iter().map(|x| x["seed"].as_u64().unwrap()).collect::<Vec<_>>(), vec![5, 6, 7]);

    // errors
    let (status, _, _) = post_json(&app, "/api/sessions/nope/render", json!({ "eta": 0.5 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = post_json(&app, &render, json!({ "eta": 1.5 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _, body) = post_json(&app, &render, json!({ "color_assignments": { "giraffe": "red" }, "eta": 0.5 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(json_of(&body)["error"].as_str().unwrap().contains("giraffe"));
    let (status, _, _) =
        post_json(&app, &format!("/api/sessions/{id}/variants"), json!({ "color_assignments": colors, "count": 0 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // a new service on the same data directory picks the session up
    let reopened = self::app(dir.path(), 40);
    let (status, _, body) = get(&reopened, &format!("/api/sessions/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["status"], "ready");
    let (_, _, png) = post_json(&reopened, &render, json!({ "eta": 0.0, "seed": seed })).await;
    assert_eq!(png, reconstruction);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn building_sessions_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 400);
    let sample = synthetic::colored_shapes(1, 32, 17).remove(0);
    let upload = |bytes: Vec<u8>| {
        let app = app.clone();
        async move {
            let req = with_uri(multipart(&[("file", Some("x.png"), &bytes)]), "/api/uploads");
            let (status, _, body) = send(&app, req).await;
            assert_eq!(status, StatusCode::OK);
            json_of(&body)["id"].as_str().unwrap().to_string()
        }
    };
    let image_ref = upload(sample.image.to_png_bytes().unwrap()).await;
    let gray_ref = upload(rgb_to_gray(&sample.image).to_color().to_png_bytes().unwrap()).await;
    let object = sample.scene.shapes[0].shape.name();
    let req = json!({
        "image_ref": image_ref, "gray_ref": gray_ref, "prompt": sample.scene.plain_caption(),
        "objects": [object], "session_id": "busy",
    });
    let (status, _, body) = post_json(&app, "/api/jobs/session", req.clone()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job_id = json_of(&body)["job_id"].as_str().unwrap().to_string();

    let (status, _, body) = get(&app, "/api/sessions/busy").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["status"], "building");
    let (status, _, _) = post_json(&app, "/api/sessions/busy/render", json!({ "eta": 0.5 })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _, _) = post_json(&app, "/api/jobs/session", req.clone()).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let job = wait_for(&app, &job_id).await;
    assert_eq!(job["status"], "done");
    assert_eq!(job["session_id"], "busy");
    let (status, _, _) = post_json(&app, "/api/sessions/busy/render", json!({ "eta": 0.5 })).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _, _) = post_json(&app, "/api/jobs/session", req).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn prompt_preview_echoes_server_rewriting() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 20);
    let context = "A dog sitting on a wooden bench.";
    let objects = vec!["dog".to_string(), "wooden bench".to_string()];
    let expected = PromptSet::from_objects(context, &objects, PromptOptions::default()).unwrap();

    let (status, _, body) = post_json(
        &app,
        "/api/prompts/preview",
        json!({ "context": context, "objects": objects, "color_assignments": { "dog": "brown", "wooden bench": "purple" } }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    assert_eq!(v["rewritten"].as_str().unwrap().as_bytes(), expected.rewritten.as_bytes());
    assert_eq!(v["target"], "A brown dog sitting on a purple wooden bench.");
    assert_eq!(v["object_spans"], serde_json::to_value(&expected.object_spans).unwrap());

    // spans round-trip to the same answer
    let (_, _, body) = post_json(&app, "/api/prompts/preview", json!({ "context": context, "object_spans": v["object_spans"] })).await;
    assert_eq!(json_of(&body)["rewritten"], v["rewritten"]);

    let (_, _, body) = post_json(
        &app,
        "/api/prompts/preview",
        json!({ "context": context, "objects": ["dog"], "options": { "identifier_style": "per_object" } }),
    )
    .await;
    assert_eq!(json_of(&body)["rewritten"], "A [*1] dog sitting on a wooden bench.");

    for bad in [
        json!({ "context": context, "object_spans": [{ "start": 0, "end": 99 }] }),
        json!({ "context": context, "object_spans": [{ "start": 2, "end": 5 }, { "start": 3, "end": 6 }] }),
        json!({ "context": context, "objects": ["cat"] }),
        json!({ "context": context }),
    ] {
        let (status, _, _) = post_json(&app, "/api/prompts/preview", bad.clone()).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
    }
}

#[tokio::test]
async fn unknown_ids_and_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 20);
    assert_eq!(get(&app, "/api/health").await.0, StatusCode::OK);
    assert_eq!(get(&app, "/api/jobs/job-x").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/jobs/job-x/events").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/sessions/none").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/files/../secret").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/files/uploads/missing.png").await.0, StatusCode::NOT_FOUND);

    let (status, _, _) = send(&app, multipart(&[("gray", Some("g.png"), &sample_gray_png())])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _, _) = send(&app, multipart(&[("gray", Some("g.png"), b"not a png"), ("prompt", None, b"x")])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _, _) = send(&app, multipart(&[("gray_ref", None, b"abc"), ("prompt", None, b"x")])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _, _) = send(
        &app,
        multipart(&[("gray", Some("g.png"), &sample_gray_png()), ("prompt", None, b"x"), ("config", None, b"[stage1]\nsteps = 0\n")]),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let req = json!({ "image_ref": "0".repeat(64), "gray_ref": "0".repeat(64), "prompt": "A dog.", "objects": ["dog"] });
    assert_eq!(post_json(&app, "/api/jobs/session", req).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[test]
fn service_is_shareable() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Arc<Service>>();
}
