use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

use relight_core::dirmath::DirectionSet;
use relight_core::imageio::decode_png;
use relight_core::scenestore::save_scene;
use relight_core::splatfield::{AppearanceMlp, AuxLatent, SceneMetadata, SplatCloud, SplatScene, FEATURE_DIM, LATENT_DIM};
use relightd::{router, AppState};

fn scene(seed: u64, n: usize) -> SplatScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splats = SplatCloud::zeros(0);
    for _ in 0..n {
        let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        splats.push(p, [1.0, 0.0, 0.0, 0.0], [-2.0; 3], 1.5, [0.0; FEATURE_DIM].map(|_| rng.gen_range(-1.0..1.0)));
    }
    let dirs = DirectionSet::default_set();
    SplatScene {
        splats,
        mlp: AppearanceMlp::random(&mut rng),
        latents: vec![
            AuxLatent { view_id: "train_00".into(), a: (0..LATENT_DIM).map(|_| rng.gen_range(-0.5..0.5)).collect() },
            AuxLatent { view_id: "train_01".into(), a: (0..LATENT_DIM).map(|_| rng.gen_range(-0.5..0.5)).collect() },
        ],
        background: [0.0; 3],
        metadata: SceneMetadata { radius: 1.5, light_dirs: dirs.directions.clone(), ..Default::default() },
    }
}

fn app_with(scenes: &[(&str, SplatScene)]) -> (AppState, Router) {
    let state = AppState::new(2);
    for (id, s) in scenes {
        state.insert(id, s.clone());
    }
    let app = router(state.clone(), Some("*")).unwrap();
    (state, app)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, json: &str) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(json.to_owned())).unwrap()
}

fn render_body(width: usize, light: &str, extra: &str) -> String {
    format!(r#"{{"camera":{{"position":[0,0,5],"target":[0,0,0],"up":[0,1,0],"fov_deg":40,"width":{width},"height":32}},{light}{extra}}}"#)
}

fn json(body: &[u8]) -> serde_json::Value {
    serde_json::from_slice(body).unwrap()
}

#[tokio::test]
async fn lists_scenes() {
    let (_, empty) = app_with(&[]);
    let (status, _, body) = call(&empty, get("/api/scenes")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body), serde_json::json!([]));

    let (_, app) = app_with(&[("b", scene(1, 10)), ("a", scene(2, 7))]);
    let first = json(&call(&app, get("/api/scenes")).await.2);
    let second = json(&call(&app, get("/api/scenes")).await.2);
    assert_eq!(first, second);
    let list = first.as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!((list[0]["id"].as_str(), list[1]["id"].as_str()), (Some("a"), Some("b")));
    assert_eq!(list[0]["splat_count"], 7);
    assert_eq!(list[0]["status"], "ready");
    assert!(list[0]["default_camera"]["position"].is_array());
    assert!(list[0]["bounds"]["min"].is_array());
}

#[tokio::test]
async fn renders_png_deterministically() {
    let (_, app) = app_with(&[("s", scene(3, 40))]);
    let req = render_body(48, r#""light_dir":[0.3,0.4,0.8],"light_frame":"world""#, "");
    let (status, headers, a) = call(&app, post("/api/scenes/s/render", &req)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&a));
    assert_eq!(headers["content-type"], "image/png");
    assert!(headers["x-render-ms"].to_str().unwrap().parse::<f64>().unwrap() >= 0.0);
    let img = decode_png(&a).unwrap();
    assert_eq!((img.width(), img.height()), (48, 32));
    let (_, _, b) = call(&app, post("/api/scenes/s/render", &req)).await;
    assert_eq!(a, b);

    // Concurrent identical requests see the same immutable snapshot.
    let tasks: Vec<_> = (0..6).map(|_| {
        let (app, req) = (app.clone(), req.clone());
        tokio::spawn(async move { call(&app, post("/api/scenes/s/render", &req)).await.2 })
    }).collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), a);
    }

    let own = call(&app, post("/api/scenes/s/render", &render_body(48, r#""light_dir":[0.3,0.4,0.8]"#, r#","latent":"train_01""#))).await;
    assert_eq!(own.0, StatusCode::OK);
    assert_ne!(own.2, a);
}

#[tokio::test]
async fn camera_frame_light_matches_world_for_identity_camera() {
    let (_, app) = app_with(&[("s", scene(4, 40))]);
    let cam = call(&app, post("/api/scenes/s/render", &render_body(32, r#""light_dir":[0,0,1],"light_frame":"camera""#, ""))).await;
    let world = call(&app, post("/api/scenes/s/render", &render_body(32, r#""light_dir":[0,0,1],"light_frame":"world""#, ""))).await;
    assert_eq!(cam.0, StatusCode::OK);
    assert_eq!(cam.2, world.2);
    let other = call(&app, post("/api/scenes/s/render", &render_body(32, r#""light_dir":[1,0,0],"light_frame":"world""#, ""))).await;
    assert_ne!(other.2, world.2);
}

#[tokio::test]
async fn rejects_bad_requests_with_status_codes() {
    let (state, app) = app_with(&[("s", scene(5, 5))]);
    let (status, _, body) = call(&app, post("/api/scenes/s/render", &render_body(8, r#""light_dir":[0,0,1]"#, ""))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let err = json(&body);
    assert_eq!(err["field"], "width");
    assert!(err["error"].as_str().unwrap().contains("width"));

    let (status, _, body) = call(&app, post("/api/scenes/s/render", &render_body(32, r#""light_dir":[0,0,1]"#, r#","latent":"nope""#))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json(&body)["field"], "latent");

    let ok = render_body(32, r#""light_dir":[0,0,1]"#, "");
    assert_eq!(call(&app, post("/api/scenes/missing/render", &ok)).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, get("/api/scenes/missing/lights")).await.0, StatusCode::NOT_FOUND);

    state.mark_loading("later");
    assert_eq!(call(&app, post("/api/scenes/later/render", &ok)).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let list = json(&call(&app, get("/api/scenes")).await.2);
    assert_eq!(list[0]["status"], "loading");
}

#[tokio::test]
async fn lights_come_from_scene_metadata() {
    let (_, app) = app_with(&[("s", scene(6, 5))]);
    let (status, _, body) = call(&app, get("/api/scenes/s/lights")).await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["frame"], "camera");
    assert_eq!(v["unlit_available"], true);
    let dirs = v["directions"].as_array().unwrap();
    assert_eq!(dirs.len(), 18);
    let expected = DirectionSet::default_set().directions;
    for (d, e) in dirs.iter().zip(&expected) {
        let d: Vec<f64> = d.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!((d.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(d.as_slice(), e.as_slice());
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| {
        let p = e.unwrap().path();
        (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
    }).collect();
    out.sort();
    out
}

#[tokio::test]
async fn serves_files_without_touching_them_and_hot_reloads() {
    let dir = tempfile::tempdir().unwrap();
    save_scene(&scene(7, 12), &dir.path().join("desk.rlf")).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let state = AppState::new(3);
    assert_eq!(state.rescan(dir.path()).unwrap(), 1);
    assert_eq!(state.rescan(dir.path()).unwrap(), 0);
    let app = router(state.clone(), None).unwrap();
    let before = dir_bytes(dir.path());

    let req = render_body(16, r#""light_dir":[0,1,1]"#, "").replace("\"height\":32", "\"height\":16");
    let reference = call(&app, post("/api/scenes/desk/render", &req)).await;
    assert_eq!(reference.0, StatusCode::OK);
    for i in 0..1000 {
        let (status, _, body) = if i % 4 == 0 { call(&app, get("/api/scenes")).await } else { call(&app, post("/api/scenes/desk/render", &req)).await };
        assert_eq!(status, StatusCode::OK);
        if i % 4 != 0 {
            assert_eq!(body, reference.2);
        }
    }
    assert_eq!(dir_bytes(dir.path()), before);

    // A changed file is picked up by the next scan and swapped in whole.
    let old = state.snapshot("desk").unwrap();
    save_scene(&scene(8, 30), &dir.path().join("desk.rlf")).unwrap();
    assert_eq!(state.rescan(dir.path()).unwrap(), 1);
    assert_eq!(state.snapshot("desk").unwrap().scene.splats.len(), 30);
    assert_eq!(old.scene.splats.len(), 12);

    // A corrupt replacement keeps serving the last good snapshot.
    std::fs::write(dir.path().join("desk.rlf"), b"RLF1 broken").unwrap();
    state.rescan(dir.path()).unwrap();
    assert_eq!(state.snapshot("desk").unwrap().scene.splats.len(), 30);

    std::fs::remove_file(dir.path().join("desk.rlf")).unwrap();
    state.rescan(dir.path()).unwrap();
    assert!(state.ids().is_empty());
}
