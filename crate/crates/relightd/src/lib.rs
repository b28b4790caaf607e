//! HTTP render service for trained scenes.
//!
//! Scenes are `*.rlf` files in one directory, served as immutable snapshots
//! that a background watcher swaps when a file changes. Each scene renders
//! at most `max_concurrent` frames at a time.

pub mod request;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant, SystemTime};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use relight_core::imageio::encode_png;
use relight_core::scenestore::load_scene;
use relight_core::splatfield::{render, SplatScene};
use relight_core::trainfield::infer_latent;

use request::LatentChoice;

pub const SCENE_EXTENSION: &str = "rlf";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub scenes: PathBuf,
    pub bind: String,
    pub port: u16,
    pub max_concurrent: usize,
    /// Allowed origin, or `*` for any.
    pub cors: Option<String>,
    /// Directory rescan period; zero disables hot reload.
    pub reload_secs: u64,
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid bind address {0}")]
    Bind(String),
    #[error("invalid CORS origin {0:?}")]
    Cors(String),
}

/// A loaded scene plus what every request needs precomputed.
#[derive(Debug)]
pub struct Snapshot {
    pub id: String,
    pub scene: SplatScene,
    pub mean_latent: Vec<f32>,
    pub bounds: ([f32; 3], [f32; 3]),
}

impl Snapshot {
    pub fn new(id: &str, scene: SplatScene) -> Self {
        let mean_latent = infer_latent(&scene).unwrap_or_else(|_| vec![0.0; relight_core::splatfield::LATENT_DIM]);
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for p in &scene.splats.positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Self { id: id.into(), scene, mean_latent, bounds: (lo, hi) }
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Loading,
    Ready(Arc<Snapshot>),
    Failed(String),
}

#[derive(Debug)]
struct Entry {
    slot: Slot,
    /// Modification stamp of the file the slot was loaded from.
    stamp: Option<(SystemTime, u64)>,
    permits: Arc<Semaphore>,
}

/// Shared service state. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct AppState {
    scenes: Arc<RwLock<HashMap<String, Entry>>>,
    max_concurrent: usize,
}

fn scene_id(path: &Path) -> Option<String> {
    if path.extension().and_then(|e| e.to_str()) != Some(SCENE_EXTENSION) {
        return None;
    }
    path.file_stem().and_then(|s| s.to_str()).map(str::to_owned)
}

fn file_stamp(path: &Path) -> Option<(SystemTime, u64)> {
    let meta = std::fs::metadata(path).ok()?;
    Some((meta.modified().ok()?, meta.len()))
}

impl AppState {
    pub fn new(max_concurrent: usize) -> Self {
        Self { scenes: Arc::default(), max_concurrent: max_concurrent.max(1) }
    }

    fn entry_mut<'a>(map: &'a mut HashMap<String, Entry>, id: &str, k: usize) -> &'a mut Entry {
        map.entry(id.to_owned()).or_insert_with(|| Entry { slot: Slot::Loading, stamp: None, permits: Arc::new(Semaphore::new(k)) })
    }

    /// Registers a scene id that is not ready yet.
    pub fn mark_loading(&self, id: &str) {
        let mut map = self.scenes.write().expect("scene map lock");
        Self::entry_mut(&mut map, id, self.max_concurrent).slot = Slot::Loading;
    }

    /// Publishes a scene snapshot, replacing any previous one.
    pub fn insert(&self, id: &str, scene: SplatScene) {
        let snap = Arc::new(Snapshot::new(id, scene));
        let mut map = self.scenes.write().expect("scene map lock");
        Self::entry_mut(&mut map, id, self.max_concurrent).slot = Slot::Ready(snap);
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.scenes.read().expect("scene map lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    fn lookup(&self, id: &str) -> Option<(Slot, Arc<Semaphore>)> {
        self.scenes.read().expect("scene map lock").get(id).map(|e| (e.slot.clone(), e.permits.clone()))
    }

    /// Scene files in `dir` that are new or changed since the last scan.
    pub fn pending_files(&self, dir: &Path) -> Result<Vec<(String, PathBuf)>, ServeError> {
        let io = |source| ServeError::Io { path: dir.display().to_string(), source };
        let map = self.scenes.read().expect("scene map lock");
        let mut out = vec![];
        for item in std::fs::read_dir(dir).map_err(io)? {
            let path = item.map_err(io)?.path();
            let Some(id) = scene_id(&path) else { continue };
            let stamp = file_stamp(&path);
            if map.get(&id).map(|e| e.stamp) != Some(stamp) {
                out.push((id, path));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Loads one scene file. A failed reload keeps the previous snapshot.
    pub fn load_file(&self, id: &str, path: &Path) {
        let stamp = file_stamp(path);
        let result = load_scene(path);
        let mut map = self.scenes.write().expect("scene map lock");
        let entry = Self::entry_mut(&mut map, id, self.max_concurrent);
        entry.stamp = stamp;
        match result {
            Ok(scene) => {
                log::info!("loaded scene {id} ({} splats)", scene.splats.len());
                entry.slot = Slot::Ready(Arc::new(Snapshot::new(id, scene)));
            }
            Err(e) => {
                log::warn!("cannot load scene {id}: {e}");
                if !matches!(entry.slot, Slot::Ready(_)) {
                    entry.slot = Slot::Failed(e.to_string());
                }
            }
        }
    }

    /// Drops scenes whose files disappeared.
    pub fn forget_missing(&self, dir: &Path) {
        let mut map = self.scenes.write().expect("scene map lock");
        map.retain(|id, _| dir.join(format!("{id}.{SCENE_EXTENSION}")).exists());
    }

    /// Synchronous full scan: loads every new or changed scene file.
    pub fn rescan(&self, dir: &Path) -> Result<usize, ServeError> {
        let pending = self.pending_files(dir)?;
        for (id, path) in &pending {
            self.load_file(id, path);
        }
        self.forget_missing(dir);
        Ok(pending.len())
    }

    /// Snapshot currently served for `id`, if ready.
    pub fn snapshot(&self, id: &str) -> Option<Arc<Snapshot>> {
        match self.lookup(id)?.0 {
            Slot::Ready(s) => Some(s),
            _ => None,
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>, field: Option<&str>) -> Response {
    (status, Json(json!({ "error": message.into(), "field": field }))).into_response()
}

#[derive(Serialize)]
struct SceneSummary {
    id: String,
    name: String,
    status: &'static str,
    splat_count: usize,
    default_camera: Option<serde_json::Value>,
    bounds: Option<serde_json::Value>,
}

async fn list_scenes(State(state): State<AppState>) -> Json<Vec<SceneSummary>> {
    let list = state
        .ids()
        .into_iter()
        .filter_map(|id| {
            let (slot, _) = state.lookup(&id)?;
            Some(match slot {
                Slot::Ready(s) => {
                    let md = &s.scene.metadata;
                    let cam = md.default_camera.unwrap_or((
                        [md.center[0], md.center[1], md.center[2] + 3.0 * md.radius.max(1e-3)],
                        md.center,
                    ));
                    SceneSummary {
                        name: id.clone(),
                        id,
                        status: "ready",
                        splat_count: s.scene.splats.len(),
                        default_camera: Some(json!({ "position": cam.0, "target": cam.1, "up": [0.0, 1.0, 0.0] })),
                        bounds: Some(json!({ "min": s.bounds.0, "max": s.bounds.1 })),
                    }
                }
                Slot::Loading | Slot::Failed(_) => SceneSummary {
                    name: id.clone(),
                    status: if matches!(slot, Slot::Loading) { "loading" } else { "failed" },
                    id,
                    splat_count: 0,
                    default_camera: None,
                    bounds: None,
                },
            })
        })
        .collect();
    Json(list)
}

fn ready(state: &AppState, id: &str) -> Result<(Arc<Snapshot>, Arc<Semaphore>), Response> {
    match state.lookup(id) {
        None => Err(error(StatusCode::NOT_FOUND, format!("unknown scene {id:?}"), None)),
        Some((Slot::Loading, _)) => Err(error(StatusCode::SERVICE_UNAVAILABLE, format!("scene {id:?} is still loading"), None)),
        Some((Slot::Failed(e), _)) => Err(error(StatusCode::SERVICE_UNAVAILABLE, format!("scene {id:?} failed to load: {e}"), None)),
        Some((Slot::Ready(s), permits)) => Ok((s, permits)),
    }
}

async fn lights(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    match ready(&state, &id) {
        Err(r) => r,
        Ok((s, _)) => Json(json!({
            "frame": "camera",
            "directions": s.scene.metadata.light_dirs,
            "unlit_available": true,
        }))
        .into_response(),
    }
}

async fn render_scene(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let (snap, permits) = match ready(&state, &id) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let req = match request::parse(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("{} {}", e.field, e.message), Some(&e.field)),
    };
    if let LatentChoice::View(v) = &req.latent {
        if snap.scene.latent(v).is_err() {
            return error(StatusCode::UNPROCESSABLE_ENTITY, format!("latent {v:?} is not a training view of this scene"), Some("latent"));
        }
    }
    let Ok(_permit) = permits.acquire_owned().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "render queue closed", None);
    };
    let job = tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        let latent = match &req.latent {
            LatentChoice::Mean => snap.mean_latent.as_slice(),
            LatentChoice::View(v) => snap.scene.latent(v).expect("checked above"),
        };
        let out = render(&snap.scene, &req.camera, req.light_world.as_ref(), latent).map(|o| encode_png(&o.color));
        (out, start.elapsed())
    });
    match job.await {
        Ok((Ok(png), took)) => {
            let ms = format!("{:.3}", took.as_secs_f64() * 1e3);
            let mut resp = (StatusCode::OK, png).into_response();
            let headers = resp.headers_mut();
            headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
            headers.insert("x-render-ms", HeaderValue::from_str(&ms).expect("ascii number"));
            resp
        }
        Ok((Err(e), _)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}"), None),
    }
}

fn cors_layer(origin: &str) -> Result<CorsLayer, ServeError> {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any).expose_headers([header::HeaderName::from_static("x-render-ms")]);
    if origin == "*" {
        return Ok(layer.allow_origin(Any));
    }
    let value = HeaderValue::from_str(origin).map_err(|_| ServeError::Cors(origin.into()))?;
    Ok(layer.allow_origin(AllowOrigin::exact(value)))
}

pub fn router(state: AppState, cors: Option<&str>) -> Result<Router, ServeError> {
    let app = Router::new()
        .route("/api/scenes", get(list_scenes))
        .route("/api/scenes/{id}/lights", get(lights))
        .route("/api/scenes/{id}/render", post(render_scene))
        .with_state(state);
    Ok(match cors {
        Some(origin) => app.layer(cors_layer(origin)?),
        None => app,
    })
}

/// Loads scenes in the background, serves until the process ends, and
/// rescans the directory every `reload_secs`.
pub async fn serve(cfg: ServerConfig) -> Result<(), ServeError> {
    let state = AppState::new(cfg.max_concurrent);
    for (id, _) in state.pending_files(&cfg.scenes)? {
        state.mark_loading(&id);
    }
    let app = router(state.clone(), cfg.cors.as_deref())?;
    let addr: SocketAddr = format!("{}:{}", cfg.bind, cfg.port).parse().map_err(|_| ServeError::Bind(format!("{}:{}", cfg.bind, cfg.port)))?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| ServeError::Io { path: addr.to_string(), source })?;
    log::info!("serving {} on http://{addr}", cfg.scenes.display());

    let dir = cfg.scenes.clone();
    let period = cfg.reload_secs;
    tokio::spawn(async move {
        loop {
            let (s, d) = (state.clone(), dir.clone());
            match tokio::task::spawn_blocking(move || s.rescan(&d)).await {
                Ok(Err(e)) => log::warn!("rescan failed: {e}"),
                Err(e) => log::warn!("rescan task failed: {e}"),
                Ok(Ok(_)) => {}
            }
            if period == 0 {
                break;
            }
            tokio::time::sleep(Duration::from_secs(period)).await;
        }
    });
    axum::serve(listener, app).await.map_err(|source| ServeError::Io { path: addr.to_string(), source })
}

/// Blocking entry point for command-line use.
pub fn run(cfg: ServerConfig) -> Result<(), ServeError> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| ServeError::Io { path: "tokio runtime".into(), source })?;
    rt.block_on(serve(cfg))
}
