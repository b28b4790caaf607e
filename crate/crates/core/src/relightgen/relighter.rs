//! Image relighters: identity, an analytic ratio oracle driven by depth and
//! normals, and a client for a remote relighting service.

use std::collections::BTreeMap;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use url::Url;

use super::RelightError;
use crate::camera::Intrinsics;
use crate::colorlab::ImageRGB;
use crate::dirmath::{Direction, Frame};
use crate::imageio::{self, DepthMap, NormalMap};

/// Virtual flash distance from the camera center, in scene radii.
pub const FLASH_OFFSET: f64 = 0.25;
const RATIO_EPS: f64 = 1e-3;
const DEFAULT_AMBIENT: f64 = 0.15;
const DEFAULT_TIMEOUT_S: f64 = 120.0;

#[derive(Debug, Clone, PartialEq)]
pub enum RelighterKind {
    Identity,
    RatioOracle,
    Remote(Url),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelighterSpec {
    pub kind: RelighterKind,
    pub options: BTreeMap<String, String>,
}

impl RelighterSpec {
    pub fn identity() -> Self {
        Self { kind: RelighterKind::Identity, options: BTreeMap::new() }
    }

    pub fn oracle() -> Self {
        Self { kind: RelighterKind::RatioOracle, options: BTreeMap::new() }
    }

    pub fn remote(url: &str) -> Result<Self, RelightError> {
        let parsed = Url::parse(url).map_err(|e| RelightError::Spec(format!("{url:?}: {e}")))?;
        if !matches!(parsed.scheme(), "http" | "https") || parsed.host_str().is_none() {
            return Err(RelightError::Spec(format!("{url:?}: expected an http(s) URL")));
        }
        Ok(Self { kind: RelighterKind::Remote(parsed), options: BTreeMap::new() })
    }

    /// `identity`, `oracle`, or an http(s) URL.
    pub fn parse(name: &str) -> Result<Self, RelightError> {
        match name {
            "identity" => Ok(Self::identity()),
            "oracle" => Ok(Self::oracle()),
            url if url.contains("://") => Self::remote(url),
            other => Err(RelightError::Spec(format!("unknown relighter {other:?} (expected identity, oracle or a URL)"))),
        }
    }

    pub fn with_option(mut self, key: &str, value: impl ToString) -> Self {
        self.options.insert(key.into(), value.to_string());
        self
    }

    pub fn name(&self) -> String {
        match &self.kind {
            RelighterKind::Identity => "identity".into(),
            RelighterKind::RatioOracle => "oracle".into(),
            RelighterKind::Remote(u) => u.to_string(),
        }
    }

    fn option_f64(&self, key: &str, default: f64) -> Result<f64, RelightError> {
        match self.options.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| RelightError::Spec(format!("option {key}={v:?} is not a number"))),
        }
    }
}

/// Camera-frame geometry the ratio oracle needs beyond depth and normals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewGeometry {
    pub intrinsics: Intrinsics,
    /// Scene center in the camera frame.
    pub center_camera: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RelightRequest<'a> {
    pub image: &'a ImageRGB,
    pub depth: Option<&'a DepthMap>,
    /// Camera-frame unit normals.
    pub normals: Option<&'a NormalMap>,
    pub geometry: Option<ViewGeometry>,
    pub target: &'a Direction,
    pub source: &'a Direction,
}

pub fn relight(spec: &RelighterSpec, req: &RelightRequest<'_>) -> Result<ImageRGB, RelightError> {
    for d in [req.target, req.source] {
        if d.frame() != Frame::CameraLocal {
            return Err(crate::dirmath::DirError::FrameMismatch { expected: Frame::CameraLocal, found: d.frame() }.into());
        }
    }
    match &spec.kind {
        RelighterKind::Identity => Ok(req.image.clone()),
        RelighterKind::RatioOracle => ratio_oracle(req, spec.option_f64("ambient", DEFAULT_AMBIENT)?),
        RelighterKind::Remote(url) => remote(url, req, spec.option_f64("timeout_s", DEFAULT_TIMEOUT_S)?),
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm2(a: [f64; 3]) -> f64 {
    a[0] * a[0] + a[1] * a[1] + a[2] * a[2]
}

/// Shading factor of a camera-mounted point flash at `light`: ambient plus
/// clamped Lambertian with inverse-square falloff normalized at `center`.
pub(crate) fn flash_shading(normal: [f64; 3], point: [f64; 3], light: [f64; 3], center: [f64; 3], ambient: f64) -> f64 {
    let to_light = sub(light, point);
    let d2 = norm2(to_light).max(1e-12);
    let ndl = (normal[0] * to_light[0] + normal[1] * to_light[1] + normal[2] * to_light[2]) / d2.sqrt();
    let falloff = norm2(sub(light, center)) / d2;
    ambient + (1.0 - ambient) * (ndl.max(0.0) * falloff).min(1.0)
}

fn ratio_oracle(req: &RelightRequest<'_>, ambient: f64) -> Result<ImageRGB, RelightError> {
    let depth = req.depth.ok_or(RelightError::MissingGeometry("a depth map"))?;
    let normals = req.normals.ok_or(RelightError::MissingGeometry("a normal map"))?;
    let geo = req.geometry.ok_or(RelightError::MissingGeometry("camera intrinsics and scene placement"))?;
    let (w, h) = (req.image.width(), req.image.height());
    if depth.width != w || depth.height != h || normals.width != w || normals.height != h {
        return Err(RelightError::Dataset("geometry buffers do not match the image size".into()));
    }
    let k = geo.intrinsics;
    let offset = FLASH_OFFSET * geo.radius;
    let light_t = req.target.v().map(|c| c * offset);
    let light_s = req.source.v().map(|c| c * offset);
    let src = req.image.data();
    let mut out = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = depth.data[i] as f64;
            let n = [0, 1, 2].map(|c| normals.data[i * 3 + c] as f64);
            if z <= 0.0 || norm2(n) < 0.25 {
                continue;
            }
            // Camera frame: x right, y up, looking down -z.
            let p = [(x as f64 + 0.5 - k.cx) / k.fx * z, -(y as f64 + 0.5 - k.cy) / k.fy * z, -z];
            let st = flash_shading(n, p, light_t, geo.center_camera, ambient);
            let ss = flash_shading(n, p, light_s, geo.center_camera, ambient);
            let ratio = st / ss.max(RATIO_EPS);
            for c in 0..3 {
                out[i * 3 + c] = (src[i * 3 + c] as f64 * ratio) as f32;
            }
        }
    }
    Ok(ImageRGB::new(w, h, out)?)
}

#[derive(Serialize)]
struct WireRequest {
    image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<String>,
    target_dir: [f64; 3],
    source_dir: [f64; 3],
}

#[derive(Deserialize)]
struct WireResponse {
    image: String,
}

#[derive(Deserialize)]
struct WireError {
    error: String,
}

fn endpoint(url: &Url) -> Url {
    if url.path().trim_end_matches('/').ends_with("/relight") {
        return url.clone();
    }
    let mut u = url.clone();
    let path = format!("{}/relight", u.path().trim_end_matches('/'));
    u.set_path(&path);
    u
}

fn remote(url: &Url, req: &RelightRequest<'_>, timeout_s: f64) -> Result<ImageRGB, RelightError> {
    let body = WireRequest {
        image: B64.encode(imageio::encode_png(req.image)),
        depth: req.depth.map(|d| B64.encode(imageio::encode_depth_png(d))),
        target_dir: req.target.v(),
        source_dir: req.source.v(),
    };
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs_f64(timeout_s))
        .build()
        .map_err(|e| RelightError::Remote(e.to_string()))?;
    let target = endpoint(url);
    let resp = client.post(target.clone()).json(&body).send().map_err(|e| RelightError::Remote(format!("{target}: {e}")))?;
    let status = resp.status();
    let bytes = resp.bytes().map_err(|e| RelightError::Remote(format!("{target}: {e}")))?;
    if !status.is_success() {
        let detail = serde_json::from_slice::<WireError>(&bytes).map(|e| e.error).unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
        return Err(RelightError::Remote(format!("{target}: HTTP {status}: {detail}")));
    }
    let parsed: WireResponse = serde_json::from_slice(&bytes).map_err(|e| RelightError::Remote(format!("{target}: bad response body: {e}")))?;
    let png = B64.decode(parsed.image.as_bytes()).map_err(|e| RelightError::Remote(format!("{target}: bad base64 image: {e}")))?;
    let img = imageio::decode_png(&png)?;
    if img.width() != req.image.width() || img.height() != req.image.height() {
        return Err(RelightError::Remote(format!("{target}: returned {}x{} image for a {}x{} input", img.width(), img.height(), req.image.width(), req.image.height())));
    }
    Ok(img)
}
