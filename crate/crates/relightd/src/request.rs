//! Render request parsing with field-level validation messages.

use serde::Deserialize;
use serde_json::Value;

use relight_core::camera::CameraPose;
use relight_core::dirmath::{to_world, Direction, Frame};

pub const MIN_SIZE: usize = 16;
pub const MAX_SIZE: usize = 1024;
pub const FOV_RANGE: (f64, f64) = (10.0, 140.0);

#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightFrame {
    World,
    Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LatentChoice {
    Mean,
    View(String),
}

#[derive(Debug, Clone)]
pub struct RenderRequest {
    pub camera: CameraPose,
    /// World-frame light, or `None` for the unlit token.
    pub light_world: Option<Direction>,
    pub latent: LatentChoice,
}

fn vec3(v: &Value, field: &str) -> Result<[f64; 3], FieldError> {
    let arr = v.as_array().filter(|a| a.len() == 3).ok_or_else(|| FieldError::new(field, "must be an array of 3 numbers"))?;
    let mut out = [0.0; 3];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = x.as_f64().filter(|f| f.is_finite()).ok_or_else(|| FieldError::new(field, "must contain finite numbers"))?;
    }
    Ok(out)
}

fn size(cam: &Value, field: &str) -> Result<usize, FieldError> {
    let n = cam.get(field).ok_or_else(|| FieldError::new(field, "is required"))?;
    let n = n.as_u64().ok_or_else(|| FieldError::new(field, "must be a positive integer"))? as usize;
    if !(MIN_SIZE..=MAX_SIZE).contains(&n) {
        return Err(FieldError::new(field, format!("must be between {MIN_SIZE} and {MAX_SIZE}, got {n}")));
    }
    Ok(n)
}

/// Parses and validates a request body. Light directions are normalized;
/// camera-frame lights are moved to world space with the request camera.
pub fn parse(body: &[u8]) -> Result<RenderRequest, FieldError> {
    let root: Value = serde_json::from_slice(body).map_err(|e| FieldError::new("body", format!("invalid JSON: {e}")))?;
    let cam = root.get("camera").filter(|c| c.is_object()).ok_or_else(|| FieldError::new("camera", "is required and must be an object"))?;
    let field = |name: &str| cam.get(name).ok_or_else(|| FieldError::new(name, "is required"));
    let position = vec3(field("position")?, "position")?;
    let target = vec3(field("target")?, "target")?;
    let up = match cam.get("up") {
        Some(v) => vec3(v, "up")?,
        None => [0.0, 1.0, 0.0],
    };
    let fov = field("fov_deg")?.as_f64().ok_or_else(|| FieldError::new("fov_deg", "must be a number"))?;
    if !(fov > FOV_RANGE.0 && fov < FOV_RANGE.1) {
        return Err(FieldError::new("fov_deg", format!("must be inside ({}, {}), got {fov}", FOV_RANGE.0, FOV_RANGE.1)));
    }
    let width = size(cam, "width")?;
    let height = size(cam, "height")?;
    let camera = CameraPose::look_at(position, target, up, fov, width, height).map_err(|e| FieldError::new("up", format!("degenerate camera: {e}")))?;

    let frame = match root.get("light_frame") {
        None | Some(Value::Null) => LightFrame::World,
        Some(v) => LightFrame::deserialize(v).map_err(|_| FieldError::new("light_frame", "must be \"world\" or \"camera\""))?,
    };
    let light_world = match root.get("light_dir") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let d = vec3(v, "light_dir")?;
            let local = match frame {
                LightFrame::World => Frame::World,
                LightFrame::Camera => Frame::CameraLocal,
            };
            let dir = Direction::normalized(d, local).map_err(|e| FieldError::new("light_dir", e.to_string()))?;
            Some(match frame {
                LightFrame::World => dir,
                LightFrame::Camera => to_world(&dir, &camera.rotation).map_err(|e| FieldError::new("light_dir", e.to_string()))?,
            })
        }
    };

    let latent = match root.get("latent") {
        None | Some(Value::Null) => LatentChoice::Mean,
        Some(Value::String(s)) if s == "mean" => LatentChoice::Mean,
        Some(Value::String(s)) => LatentChoice::View(s.clone()),
        Some(_) => return Err(FieldError::new("latent", "must be \"mean\" or a training view id")),
    };
    Ok(RenderRequest { camera, light_world, latent })
}
