//! Gaussian splats with an MLP appearance model conditioned on view
//! direction, light direction and a per-image latent, plus a differentiable
//! front-to-back rasterizer.

mod mlp;
mod raster;
mod real;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraPose;
use crate::colorlab::ImageRGB;
use crate::dirmath::{sh_basis, DirError, Direction, Frame, SH_COEFFS};

pub use mlp::{mlp_forward, AppearanceMlp, Dense, MlpBatch, MLP_INPUT, MLP_OUTPUT, MLP_WIDTH, PER_SPLAT_INPUT};
pub use raster::{render_field, render_field_backprop, render_field_with_grads, Frame as RasterFrame, NEAR_DEPTH};
pub use real::Real;

pub const FEATURE_DIM: usize = 32;
pub const ENC_DIM: usize = SH_COEFFS;
pub const LATENT_DIM: usize = 128;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("{name} has length {got}, expected {expected}")]
    Dimension { name: &'static str, expected: usize, got: usize },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("unknown latent view id {0:?}")]
    UnknownLatent(String),
    #[error(transparent)]
    Dir(#[from] DirError),
}

/// Structure-of-arrays splat storage. The same layout holds gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplatCloud<T> {
    pub positions: Vec<[T; 3]>,
    /// `(w, x, y, z)`; normalized when rendering.
    pub rotations: Vec<[T; 4]>,
    pub log_scales: Vec<[T; 3]>,
    pub logit_opacities: Vec<T>,
    pub features: Vec<[T; FEATURE_DIM]>,
}

impl<T: Real> SplatCloud<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[T::zero(); 3]; n],
            rotations: vec![[T::zero(); 4]; n],
            log_scales: vec![[T::zero(); 3]; n],
            logit_opacities: vec![T::zero(); n],
            features: vec![[T::zero(); FEATURE_DIM]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: [T; 3], rotation: [T; 4], log_scale: [T; 3], logit_opacity: T, feature: [T; FEATURE_DIM]) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.logit_opacities.push(logit_opacity);
        self.features.push(feature);
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let n = self.len();
        if self.rotations.len() != n || self.log_scales.len() != n || self.logit_opacities.len() != n || self.features.len() != n {
            return Err(FieldError::InvalidScene("splat arrays differ in length".into()));
        }
        let finite = self.positions.iter().flatten().chain(self.rotations.iter().flatten()).chain(self.log_scales.iter().flatten())
            .chain(&self.logit_opacities)
            .chain(self.features.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(FieldError::InvalidScene("non-finite splat parameter".into()));
        }
        if self.rotations.iter().any(|q| q.iter().map(|c| *c * *c).fold(T::zero(), |a, b| a + b) < T::lit(1e-12)) {
            return Err(FieldError::InvalidScene("zero quaternion".into()));
        }
        Ok(())
    }

    /// Keeps only the splats whose index satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let flags: Vec<bool> = (0..self.len()).map(&mut keep).collect();
        retain_flagged(&mut self.positions, &flags);
        retain_flagged(&mut self.rotations, &flags);
        retain_flagged(&mut self.log_scales, &flags);
        retain_flagged(&mut self.logit_opacities, &flags);
        retain_flagged(&mut self.features, &flags);
    }

    pub fn cast<U: Real>(&self) -> SplatCloud<U> {
        let c = |v: &T| U::lit(v.to_f64());
        SplatCloud {
            positions: self.positions.iter().map(|p| p.map(|v| c(&v))).collect(),
            rotations: self.rotations.iter().map(|p| p.map(|v| c(&v))).collect(),
            log_scales: self.log_scales.iter().map(|p| p.map(|v| c(&v))).collect(),
            logit_opacities: self.logit_opacities.iter().map(c).collect(),
            features: self.features.iter().map(|p| p.map(|v| c(&v))).collect(),
        }
    }

    pub fn opacity(&self, i: usize) -> T {
        T::one() / (T::one() + (-self.logit_opacities[i]).exp())
    }
}

fn retain_flagged<V>(v: &mut Vec<V>, flags: &[bool]) {
    let mut it = flags.iter();
    v.retain(|_| *it.next().expect("flag per element"));
}

/// Borrowed view of everything the rasterizer needs from a scene.
#[derive(Debug, Clone, Copy)]
pub struct FieldRef<'a, T> {
    pub splats: &'a SplatCloud<T>,
    pub mlp: &'a AppearanceMlp<T>,
    pub background: [T; 3],
}

/// Gradients of a scalar loss with respect to every trainable input.
#[derive(Debug, Clone)]
pub struct FieldGrads<T> {
    pub splats: SplatCloud<T>,
    pub mlp: AppearanceMlp<T>,
    pub latent: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxLatent {
    pub view_id: String,
    pub a: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub radius: f64,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub light_dirs_hash: String,
    /// Training light directions in the camera frame, in directions.json order.
    #[serde(default)]
    pub light_dirs: Vec<[f64; 3]>,
    #[serde(default)]
    pub center: [f64; 3],
    /// Suggested viewer camera `(position, target)`.
    #[serde(default)]
    pub default_camera: Option<([f64; 3], [f64; 3])>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatScene {
    pub splats: SplatCloud<f32>,
    pub mlp: AppearanceMlp<f32>,
    pub latents: Vec<AuxLatent>,
    pub background: [f32; 3],
    pub metadata: SceneMetadata,
}

impl SplatScene {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.splats.is_empty() {
            return Err(FieldError::InvalidScene("scene has no splats".into()));
        }
        self.splats.validate()?;
        if !self.mlp.is_finite() {
            return Err(FieldError::InvalidScene("non-finite MLP parameter".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.latents {
            if l.a.len() != LATENT_DIM {
                return Err(FieldError::Dimension { name: "latent", expected: LATENT_DIM, got: l.a.len() });
            }
            if !l.a.iter().all(|v| v.is_finite()) {
                return Err(FieldError::InvalidScene(format!("non-finite latent for {}", l.view_id)));
            }
            if !seen.insert(l.view_id.as_str()) {
                return Err(FieldError::InvalidScene(format!("duplicate latent view id {}", l.view_id)));
            }
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(FieldError::InvalidScene("background outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn field(&self) -> FieldRef<'_, f32> {
        FieldRef { splats: &self.splats, mlp: &self.mlp, background: self.background }
    }

    pub fn latent(&self, view_id: &str) -> Result<&[f32], FieldError> {
        self.latents.iter().find(|l| l.view_id == view_id).map(|l| l.a.as_slice()).ok_or_else(|| FieldError::UnknownLatent(view_id.into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ImageRGB,
    pub transmittance: Vec<f32>,
    /// Sum of compositing weights per pixel.
    pub weight_sum: Vec<f32>,
    pub contributors: Vec<u32>,
}

/// SH encoding of a world-frame light, or the unlit token when `None`.
pub fn light_encoding<T: Real>(light_world: Option<&Direction>) -> Result<[T; ENC_DIM], FieldError> {
    match light_world {
        None => Ok([T::zero(); ENC_DIM]),
        Some(d) if d.frame() != Frame::World => Err(DirError::FrameMismatch { expected: Frame::World, found: d.frame() }.into()),
        Some(d) => Ok(sh_basis(d.v()).map(T::lit)),
    }
}

fn check_latent(latent: &[f32]) -> Result<(), FieldError> {
    if latent.len() != LATENT_DIM {
        return Err(FieldError::Dimension { name: "latent", expected: LATENT_DIM, got: latent.len() });
    }
    Ok(())
}

fn to_output(frame: RasterFrame<f32>) -> RenderOutput {
    let color = ImageRGB::new(frame.width, frame.height, frame.color).expect("frame has pixels");
    RenderOutput { color, transmittance: frame.transmittance, weight_sum: frame.weight_sum, contributors: frame.contributors }
}

/// Renders with a world-frame light; `None` renders with the unlit token.
pub fn render(scene: &SplatScene, cam: &CameraPose, light_world: Option<&Direction>, latent: &[f32]) -> Result<RenderOutput, FieldError> {
    check_latent(latent)?;
    let light = light_encoding::<f32>(light_world)?;
    Ok(to_output(render_field(scene.field(), cam, &light, latent)))
}

/// Renders and backpropagates `adjoint` (H x W x 3, gradient of the loss
/// with respect to the rendered color).
pub fn render_with_grads(
    scene: &SplatScene,
    cam: &CameraPose,
    light_world: Option<&Direction>,
    latent: &[f32],
    adjoint: &[f32],
) -> Result<(RenderOutput, FieldGrads<f32>), FieldError> {
    check_latent(latent)?;
    let expected = cam.width() * cam.height() * 3;
    if adjoint.len() != expected {
        return Err(FieldError::Dimension { name: "adjoint", expected, got: adjoint.len() });
    }
    let light = light_encoding::<f32>(light_world)?;
    let (frame, grads) = render_field_with_grads(scene.field(), cam, &light, latent, adjoint);
    Ok((to_output(frame), grads))
}
