//! Multi-view captures, the relighter abstraction, synthetic scene
//! generation, and augmentation of a single-light capture into a
//! multi-light dataset.

mod augment;
mod dataset;
mod relighter;
mod synth;

use thiserror::Error;

pub use augment::{augment, AugmentOptions};
pub use dataset::{read_ply, write_ply, MultiLightDataset, MultiViewDataset, SceneInfo, View, MANIFEST_VERSION};
pub use relighter::{relight, RelightRequest, RelighterKind, RelighterSpec, ViewGeometry, FLASH_OFFSET};
pub use synth::{synth_scene, Preset, SynthOptions, SynthOutput};

#[derive(Debug, Error)]
pub enum RelightError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Image(#[from] crate::imageio::ImageIoError),
    #[error(transparent)]
    Camera(#[from] crate::camera::CameraError),
    #[error(transparent)]
    Dir(#[from] crate::dirmath::DirError),
    #[error(transparent)]
    Color(#[from] crate::colorlab::ColorError),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("relighter needs {0}")]
    MissingGeometry(&'static str),
    #[error("invalid relighter: {0}")]
    Spec(String),
    #[error("remote relighter: {0}")]
    Remote(String),
    #[error("view {view}, light {light}: {source}")]
    At { view: String, light: usize, source: Box<RelightError> },
    #[error("unknown preset {0:?} (expected cornell, plane or spheres)")]
    UnknownPreset(String),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> RelightError + '_ {
    move |source| RelightError::Io { path: path.display().to_string(), source }
}

pub(crate) fn json_err(path: &std::path::Path) -> impl FnOnce(serde_json::Error) -> RelightError + '_ {
    move |source| RelightError::Json { path: path.display().to_string(), source }
}
