//! In-memory datasets and their directory layout:
//!
//! ```text
//! views/<id>.png      capture images
//! depth/<id>.png      optional 16-bit millimeter depth
//! normals/<id>.png    optional 16-bit camera-frame normals
//! poses.json          camera-to-world 3x4 + intrinsics per view
//! points.ply          sparse points (ASCII)
//! directions.json     camera-local light directions
//! relit/<id>_<k>.png  relit images
//! manifest.json       version, scene info, view order, progress
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, json_err, RelightError};
use crate::camera::{CameraPose, Intrinsics};
use crate::colorlab::ImageRGB;
use crate::dirmath::{to_world, Direction, DirectionSet};
use crate::imageio::{self, DepthMap, NormalMap};

pub const MANIFEST_VERSION: u32 = 1;

/// Scene placement shared by all views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub center: [f64; 3],
    pub radius: f64,
    /// Ambient fraction of the capture's shading, used by the ratio oracle.
    pub ambient: f64,
}

impl SceneInfo {
    /// Bounding sphere of the points (centroid, max distance).
    pub fn from_points(points: &[[f64; 3]], ambient: f64) -> Self {
        if points.is_empty() {
            return Self { center: [0.0; 3], radius: 1.0, ambient };
        }
        let n = points.len() as f64;
        let center = [0, 1, 2].map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n);
        let radius = points.iter().map(|p| dist(p, &center)).fold(0.0, f64::max).max(1e-6);
        Self { center, radius, ambient }
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub id: String,
    pub image: ImageRGB,
    pub depth: Option<DepthMap>,
    pub normals: Option<NormalMap>,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub views: Vec<View>,
    pub sfm_points: Vec<[f64; 3]>,
    pub scene: SceneInfo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLightDataset {
    pub base: MultiViewDataset,
    pub light_dirs_camera: Vec<Direction>,
    /// `relit[v][k]`: view `v` under light `k`.
    pub relit: Vec<Vec<ImageRGB>>,
}

#[derive(Serialize, Deserialize)]
struct PoseEntry {
    id: String,
    c2w: [[f64; 4]; 3],
    intrinsics: Intrinsics,
}

#[derive(Serialize, Deserialize)]
struct PosesFile {
    convention: String,
    views: Vec<PoseEntry>,
}

const POSE_CONVENTION: &str = "camera-to-world, x right, y up, camera looks down -z";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Manifest {
    pub version: u32,
    pub scene: Option<SceneInfo>,
    pub views: Vec<String>,
    #[serde(default)]
    pub lights: usize,
    #[serde(default)]
    pub relighter: Option<String>,
    /// Views whose relit stacks are complete on disk.
    #[serde(default)]
    pub completed: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, RelightError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(json_err(&path))?;
        if m.version != MANIFEST_VERSION {
            return Err(RelightError::Dataset(format!("manifest version {} (expected {MANIFEST_VERSION})", m.version)));
        }
        Ok(m)
    }

    /// Written to a temporary file and renamed so a crash never leaves a
    /// truncated manifest.
    pub fn save(&self, dir: &Path) -> Result<(), RelightError> {
        let path = dir.join("manifest.json");
        let tmp = dir.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(self).map_err(json_err(&path))?;
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

fn check_id(id: &str) -> Result<(), RelightError> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.') && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(RelightError::Dataset(format!("invalid view id {id:?}")))
    }
}

fn create_dir(path: &Path) -> Result<(), RelightError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

impl MultiViewDataset {
    pub fn validate(&self) -> Result<(), RelightError> {
        if self.views.is_empty() {
            return Err(RelightError::Dataset("no views".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.views {
            check_id(&v.id)?;
            if !seen.insert(v.id.as_str()) {
                return Err(RelightError::Dataset(format!("duplicate view id {}", v.id)));
            }
            let (w, h) = (v.pose.width(), v.pose.height());
            if v.image.width() != w || v.image.height() != h {
                return Err(RelightError::Dataset(format!("view {}: image {}x{} but intrinsics {w}x{h}", v.id, v.image.width(), v.image.height())));
            }
            if v.depth.as_ref().is_some_and(|d| d.width != w || d.height != h) {
                return Err(RelightError::Dataset(format!("view {}: depth size mismatch", v.id)));
            }
            if v.normals.as_ref().is_some_and(|n| n.width != w || n.height != h) {
                return Err(RelightError::Dataset(format!("view {}: normal map size mismatch", v.id)));
            }
        }
        Ok(())
    }

    pub fn view(&self, id: &str) -> Option<&View> {
        self.views.iter().find(|v| v.id == id)
    }

    fn manifest(&self) -> Manifest {
        Manifest { version: MANIFEST_VERSION, scene: Some(self.scene), views: self.views.iter().map(|v| v.id.clone()).collect(), lights: 0, relighter: None, completed: vec![] }
    }

    /// Writes everything but the manifest.
    pub(crate) fn write_files(&self, dir: &Path) -> Result<(), RelightError> {
        self.validate()?;
        create_dir(&dir.join("views"))?;
        let mut poses = PosesFile { convention: POSE_CONVENTION.into(), views: vec![] };
        for v in &self.views {
            imageio::save_rgb(&v.image, &dir.join("views").join(format!("{}.png", v.id)))?;
            if let Some(d) = &v.depth {
                create_dir(&dir.join("depth"))?;
                imageio::save_depth(d, &dir.join("depth").join(format!("{}.png", v.id)))?;
            }
            if let Some(n) = &v.normals {
                create_dir(&dir.join("normals"))?;
                imageio::save_normals(n, &dir.join("normals").join(format!("{}.png", v.id)))?;
            }
            poses.views.push(PoseEntry { id: v.id.clone(), c2w: v.pose.to_3x4(), intrinsics: v.pose.intrinsics });
        }
        let path = dir.join("poses.json");
        fs::write(&path, serde_json::to_string_pretty(&poses).map_err(json_err(&path))?).map_err(io_err(&path))?;
        write_ply(&self.sfm_points, &dir.join("points.ply"))
    }

    pub fn save(&self, dir: &Path) -> Result<(), RelightError> {
        create_dir(dir)?;
        self.write_files(dir)?;
        self.manifest().save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self, RelightError> {
        let manifest = Manifest::load(dir).ok();
        let path = dir.join("poses.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let poses: PosesFile = serde_json::from_str(&text).map_err(json_err(&path))?;
        let mut views = Vec::with_capacity(poses.views.len());
        for entry in poses.views {
            check_id(&entry.id)?;
            let pose = CameraPose::from_3x4(entry.c2w, entry.intrinsics)?;
            let image = imageio::load_rgb(&dir.join("views").join(format!("{}.png", entry.id)))?;
            let depth_path = dir.join("depth").join(format!("{}.png", entry.id));
            let depth = if depth_path.exists() { Some(imageio::load_depth(&depth_path)?) } else { None };
            let normal_path = dir.join("normals").join(format!("{}.png", entry.id));
            let normals = if normal_path.exists() { Some(imageio::load_normals(&normal_path)?) } else { None };
            views.push(View { id: entry.id, image, depth, normals, pose });
        }
        let ply = dir.join("points.ply");
        let sfm_points = if ply.exists() { read_ply(&ply)? } else { vec![] };
        let scene = manifest.and_then(|m| m.scene).unwrap_or_else(|| SceneInfo::from_points(&sfm_points, 0.15));
        let ds = Self { views, sfm_points, scene };
        ds.validate()?;
        Ok(ds)
    }
}

impl MultiLightDataset {
    pub fn validate(&self) -> Result<(), RelightError> {
        self.base.validate()?;
        if self.relit.len() != self.base.views.len() || self.relit.iter().any(|r| r.len() != self.light_dirs_camera.len()) {
            return Err(RelightError::Dataset("relit stack does not match views x lights".into()));
        }
        Ok(())
    }

    pub fn light_count(&self) -> usize {
        self.light_dirs_camera.len()
    }

    /// World-frame direction of light `k` for view `v`: `R_v l_k`.
    pub fn light_dir_world(&self, v: usize, k: usize) -> Direction {
        to_world(&self.light_dirs_camera[k], &self.base.views[v].pose.rotation).expect("camera-frame light set")
    }

    pub fn relit(&self, view_id: &str, k: usize) -> Option<&ImageRGB> {
        let v = self.base.views.iter().position(|v| v.id == view_id)?;
        self.relit.get(v)?.get(k)
    }

    pub fn save(&self, dir: &Path) -> Result<(), RelightError> {
        self.validate()?;
        create_dir(dir)?;
        self.base.write_files(dir)?;
        DirectionSet::from_directions(&self.light_dirs_camera)?.save(&dir.join("directions.json"))?;
        create_dir(&dir.join("relit"))?;
        for (v, stack) in self.base.views.iter().zip(&self.relit) {
            for (k, img) in stack.iter().enumerate() {
                imageio::save_rgb(img, &dir.join("relit").join(relit_name(&v.id, k)))?;
            }
        }
        let mut m = self.base.manifest();
        m.lights = self.light_count();
        m.completed = m.views.clone();
        m.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self, RelightError> {
        let base = MultiViewDataset::load(dir)?;
        let manifest = Manifest::load(dir)?;
        let light_dirs_camera = DirectionSet::load(&dir.join("directions.json"))?.directions()?;
        for v in &base.views {
            if !manifest.completed.contains(&v.id) {
                return Err(RelightError::Dataset(format!("view {} has no completed relit stack", v.id)));
            }
        }
        let mut relit = Vec::with_capacity(base.views.len());
        for v in &base.views {
            let stack = (0..light_dirs_camera.len())
                .map(|k| imageio::load_rgb(&dir.join("relit").join(relit_name(&v.id, k))))
                .collect::<Result<Vec<_>, _>>()?;
            relit.push(stack);
        }
        let ds = Self { base, light_dirs_camera, relit };
        ds.validate()?;
        Ok(ds)
    }
}

pub(crate) fn relit_name(id: &str, k: usize) -> String {
    format!("{id}_{k:02}.png")
}

pub fn write_ply(points: &[[f64; 3]], path: &Path) -> Result<(), RelightError> {
    let mut out = Vec::new();
    write!(out, "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n", points.len()).expect("write to Vec");
    for p in points {
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).expect("write to Vec");
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Reads vertex positions from an ASCII PLY; other vertex properties are
/// skipped.
pub fn read_ply(path: &Path) -> Result<Vec<[f64; 3]>, RelightError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |msg: &str| RelightError::Dataset(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = lines.next().ok_or_else(|| bad("unterminated header"))?.trim();
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err(bad("only ASCII PLY is supported")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", .., name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let idx = ["x", "y", "z"].map(|c| props.iter().position(|p| p == c));
    let [Some(ix), Some(iy), Some(iz)] = idx else {
        return Err(bad("vertex element lacks x/y/z"));
    };
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("fewer vertices than declared"))?;
        let vals: Vec<f64> = line.split_whitespace().map(|t| t.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad("bad vertex value"))?;
        if vals.len() < props.len() {
            return Err(bad("short vertex line"));
        }
        points.push([vals[ix], vals[iy], vals[iz]]);
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_round_trip_and_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ply");
        let pts = vec![[0.5, -1.25, 3.0], [1e-3, 2.0, -0.75]];
        write_ply(&pts, &path).unwrap();
        assert_eq!(read_ply(&path).unwrap(), pts);

        let with_color = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n1 2 3 255\n";
        fs::write(&path, with_color).unwrap();
        assert_eq!(read_ply(&path).unwrap(), vec![[1.0, 2.0, 3.0]]);
        fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(read_ply(&path).is_err());
    }

    #[test]
    fn scene_info_from_points() {
        let s = SceneInfo::from_points(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], 0.2);
        assert_eq!(s.center, [0.0; 3]);
        assert!((s.radius - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_unsafe_ids() {
        assert!(check_id("view_01").is_ok());
        assert!(check_id("../x").is_err());
        assert!(check_id("").is_err());
    }
}
