//! Unit directions, camera-to-world rotations and the 4-band real
//! spherical-harmonics encoding used to condition the appearance network.
//!
//! Camera-local frames follow the OpenGL convention: +x right, +y up and
//! +z pointing back toward the viewer, so the frontal (camera-mounted)
//! flash is `(0, 0, 1)`.

use std::path::Path;

use nalgebra::{Matrix3, RealField, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Inputs whose norm is within this band of 1 are renormalized silently.
pub const RENORMALIZE_BAND: f64 = 1e-3;

/// Number of coefficients in the 4-band encoding.
pub const SH_COEFFS: usize = 16;

/// Band-0 constant, `1 / (2 sqrt(pi))`.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2_XY: f64 = 1.092_548_430_592_079_2;
const SH_C2_ZZ: f64 = 0.315_391_565_252_520_05;
const SH_C2_XX: f64 = 0.546_274_215_296_039_6;
const SH_C3_0: f64 = 0.590_043_589_926_643_5;
const SH_C3_1: f64 = 2.890_611_442_640_554;
const SH_C3_2: f64 = 0.457_045_799_464_465_8;
const SH_C3_3: f64 = 0.373_176_332_590_115_4;
const SH_C3_4: f64 = 1.445_305_721_320_277;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DirError {
    #[error("invalid direction {v:?}: {reason}")]
    InvalidDirection { v: [f64; 3], reason: &'static str },
    #[error("frame mismatch: expected {expected:?}, found {found:?}")]
    FrameMismatch { expected: Frame, found: Frame },
    #[error("matrix is not a proper rotation (orthogonality error {ortho:.3e}, det {det:.6})")]
    InvalidRotation { ortho: f64, det: f64 },
    #[error("direction set: {0}")]
    DirectionSet(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    #[serde(rename = "camera")]
    CameraLocal,
    #[serde(rename = "world")]
    World,
}

/// A unit 3-vector tagged with the frame it is expressed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    v: [f64; 3],
    frame: Frame,
}

impl Direction {
    pub fn new(v: [f64; 3], frame: Frame) -> Result<Self, DirError> {
        if v.iter().any(|c| !c.is_finite()) {
            return Err(DirError::InvalidDirection { v, reason: "non-finite component" });
        }
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if (norm - 1.0).abs() > RENORMALIZE_BAND {
            return Err(DirError::InvalidDirection { v, reason: "not unit length" });
        }
        Ok(Self { v: [v[0] / norm, v[1] / norm, v[2] / norm], frame })
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn normalized(v: [f64; 3], frame: Frame) -> Result<Self, DirError> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(DirError::InvalidDirection { v, reason: "zero or non-finite vector" });
        }
        Self::new([v[0] / norm, v[1] / norm, v[2] / norm], frame)
    }

    pub fn camera(v: [f64; 3]) -> Result<Self, DirError> {
        Self::new(v, Frame::CameraLocal)
    }

    pub fn world(v: [f64; 3]) -> Result<Self, DirError> {
        Self::new(v, Frame::World)
    }

    pub fn v(&self) -> [f64; 3] {
        self.v
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.v[0] * other.v[0] + self.v[1] * other.v[1] + self.v[2] * other.v[2]
    }

    /// Angle to another direction in degrees, ignoring frames.
    pub fn angle_deg(&self, other: &Direction) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

/// A proper rotation matrix (row-major).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3 {
    m: [[f64; 3]; 3],
}

impl Rotation3 {
    pub const IDENTITY: Rotation3 = Rotation3 { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self, DirError> {
        let mat = Matrix3::from_fn(|r, c| m[r][c]);
        let ortho = (mat.transpose() * mat - Matrix3::identity()).abs().max();
        let det = mat.determinant();
        if !(ortho <= 1e-5) || !((det - 1.0).abs() <= 1e-5) {
            return Err(DirError::InvalidRotation { ortho, det });
        }
        Ok(Self { m })
    }

    pub fn from_axis_angle(axis: [f64; 3], angle_rad: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(Vector3::from(axis));
        let r = nalgebra::Rotation3::from_axis_angle(&axis, angle_rad);
        Self::from_matrix(r.matrix())
    }

    pub(crate) fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self { m: [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]] }
    }

    /// Builds the camera-to-world rotation of a camera at `eye` looking at `target`.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self, DirError> {
        let back = Vector3::from(eye) - Vector3::from(target);
        let up = Vector3::from(up);
        let z = back.try_normalize(1e-12).ok_or(DirError::InvalidDirection { v: eye, reason: "eye equals target" })?;
        let x = up.cross(&z).try_normalize(1e-12).ok_or(DirError::InvalidDirection { v: up.into(), reason: "up parallel to view axis" })?;
        let y = z.cross(&x);
        Ok(Self::from_matrix(&Matrix3::from_columns(&[x, y, z])))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    pub fn transpose(&self) -> Self {
        Self::from_matrix(&self.matrix().transpose())
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

/// Transports a camera-local direction to world space with a camera-to-world rotation.
pub fn to_world(l: &Direction, r: &Rotation3) -> Result<Direction, DirError> {
    if l.frame != Frame::CameraLocal {
        return Err(DirError::FrameMismatch { expected: Frame::CameraLocal, found: l.frame });
    }
    Direction::normalized(r.apply(l.v), Frame::World)
}

/// The 16 real SH basis values of a direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShEncoding {
    pub coeffs: [f64; SH_COEFFS],
}

impl ShEncoding {
    /// The reserved encoding of the capture illumination. Every real
    /// direction has a non-zero band-0 term, so all-zero never collides.
    pub const UNLIT: ShEncoding = ShEncoding { coeffs: [0.0; SH_COEFFS] };

    pub fn to_f32(&self) -> [f32; SH_COEFFS] {
        self.coeffs.map(|c| c as f32)
    }
}

/// Index of coefficient `(l, m)` in the encoding.
pub const fn sh_index(l: usize, m: isize) -> usize {
    (l * l) as isize as usize + (l as isize + m) as usize
}

pub fn sh_encode(d: &Direction) -> ShEncoding {
    ShEncoding { coeffs: sh_basis(d.v) }
}

/// Validates and encodes a raw vector.
pub fn sh_encode_vec(v: [f64; 3]) -> Result<ShEncoding, DirError> {
    Direction::new(v, Frame::World).map(|d| sh_encode(&d))
}

/// Real SH basis without Condon-Shortley phase, ordered `(l, m)` with m ascending.
pub fn sh_basis<T: RealField + Copy>(d: [T; 3]) -> [T; SH_COEFFS] {
    let c = |x: f64| nalgebra::convert::<f64, T>(x);
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let one = T::one();
    let three = c(3.0);
    let five = c(5.0);
    [
        c(SH_C0),
        c(SH_C1) * y,
        c(SH_C1) * z,
        c(SH_C1) * x,
        c(SH_C2_XY) * x * y,
        c(SH_C2_XY) * y * z,
        c(SH_C2_ZZ) * (three * zz - one),
        c(SH_C2_XY) * x * z,
        c(SH_C2_XX) * (xx - yy),
        c(SH_C3_0) * y * (three * xx - yy),
        c(SH_C3_1) * x * y * z,
        c(SH_C3_2) * y * (five * zz - one),
        c(SH_C3_3) * z * (five * zz - three),
        c(SH_C3_2) * x * (five * zz - one),
        c(SH_C3_4) * z * (xx - yy),
        c(SH_C3_0) * x * (xx - three * yy),
    ]
}

/// Partial derivatives of each basis polynomial with respect to (x, y, z),
/// evaluated without renormalization.
pub fn sh_basis_jacobian<T: RealField + Copy>(d: [T; 3]) -> [[T; 3]; SH_COEFFS] {
    let c = |x: f64| nalgebra::convert::<f64, T>(x);
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let zero = T::zero();
    let one = T::one();
    let k1 = c(SH_C1);
    let k2 = c(SH_C2_XY);
    let k30 = c(SH_C3_0);
    let k31 = c(SH_C3_1);
    let k32 = c(SH_C3_2);
    let k33 = c(SH_C3_3);
    let k34 = c(SH_C3_4);
    let two = c(2.0);
    let three = c(3.0);
    let five = c(5.0);
    let six = c(6.0);
    let ten = c(10.0);
    [
        [zero, zero, zero],
        [zero, k1, zero],
        [zero, zero, k1],
        [k1, zero, zero],
        [k2 * y, k2 * x, zero],
        [zero, k2 * z, k2 * y],
        [zero, zero, c(SH_C2_ZZ) * six * z],
        [k2 * z, zero, k2 * x],
        [c(SH_C2_XX) * two * x, -c(SH_C2_XX) * two * y, zero],
        [k30 * six * x * y, k30 * (three * xx - three * yy), zero],
        [k31 * y * z, k31 * x * z, k31 * x * y],
        [zero, k32 * (five * zz - one), k32 * ten * y * z],
        [zero, zero, k33 * (c(15.0) * zz - three)],
        [k32 * (five * zz - one), zero, k32 * ten * x * z],
        [k34 * two * x * z, -k34 * two * y * z, k34 * (xx - yy)],
        [k30 * (three * xx - three * yy), -k30 * six * x * y, zero],
    ]
}

/// On-disk list of light directions used for augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    pub frame: Frame,
    pub directions: Vec<[f64; 3]>,
}

const DEFAULT_DIRECTIONS_JSON: &str = include_str!("../assets/directions_default.json");

impl DirectionSet {
    /// The shipped 18-direction rear-hemisphere grid.
    pub fn default_set() -> DirectionSet {
        serde_json::from_str(DEFAULT_DIRECTIONS_JSON).expect("bundled direction set parses")
    }

    pub fn default_json() -> &'static str {
        DEFAULT_DIRECTIONS_JSON
    }

    pub fn from_directions(dirs: &[Direction]) -> Result<Self, DirError> {
        let frame = dirs.first().map(|d| d.frame).unwrap_or(Frame::CameraLocal);
        if dirs.iter().any(|d| d.frame != frame) {
            return Err(DirError::DirectionSet("mixed frames".into()));
        }
        Ok(Self { frame, directions: dirs.iter().map(|d| d.v).collect() })
    }

    pub fn directions(&self) -> Result<Vec<Direction>, DirError> {
        self.directions.iter().map(|v| Direction::new(*v, self.frame)).collect()
    }

    pub fn from_json(s: &str) -> Result<Self, DirError> {
        let set: DirectionSet = serde_json::from_str(s).map_err(|e| DirError::DirectionSet(e.to_string()))?;
        set.directions()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("direction set serializes")
    }

    pub fn load(path: &Path) -> Result<Self, DirError> {
        let s = std::fs::read_to_string(path).map_err(|e| DirError::DirectionSet(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<(), DirError> {
        std::fs::write(path, self.to_json()).map_err(|e| DirError::DirectionSet(format!("{}: {e}", path.display())))
    }
}
