//! Gray-ball light probes: a simple Phong renderer and an L1 fit that
//! recovers the light direction together with the shading parameters.
//!
//! The probe frame matches the camera-local frame: +x right, +y up and +z
//! toward the viewer, so the view vector is `(0, 0, 1)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dirmath::{DirError, Direction, DirectionSet};
use crate::imageio::{self, ImageIoError};

pub const FIT_RESOLUTION: usize = 64;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe size must be at least 16, got {0}")]
    TooSmall(usize),
    #[error("probe must be square with {expected} pixels, got {got}")]
    BadShape { expected: usize, got: usize },
    #[error("degenerate probe: masked region is entirely zero")]
    Degenerate,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("target {index}: {source}")]
    Target { index: usize, source: Box<ProbeError> },
    #[error(transparent)]
    Dir(#[from] DirError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
}

/// Phong shading parameters of the gray ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightProbeModel {
    pub ambient: f64,
    pub albedo: f64,
    pub spec_intensity: f64,
    pub spec_hardness: f64,
    pub fresnel: f64,
}

impl LightProbeModel {
    pub fn validate(&self) -> Result<(), ProbeError> {
        let ok = [self.ambient, self.albedo, self.spec_intensity, self.spec_hardness, self.fresnel].iter().all(|v| v.is_finite())
            && self.ambient >= 0.0
            && self.albedo >= 0.0
            && self.spec_intensity >= 0.0
            && self.spec_hardness >= 1.0
            && (0.0..=1.0).contains(&self.fresnel);
        if ok {
            Ok(())
        } else {
            Err(ProbeError::InvalidModel(format!("{self:?}")))
        }
    }

    /// Unclamped intensity for a unit normal and light.
    fn shade(&self, n: [f64; 3], l: [f64; 3]) -> f64 {
        let ndl = n[0] * l[0] + n[1] * l[1] + n[2] * l[2];
        let rdv = 2.0 * ndl * n[2] - l[2];
        let fres = schlick(self.fresnel, n[2]);
        let spec = if rdv > 0.0 { rdv.powf(self.spec_hardness) } else { 0.0 };
        self.ambient + self.albedo * ndl.max(0.0) + fres * self.spec_intensity * spec
    }
}

fn schlick(f0: f64, ndv: f64) -> f64 {
    f0 + (1.0 - f0) * (1.0 - ndv.max(0.0)).powi(5)
}

/// A square grayscale probe with its inscribed-disk mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeImage {
    pub size: usize,
    pub pixels: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Sphere normal seen through pixel `(x, y)`, if the pixel center is on the disk.
fn disk_normal(size: usize, x: usize, y: usize) -> Option<[f64; 3]> {
    let px = (x as f64 + 0.5) / size as f64 * 2.0 - 1.0;
    let py = 1.0 - (y as f64 + 0.5) / size as f64 * 2.0;
    let r2 = px * px + py * py;
    (r2 < 1.0).then(|| [px, py, (1.0 - r2).sqrt()])
}

impl ProbeImage {
    /// Builds a probe from raw intensities; values are clamped and the mask is the inscribed disk.
    pub fn from_pixels(size: usize, pixels: Vec<f64>) -> Result<Self, ProbeError> {
        if size < 16 {
            return Err(ProbeError::TooSmall(size));
        }
        if pixels.len() != size * size {
            return Err(ProbeError::BadShape { expected: size * size, got: pixels.len() });
        }
        let mask: Vec<bool> = (0..size * size).map(|i| disk_normal(size, i % size, i / size).is_some()).collect();
        let pixels = pixels.iter().zip(&mask).map(|(p, m)| if *m { p.clamp(0.0, 1.0) } else { 0.0 }).collect();
        Ok(Self { size, pixels, mask })
    }

    /// Loads a grayscale PNG and resamples it to the fitting resolution.
    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        let (w, h, data) = imageio::load_gray(path)?;
        if w != h {
            return Err(ProbeError::BadShape { expected: w * w, got: w * h });
        }
        let pixels = if w == FIT_RESOLUTION {
            data.into_iter().map(f64::from).collect()
        } else {
            let buf = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_raw(w as u32, h as u32, data).expect("gray buffer");
            let resized = image::imageops::resize(&buf, FIT_RESOLUTION as u32, FIT_RESOLUTION as u32, image::imageops::FilterType::Triangle);
            resized.into_raw().into_iter().map(f64::from).collect()
        };
        Self::from_pixels(FIT_RESOLUTION, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        let data: Vec<f32> = self.pixels.iter().map(|p| *p as f32).collect();
        imageio::save_gray(self.size, self.size, &data, path)?;
        Ok(())
    }

    /// Mean absolute difference over masked pixels.
    pub fn masked_l1(&self, other: &ProbeImage) -> f64 {
        let (sum, n) = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .zip(&self.mask)
            .filter(|(_, m)| **m)
            .fold((0.0, 0usize), |(s, n), ((a, b), _)| (s + (a - b).abs(), n + 1));
        sum / n.max(1) as f64
    }
}

pub fn render_probe(l: &Direction, model: &LightProbeModel, size: usize) -> Result<ProbeImage, ProbeError> {
    if size < 16 {
        return Err(ProbeError::TooSmall(size));
    }
    model.validate()?;
    let lv = l.v();
    let pixels = (0..size * size)
        .map(|i| disk_normal(size, i % size, i / size).map_or(0.0, |n| model.shade(n, lv).clamp(0.0, 1.0)))
        .collect();
    ProbeImage::from_pixels(size, pixels)
}

/// Optimizer settings for [`fit_light_direction_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub starts: usize,
    pub iterations: usize,
    pub step: f64,
    /// Final step as a fraction of `step`; the step decays geometrically.
    pub final_step_fraction: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { starts: 8, iterations: 500, step: 0.05, final_step_fraction: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub direction: Direction,
    pub model: LightProbeModel,
    pub residual: f64,
    /// Best residual seen so far, recorded after every optimizer iteration.
    pub best_trace: Vec<f64>,
}

const N_PARAMS: usize = 7;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-6);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unconstrained parameterization: spherical angles, softplus for the
/// non-negative terms, `1 + exp` for hardness and a sigmoid for Fresnel.
#[derive(Debug, Clone, Copy)]
struct Params([f64; N_PARAMS]);

impl Params {
    fn from_parts(theta: f64, phi: f64, m: &LightProbeModel) -> Self {
        let f = m.fresnel.clamp(1e-4, 1.0 - 1e-4);
        Params([
            theta,
            phi,
            softplus_inv(m.ambient),
            softplus_inv(m.albedo),
            softplus_inv(m.spec_intensity),
            (m.spec_hardness - 1.0).max(1e-3).ln(),
            (f / (1.0 - f)).ln(),
        ])
    }

    fn light(&self) -> [f64; 3] {
        let (st, ct) = self.0[0].sin_cos();
        let (sp, cp) = self.0[1].sin_cos();
        [st * cp, st * sp, ct]
    }

    fn model(&self) -> LightProbeModel {
        LightProbeModel {
            ambient: softplus(self.0[2]),
            albedo: softplus(self.0[3]),
            spec_intensity: softplus(self.0[4]),
            spec_hardness: 1.0 + self.0[5].exp(),
            fresnel: sigmoid(self.0[6]),
        }
    }
}

struct FitTarget<'a> {
    normals: Vec<[f64; 3]>,
    values: Vec<f64>,
    _probe: &'a ProbeImage,
}

impl<'a> FitTarget<'a> {
    fn new(probe: &'a ProbeImage) -> Self {
        let mut normals = Vec::new();
        let mut values = Vec::new();
        for (i, (&m, &p)) in probe.mask.iter().zip(&probe.pixels).enumerate() {
            if m {
                if let Some(n) = disk_normal(probe.size, i % probe.size, i / probe.size) {
                    normals.push(n);
                    values.push(p);
                }
            }
        }
        Self { normals, values, _probe: probe }
    }

    /// Mean L1 residual and its (sub)gradient with respect to the raw parameters.
    fn loss_and_grad(&self, p: &Params) -> (f64, [f64; N_PARAMS]) {
        let l = p.light();
        let m = p.model();
        let (st, ct) = p.0[0].sin_cos();
        let (sp, cp) = p.0[1].sin_cos();
        let dl_dtheta = [ct * cp, ct * sp, -st];
        let dl_dphi = [-st * sp, st * cp, 0.0];

        let mut loss = 0.0;
        // Gradient with respect to (l, ambient, albedo, ks, hardness, f0).
        let mut g_l = [0.0f64; 3];
        let mut g = [0.0f64; 5];
        for (n, &t) in self.normals.iter().zip(&self.values) {
            let ndl = n[0] * l[0] + n[1] * l[1] + n[2] * l[2];
            let rdv = 2.0 * ndl * n[2] - l[2];
            let fres = schlick(m.fresnel, n[2]);
            let spec = if rdv > 0.0 { rdv.powf(m.spec_hardness) } else { 0.0 };
            let raw = m.ambient + m.albedo * ndl.max(0.0) + fres * m.spec_intensity * spec;
            let value = raw.clamp(0.0, 1.0);
            let r = value - t;
            loss += r.abs();
            if raw <= 0.0 || raw >= 1.0 || r == 0.0 {
                continue;
            }
            let s = r.signum();
            g[0] += s;
            if ndl > 0.0 {
                g[1] += s * ndl;
                for k in 0..3 {
                    g_l[k] += s * m.albedo * n[k];
                }
            }
            if rdv > 0.0 {
                g[2] += s * fres * spec;
                g[3] += s * fres * m.spec_intensity * spec * rdv.ln();
                g[4] += s * (1.0 - (1.0 - n[2].max(0.0)).powi(5)) * m.spec_intensity * spec;
                let dspec = m.spec_hardness * rdv.powf(m.spec_hardness - 1.0) * fres * m.spec_intensity;
                g_l[0] += s * dspec * 2.0 * n[2] * n[0];
                g_l[1] += s * dspec * 2.0 * n[2] * n[1];
                g_l[2] += s * dspec * (2.0 * n[2] * n[2] - 1.0);
            }
        }
        let inv = 1.0 / self.values.len() as f64;
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let grad = [
            dot(g_l, dl_dtheta) * inv,
            dot(g_l, dl_dphi) * inv,
            g[0] * sigmoid(p.0[2]) * inv,
            g[1] * sigmoid(p.0[3]) * inv,
            g[2] * sigmoid(p.0[4]) * inv,
            g[3] * p.0[5].exp() * inv,
            g[4] * m.fresnel * (1.0 - m.fresnel) * inv,
        ];
        (loss * inv, grad)
    }
}

/// Hemisphere grid of starting directions: two polar rings times the starts spread in azimuth.
fn start_angles(starts: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let rings = [25f64.to_radians(), 60f64.to_radians()];
    let per_ring = starts.div_ceil(2).max(1);
    (0..starts)
        .map(|k| {
            let ring = if starts == 1 { 0.0 } else { rings[k % 2] };
            let az = (k / 2) as f64 / per_ring as f64 * std::f64::consts::TAU + (k % 2) as f64 * std::f64::consts::PI / per_ring as f64;
            let jitter_t: f64 = rng.gen_range(-0.05..0.05);
            let jitter_p: f64 = rng.gen_range(-0.05..0.05);
            (ring + jitter_t, az + jitter_p)
        })
        .collect()
}

pub fn fit_light_direction(target: &ProbeImage, starts: usize) -> Result<ProbeFit, ProbeError> {
    fit_light_direction_with(target, &FitOptions { starts, ..FitOptions::default() })
}

pub fn fit_light_direction_with(target: &ProbeImage, opts: &FitOptions) -> Result<ProbeFit, ProbeError> {
    let fit_target = FitTarget::new(target);
    if fit_target.values.is_empty() || fit_target.values.iter().all(|v| *v <= 1e-9) {
        return Err(ProbeError::Degenerate);
    }
    let lo = fit_target.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = fit_target.values.iter().cloned().fold(0.0f64, f64::max);
    let init_model = LightProbeModel {
        ambient: lo.max(0.01),
        albedo: (hi - lo).max(0.05),
        spec_intensity: 0.2,
        spec_hardness: 10.0,
        fresnel: 0.2,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let decay = if opts.iterations > 1 { opts.final_step_fraction.powf(1.0 / (opts.iterations - 1) as f64) } else { 1.0 };
    let mut best: Option<(f64, Params)> = None;
    let mut trace = Vec::with_capacity(opts.starts.max(1) * opts.iterations);

    for (theta, phi) in start_angles(opts.starts.max(1), &mut rng) {
        let mut p = Params::from_parts(theta, phi, &init_model);
        let mut m1 = [0.0; N_PARAMS];
        let mut m2 = [0.0; N_PARAMS];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut step = opts.step;
        for it in 0..opts.iterations {
            let (loss, grad) = fit_target.loss_and_grad(&p);
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, p));
            }
            trace.push(best.as_ref().map(|b| b.0).unwrap_or(loss));
            let t = (it + 1) as i32;
            for k in 0..N_PARAMS {
                m1[k] = b1 * m1[k] + (1.0 - b1) * grad[k];
                m2[k] = b2 * m2[k] + (1.0 - b2) * grad[k] * grad[k];
                let mh = m1[k] / (1.0 - f64::powi(b1, t));
                let vh = m2[k] / (1.0 - f64::powi(b2, t));
                p.0[k] -= step * mh / (vh.sqrt() + eps);
            }
            step *= decay;
        }
        let (loss, _) = fit_target.loss_and_grad(&p);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, p));
        }
    }

    let (residual, p) = best.expect("at least one start");
    Ok(ProbeFit { direction: Direction::camera(p.light())?, model: p.model(), residual, best_trace: trace })
}

/// Fits every target independently; output order follows input order.
pub fn fit_direction_set(targets: &[ProbeImage], opts: &FitOptions) -> Result<Vec<(Direction, LightProbeModel)>, ProbeError> {
    targets
        .par_iter()
        .enumerate()
        .map(|(index, t)| {
            fit_light_direction_with(t, opts)
                .map(|f| (f.direction, f.model))
                .map_err(|e| ProbeError::Target { index, source: Box::new(e) })
        })
        .collect()
}

pub fn fits_to_direction_set(fits: &[(Direction, LightProbeModel)]) -> Result<DirectionSet, ProbeError> {
    let dirs: Vec<Direction> = fits.iter().map(|(d, _)| *d).collect();
    Ok(DirectionSet::from_directions(&dirs)?)
}

/// Loads `dir_00.png`, `dir_01.png`, ... from a directory until the first gap.
pub fn load_probe_dir(dir: &Path) -> Result<Vec<ProbeImage>, ProbeError> {
    let mut probes = Vec::new();
    for k in 0.. {
        let path = dir.join(format!("dir_{k:02}.png"));
        if !path.exists() {
            break;
        }
        probes.push(ProbeImage::load(&path)?);
    }
    Ok(probes)
}
