//! PSNR, SSIM (with its gradient, used by the training loss) and the
//! relighting evaluation report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorlab::{normalize_to_reference, ColorError, ImageRGB};
use crate::relightgen::MultiLightDataset;
use crate::splatfield::{render, FieldError, SplatScene};
use crate::trainfield::{infer_latent, TrainError};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error("image is {0}x{1}; SSIM needs both sides >= {SSIM_WINDOW}")]
    TooSmall(usize, usize),
    #[error("view {view}, light {light}: {source}")]
    Render { view: String, light: usize, source: FieldError },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64, EvalError> {
    a.same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" filtering of a single-channel image.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a valid-size map back to full size.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..SSIM_WINDOW {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

/// Mean SSIM of one channel and, optionally, its gradient w.r.t. `x`.
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let k = gaussian_kernel();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let mxx = filter_valid(&xx, w, h, &k);
    let myy = filter_valid(&yy, w, h, &k);
    let mxy = filter_valid(&xy, w, h, &k);
    let n = mx.len() as f64;
    let mut total = 0.0;
    let (mut d_mx, mut d_mxx, mut d_mxy) = if want_grad { (vec![0.0; mx.len()], vec![0.0; mx.len()], vec![0.0; mx.len()]) } else { (vec![], vec![], vec![]) };
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = mxx[i] - ux * ux;
        let syy = myy[i] - uy * uy;
        let sxy = mxy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * sxy + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = sxx + syy + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            d_mxy[i] = s * 2.0 / a2 / n;
            d_mxx[i] = -s / b2 / n;
            d_mx[i] = s * (2.0 * uy / a1 - 2.0 * ux / b1 - 2.0 * uy / a2 + 2.0 * ux / b2) / n;
        }
    }
    let grad = want_grad.then(|| {
        let g1 = filter_valid_adjoint(&d_mx, w, h, &k);
        let g2 = filter_valid_adjoint(&d_mxx, w, h, &k);
        let g3 = filter_valid_adjoint(&d_mxy, w, h, &k);
        (0..w * h).map(|p| g1[p] + 2.0 * x[p] * g2[p] + y[p] * g3[p]).collect()
    });
    (total / n, grad)
}

fn split_channels(data: &[f32]) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|c| data.iter().skip(c).step_by(3).map(|v| *v as f64).collect())
}

/// Channel-averaged SSIM of interleaved RGB buffers, and its gradient with
/// respect to `pred` (interleaved) when requested.
pub fn ssim_rgb(pred: &[f32], target: &[f32], w: usize, h: usize, want_grad: bool) -> Result<(f64, Option<Vec<f64>>), EvalError> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall(w, h));
    }
    let px = split_channels(pred);
    let ty = split_channels(target);
    let mut value = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);
    for c in 0..3 {
        let (s, g) = ssim_channel(&px[c], &ty[c], w, h, want_grad);
        value += s / 3.0;
        if let (Some(out), Some(g)) = (grad.as_mut(), g) {
            for p in 0..w * h {
                out[p * 3 + c] = g[p] / 3.0;
            }
        }
    }
    Ok((value, grad))
}

pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64, EvalError> {
    a.same_shape(b)?;
    if a.data() == b.data() {
        return Ok(1.0);
    }
    Ok(ssim_rgb(a.data(), b.data(), a.width(), a.height(), false)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub view: String,
    pub light: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Reserved; perceptual metrics are not computed.
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scene: String,
    pub entries: Vec<MetricEntry>,
    pub aggregates: Aggregates,
}

impl MetricReport {
    pub fn from_entries(scene: &str, entries: Vec<MetricEntry>) -> Self {
        let n = entries.len().max(1) as f64;
        let aggregates = Aggregates {
            psnr: entries.iter().map(|e| e.psnr).sum::<f64>() / n,
            ssim: entries.iter().map(|e| e.ssim).sum::<f64>() / n,
            lpips: None,
        };
        Self { scene: scene.into(), entries, aggregates }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene,view,light,psnr,ssim,lpips\n");
        for e in &self.entries {
            writeln!(s, "{},{},{},{:.6},{:.6},", self.scene, e.view, e.light, e.psnr, e.ssim).expect("write to String");
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other.
    pub fn save(&self, json_path: &Path) -> Result<(), EvalError> {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |source| EvalError::Io { path: p, source }
        };
        std::fs::write(json_path, self.to_json()).map_err(io(json_path))?;
        let csv = json_path.with_extension("csv");
        std::fs::write(&csv, self.to_csv()).map_err(io(&csv))
    }
}

/// Renders every test (view, light) with the mean latent and scores it
/// against ground truth, optionally after LAB mean/std normalization.
pub fn evaluate(scene: &SplatScene, test: &MultiLightDataset, normalize: bool, name: &str) -> Result<MetricReport, EvalError> {
    let mut entries = Vec::new();
    if test.base.views.is_empty() {
        return Ok(MetricReport::from_entries(name, entries));
    }
    let latent = infer_latent(scene)?;
    for (v, view) in test.base.views.iter().enumerate() {
        if scene.latents.iter().any(|l| l.view_id == view.id) {
            log::warn!("test view {} is also a training view", view.id);
        }
        for k in 0..test.light_count() {
            let light = test.light_dir_world(v, k);
            let out = render(scene, &view.pose, Some(&light), &latent).map_err(|source| EvalError::Render { view: view.id.clone(), light: k, source })?;
            let truth = &test.relit[v][k];
            let pred = if normalize { normalize_to_reference(&out.color, truth)? } else { out.color };
            entries.push(MetricEntry { view: view.id.clone(), light: k, psnr: psnr(&pred, truth)?, ssim: ssim(&pred, truth)?, lpips: None });
        }
    }
    Ok(MetricReport::from_entries(name, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> ImageRGB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRGB::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageRGB::filled(8, 8, [0.2; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = ImageRGB::filled(8, 8, [0.3; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let c = ImageRGB::filled(8, 8, [0.0; 3]);
        let d = ImageRGB::filled(8, 8, [0.5; 3]);
        assert!((psnr(&c, &d).unwrap() - 6.0206).abs() < 1e-4);
        assert!(psnr(&a, &ImageRGB::filled(4, 8, [0.2; 3])).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let a = noise(24, 20, 1);
        let b = noise(24, 20, 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        let inv = ImageRGB::from_fn(24, 20, |x, y| a.pixel(x, y).map(|v| 1.0 - v));
        assert!(ssim(&a, &inv).unwrap() < 0.2);
        assert!(matches!(ssim(&noise(10, 30, 1), &noise(10, 30, 2)), Err(EvalError::TooSmall(10, 30))));
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let (w, h) = (14, 13);
        let a = noise(w, h, 3);
        let b = noise(w, h, 4);
        let (_, g) = ssim_rgb(a.data(), b.data(), w, h, true).unwrap();
        let g = g.unwrap();
        let f = |data: &[f32]| ssim_rgb(data, b.data(), w, h, false).unwrap().0;
        for i in (0..w * h * 3).step_by(17) {
            let mut p = a.data().to_vec();
            let mut m = a.data().to_vec();
            p[i] += 1e-3;
            m[i] -= 1e-3;
            let fd = (f(&p) - f(&m)) / 2e-3;
            assert!((fd - g[i]).abs() < 1e-5 + 1e-3 * fd.abs(), "{i}: {fd} vs {}", g[i]);
        }
    }
}
