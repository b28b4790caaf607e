//! sRGB / CIELAB conversion and LAB statistics matching.
//!
//! LAB uses the D65 white point and the IEC 61966-2-1 sRGB primaries.
//! Statistics are population moments accumulated in double precision.

use thiserror::Error;

/// Standard-deviation floor used when dividing by prediction statistics.
pub const STD_EPS: f64 = 1e-4;

/// Linear sRGB to XYZ (D65).
pub const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// D65 reference white.
pub const WHITE_D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColorError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    Shape(usize, usize, usize, usize),
    #[error("image must be at least 1x1 with {expected} values, got {got}")]
    BadBuffer { expected: usize, got: usize },
    #[error("empty image stack")]
    EmptyStack,
}

/// An sRGB-encoded image with interleaved RGB values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageRGB {
    /// Wraps an interleaved buffer, clamping every value into [0, 1].
    pub fn new(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self, ColorError> {
        let expected = width * height * 3;
        if width == 0 || height == 0 || data.len() != expected {
            return Err(ColorError::BadBuffer { expected, got: data.len() });
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data).expect("non-empty image")
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data).expect("non-empty image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &ImageRGB) -> Result<(), ColorError> {
        if self.width != other.width || self.height != other.height {
            return Err(ColorError::Shape(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    pub fn mean_abs_diff(&self, other: &ImageRGB) -> Result<f64, ColorError> {
        self.same_shape(other)?;
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// CIELAB pixels, interleaved (L, a, b).
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn srgb_eotf(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn srgb_oetf(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn xyz_to_srgb_matrix() -> [[f64; 3]; 3] {
    let m = nalgebra::Matrix3::from_fn(|r, c| SRGB_TO_XYZ[r][c]);
    let inv = m.try_inverse().expect("sRGB matrix is invertible");
    [[inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]], [inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]], [inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]]]
}

pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_eotf);
    let m = &SRGB_TO_XYZ;
    let xyz = [0, 1, 2].map(|r| m[r][0] * lin[0] + m[r][1] * lin[1] + m[r][2] * lin[2]);
    let f = [lab_f(xyz[0] / WHITE_D65[0]), lab_f(xyz[1] / WHITE_D65[1]), lab_f(xyz[2] / WHITE_D65[2])];
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

fn lab_pixel_to_srgb_with(lab: [f64; 3], inv: &[[f64; 3]; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [WHITE_D65[0] * lab_f_inv(fx), WHITE_D65[1] * lab_f_inv(fy), WHITE_D65[2] * lab_f_inv(fz)];
    let lin = [0, 1, 2].map(|r| inv[r][0] * xyz[0] + inv[r][1] * xyz[1] + inv[r][2] * xyz[2]);
    lin.map(|c| srgb_oetf(c.max(0.0)).clamp(0.0, 1.0))
}

pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    lab_pixel_to_srgb_with(lab, &xyz_to_srgb_matrix())
}

pub fn srgb_to_lab(img: &ImageRGB) -> LabImage {
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| srgb_pixel_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect();
    LabImage { width: img.width, height: img.height, data }
}

pub fn lab_to_srgb(lab: &LabImage) -> ImageRGB {
    let inv = xyz_to_srgb_matrix();
    let data = lab
        .data
        .chunks_exact(3)
        .flat_map(|p| lab_pixel_to_srgb_with([p[0], p[1], p[2]], &inv).map(|c| c as f32))
        .collect();
    ImageRGB::new(lab.width, lab.height, data).expect("shape preserved")
}

/// Population mean and standard deviation per channel over every pixel of every image.
pub fn lab_stats<'a>(images: impl IntoIterator<Item = &'a LabImage>) -> LabStats {
    let mut n = 0usize;
    let mut sum = [0.0f64; 3];
    let images: Vec<&LabImage> = images.into_iter().collect();
    for img in &images {
        for p in img.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += p[c];
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean = sum.map(|s| s / n);
    let mut var = [0.0f64; 3];
    for img in &images {
        for p in img.data.chunks_exact(3) {
            for c in 0..3 {
                let d = p[c] - mean[c];
                var[c] += d * d;
            }
        }
    }
    LabStats { mean, std: var.map(|v| (v / n).sqrt()) }
}

fn apply_affine(lab: &LabImage, from: &LabStats, to: &LabStats) -> LabImage {
    let scale: [f64; 3] = [0, 1, 2].map(|c| to.std[c] / from.std[c].max(STD_EPS));
    let data = lab
        .data
        .chunks_exact(3)
        .flat_map(|p| [0, 1, 2].map(|c| (p[c] - from.mean[c]) * scale[c] + to.mean[c]))
        .collect();
    LabImage { width: lab.width, height: lab.height, data }
}

/// Maps a stack of predictions with one shared LAB affine transform so that
/// their joint statistics match the reference image.
pub fn match_stats_joint(predictions: &[ImageRGB], reference: &ImageRGB) -> Result<Vec<ImageRGB>, ColorError> {
    for p in predictions {
        p.same_shape(reference)?;
    }
    if predictions.is_empty() {
        return Ok(Vec::new());
    }
    let labs: Vec<LabImage> = predictions.iter().map(srgb_to_lab).collect();
    let from = lab_stats(&labs);
    let to = lab_stats([&srgb_to_lab(reference)]);
    Ok(labs.iter().map(|l| lab_to_srgb(&apply_affine(l, &from, &to))).collect())
}

/// Single-image variant of [`match_stats_joint`], used to normalize predictions before scoring.
pub fn normalize_to_reference(pred: &ImageRGB, reference: &ImageRGB) -> Result<ImageRGB, ColorError> {
    pred.same_shape(reference)?;
    let lab = srgb_to_lab(pred);
    let from = lab_stats([&lab]);
    let to = lab_stats([&srgb_to_lab(reference)]);
    Ok(lab_to_srgb(&apply_affine(&lab, &from, &to)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize, lo: f32, hi: f32) -> ImageRGB {
        ImageRGB::from_fn(w, h, |_, _| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)])
    }

    #[test]
    fn reference_colors() {
        let white = srgb_pixel_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-3, "{white:?}");
        assert!(white[1].abs() <= 0.01 && white[2].abs() <= 0.01);
        assert_eq!(srgb_pixel_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
        for g in [0.1, 0.37, 0.5, 0.9] {
            let lab = srgb_pixel_to_lab([g, g, g]);
            assert!(lab[1].abs() < 0.01 && lab[2].abs() < 0.01, "{lab:?}");
        }
        // Published CIELAB(D65) of sRGB red: (53.24, 80.09, 67.20).
        let red = srgb_pixel_to_lab([1.0, 0.0, 0.0]);
        assert!((red[0] - 53.24).abs() < 0.01 && (red[1] - 80.09).abs() < 0.02 && (red[2] - 67.20).abs() < 0.02, "{red:?}");
    }

    #[test]
    fn round_trip_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 32, 24, 0.0, 1.0);
        let back = lab_to_srgb(&srgb_to_lab(&img));
        let max = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max <= 1e-4, "max err {max}");
    }

    #[test]
    fn lab_edge_cases() {
        assert_eq!(lab_pixel_to_srgb([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
        let wild = lab_pixel_to_srgb([80.0, 150.0, -150.0]);
        assert!(wild.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn matching_with_equal_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 16, 16, 0.2, 0.8);
        let stack = vec![img.clone(); 18];
        let out = match_stats_joint(&stack, &img).unwrap();
        for o in &out {
            for (a, b) in o.data().iter().zip(img.data()) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn constant_stack_maps_to_reference_mean() {
        let stack = vec![ImageRGB::filled(8, 8, [0.3, 0.3, 0.3]); 18];
        let reference = ImageRGB::filled(8, 8, [0.6, 0.6, 0.6]);
        let out = match_stats_joint(&stack, &reference).unwrap();
        for o in &out {
            for v in o.data() {
                assert!((v - 0.6).abs() < 1e-5, "{v}");
            }
        }
    }

    #[test]
    fn joint_stats_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = random_image(&mut rng, 16, 16, 0.3, 0.7);
        let stack: Vec<ImageRGB> = (0..18).map(|k| {
            let lo = 0.35 + 0.005 * k as f32;
            random_image(&mut rng, 16, 16, lo, lo + 0.25)
        }).collect();
        let out = match_stats_joint(&stack, &reference).unwrap();
        let got = lab_stats(&out.iter().map(srgb_to_lab).collect::<Vec<_>>());
        let want = lab_stats([&srgb_to_lab(&reference)]);
        for c in 0..3 {
            assert!((got.mean[c] - want.mean[c]).abs() < 1e-5, "mean c{c}: {got:?} vs {want:?}");
            assert!((got.std[c] - want.std[c]).abs() < 1e-5, "std c{c}: {got:?} vs {want:?}");
        }
    }

    #[test]
    fn normalize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reference = random_image(&mut rng, 16, 16, 0.3, 0.6);
        let same = normalize_to_reference(&reference, &reference).unwrap();
        assert!(same.data().iter().zip(reference.data()).all(|(a, b)| (a - b).abs() <= 1e-5));

        // A pure +10 L offset is cancelled by the mean shift.
        let mut lab = srgb_to_lab(&reference);
        for p in lab.data.chunks_exact_mut(3) {
            p[0] += 10.0;
        }
        let shifted = lab_to_srgb(&lab);
        let out = normalize_to_reference(&shifted, &reference).unwrap();
        assert!(out.data().iter().zip(reference.data()).all(|(a, b)| (a - b).abs() <= 1e-4));

        let constant = ImageRGB::filled(16, 16, [0.2, 0.4, 0.1]);
        let out = normalize_to_reference(&constant, &reference).unwrap();
        let mean = lab_stats([&srgb_to_lab(&reference)]).mean;
        let expected = lab_pixel_to_srgb(mean);
        for p in out.data().chunks_exact(3) {
            for c in 0..3 {
                assert!((p[c] as f64 - expected[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let reference = random_image(&mut rng, 16, 16, 0.2, 0.8);
            let pred = random_image(&mut rng, 16, 16, 0.1, 0.9);
            let once = normalize_to_reference(&pred, &reference).unwrap();
            let twice = normalize_to_reference(&once, &reference).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let a = ImageRGB::filled(4, 4, [0.5; 3]);
        let b = ImageRGB::filled(4, 5, [0.5; 3]);
        assert!(matches!(normalize_to_reference(&a, &b), Err(ColorError::Shape(..))));
        assert!(matches!(match_stats_joint(&[a.clone(), b.clone()], &a), Err(ColorError::Shape(..))));
        assert!(ImageRGB::new(0, 4, vec![]).is_err());
    }
}
