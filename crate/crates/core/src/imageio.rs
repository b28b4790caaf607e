//! PNG encode/decode for the image types used across the pipeline.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use thiserror::Error;

use crate::colorlab::ImageRGB;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{context}: {source}")]
    Codec { context: String, source: image::ImageError },
    #[error("{0}")]
    Format(String),
}

/// Depth along the optical axis in scene units, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Per-pixel unit normals in the camera frame, interleaved xyz.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn rgb_to_buffer(img: &ImageRGB) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let raw = img.data().iter().map(|v| to_u8(*v)).collect();
    ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size matches")
}

pub fn encode_png(img: &ImageRGB) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    rgb_to_buffer(img).write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encode");
    out.into_inner()
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageRGB, ImageIoError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|source| ImageIoError::Codec { context: "decode png".into(), source })?;
    Ok(dynamic_to_rgb(img))
}

fn dynamic_to_rgb(img: DynamicImage) -> ImageRGB {
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    ImageRGB::new(w as usize, h as usize, rgb.into_raw()).expect("decoded image is non-empty")
}

fn codec_err(path: &Path) -> impl FnOnce(image::ImageError) -> ImageIoError + '_ {
    move |source| ImageIoError::Codec { context: path.display().to_string(), source }
}

pub fn save_rgb(img: &ImageRGB, path: &Path) -> Result<(), ImageIoError> {
    rgb_to_buffer(img).save_with_format(path, ImageFormat::Png).map_err(codec_err(path))
}

pub fn load_rgb(path: &Path) -> Result<ImageRGB, ImageIoError> {
    let img = image::open(path).map_err(codec_err(path))?;
    Ok(dynamic_to_rgb(img))
}

/// Loads any PNG as grayscale intensities in [0, 1].
pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<f32>), ImageIoError> {
    let img = image::open(path).map_err(codec_err(path))?.to_luma32f();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn save_gray(width: usize, height: usize, data: &[f32], path: &Path) -> Result<(), ImageIoError> {
    let raw = data.iter().map(|v| to_u8(*v)).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).ok_or_else(|| ImageIoError::Format("gray buffer size".into()))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(codec_err(path))
}

/// 16-bit grayscale PNG holding depth in millimeters (scene units x 1000).
pub fn encode_depth_png(depth: &DepthMap) -> Vec<u8> {
    let raw = depth.data.iter().map(|d| (d.max(0.0) * 1000.0).round().min(65535.0) as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, raw).expect("depth buffer size");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encode");
    out.into_inner()
}

pub fn decode_depth_png(bytes: &[u8]) -> Result<DepthMap, ImageIoError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|source| ImageIoError::Codec { context: "decode depth png".into(), source })?;
    let DynamicImage::ImageLuma16(buf) = img else {
        return Err(ImageIoError::Format("depth PNG must be 16-bit grayscale".into()));
    };
    let (w, h) = buf.dimensions();
    Ok(DepthMap { width: w as usize, height: h as usize, data: buf.into_raw().into_iter().map(|v| v as f32 / 1000.0).collect() })
}

pub fn save_depth(depth: &DepthMap, path: &Path) -> Result<(), ImageIoError> {
    std::fs::write(path, encode_depth_png(depth)).map_err(|source| ImageIoError::Io { path: path.display().to_string(), source })
}

pub fn load_depth(path: &Path) -> Result<DepthMap, ImageIoError> {
    let bytes = std::fs::read(path).map_err(|source| ImageIoError::Io { path: path.display().to_string(), source })?;
    decode_depth_png(&bytes)
}

/// 16-bit RGB PNG storing `n * 0.5 + 0.5`.
pub fn save_normals(normals: &NormalMap, path: &Path) -> Result<(), ImageIoError> {
    let raw = normals.data.iter().map(|n| ((n * 0.5 + 0.5).clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(normals.width as u32, normals.height as u32, raw).ok_or_else(|| ImageIoError::Format("normal buffer size".into()))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(codec_err(path))
}

pub fn load_normals(path: &Path) -> Result<NormalMap, ImageIoError> {
    let img = image::open(path).map_err(codec_err(path))?.to_rgb16();
    let (w, h) = img.dimensions();
    let mut data: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / 65535.0 * 2.0 - 1.0).collect();
    for n in data.chunks_exact_mut(3) {
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 1e-6 {
            n.iter_mut().for_each(|c| *c /= len);
        }
    }
    Ok(NormalMap { width: w as usize, height: h as usize, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let img = ImageRGB::from_fn(5, 3, |x, y| [x as f32 / 4.0, y as f32 / 2.0, 0.5]);
        let back = decode_png(&encode_png(&img)).unwrap();
        assert_eq!(back.width(), 5);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn depth_is_millimeter_quantized() {
        let depth = DepthMap { width: 2, height: 1, data: vec![1.2344, 3.0] };
        let back = decode_depth_png(&encode_depth_png(&depth)).unwrap();
        assert_eq!(back.data, vec![1.234, 3.0]);
        assert!(decode_depth_png(&encode_png(&ImageRGB::filled(2, 1, [0.1; 3]))).is_err());
    }
}
