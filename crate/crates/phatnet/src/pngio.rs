//! PNG serialization for image tensors.
//!
//! Datasets are written as 16-bit RGB PNGs so quantization error stays at
//! the 1/65535 level, far below the 1/255 tolerance the round-trip
//! contract allows. 8-bit output is used only for qualitative grids.

use crate::error::{PhatError, Result};
use crate::image::ImageTensor;
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};
use std::path::Path;

fn io_err(path: &Path, source: std::io::Error) -> PhatError {
    PhatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn codec_err(path: &Path, err: image::ImageError) -> PhatError {
    match err {
        image::ImageError::IoError(e) => io_err(path, e),
        other => PhatError::ImageCodec {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Writes a 16-bit RGB PNG; values are scaled by 65535 and rounded.
pub fn save_png16(path: &Path, img: &ImageTensor) -> Result<()> {
    let (h, w, _) = img.data().dim();
    let mut raw = Vec::with_capacity(h * w * 3);
    for v in img.data().iter() {
        raw.push((v * 65535.0).round() as u16);
    }
    let buf = ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer size matches dims");
    DynamicImage::ImageRgb16(buf)
        .save(path)
        .map_err(|e| codec_err(path, e))
}

/// Writes an 8-bit RGB PNG (qualitative output only).
pub fn save_png8(path: &Path, img: &ImageTensor) -> Result<()> {
    let (h, w, _) = img.data().dim();
    let mut raw = Vec::with_capacity(h * w * 3);
    for v in img.data().iter() {
        raw.push((v * 255.0).round() as u8);
    }
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer size matches dims");
    DynamicImage::ImageRgb8(buf)
        .save(path)
        .map_err(|e| codec_err(path, e))
}

/// Writes a single-channel array in [0, 1] as a 16-bit grayscale PNG.
pub fn save_gray_png16(path: &Path, data: &Array2<f64>) -> Result<()> {
    let (h, w) = data.dim();
    let mut raw = Vec::with_capacity(h * w);
    for v in data.iter() {
        raw.push((v.clamp(0.0, 1.0) * 65535.0).round() as u16);
    }
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
        .expect("buffer size matches dims");
    DynamicImage::ImageLuma16(buf)
        .save(path)
        .map_err(|e| codec_err(path, e))
}

/// Loads an RGB PNG (8- or 16-bit) into an [`ImageTensor`].
///
/// 8-bit samples map to `v/255`, 16-bit to `v/65535`; grayscale inputs
/// are broadcast to three channels.
pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let dynimg = image::ImageReader::open(path)
        .map_err(|e| io_err(path, e))?
        .decode()
        .map_err(|e| codec_err(path, e))?;
    let rgb = dynimg.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut data = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[[y, x, c]] = raw[(y * w + x) * 3 + c] as f64 / 65535.0;
            }
        }
    }
    ImageTensor::new(data)
}
