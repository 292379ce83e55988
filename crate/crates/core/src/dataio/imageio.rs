use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::{Error, Result};

/// Loads an 8- or 16-bit PNG as `H x W x 3` floats, compositing any alpha
/// channel over white. Returns `(width, height, pixels)`.
pub fn load_png(path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let rgba = img.to_rgba32f();
    let (w, h) = rgba.dimensions();
    let mut out = Vec::with_capacity(3 * (w * h) as usize);
    for px in rgba.pixels() {
        let a = px[3] as f64;
        for c in 0..3 {
            out.push(px[c] as f64 * a + (1.0 - a));
        }
    }
    Ok((w, h, out))
}

/// `[0, 1]` to 8-bit with round-half-to-even.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn save_png(path: &Path, width: u32, height: u32, rgb: &[f64]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * (width * height) as usize, "image shape");
    let bytes: Vec<u8> = rgb.iter().map(|&v| quantize(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(width, height, bytes).expect("sized above");
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

pub fn save_png_gray(path: &Path, width: u32, height: u32, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), (width * height) as usize, "image shape");
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(width, height, bytes).expect("sized above");
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}
