//! PNG/PGM on disk <-> f64 tensors in memory.
//!
//! Loading maps u8 to `[0, 1]` by dividing by 255; masks binarize strictly
//! above 127. Saving clamps to `[0, 1]` and rounds to u8, so a save/load
//! round trip quantizes to 8 bits but is otherwise exact and deterministic.

use std::path::Path;

use image::{DynamicImage, GrayImage};
use wavseg::Tensor;

use crate::CliError;

fn open(path: &Path) -> Result<DynamicImage, CliError> {
    image::open(path)
        .map_err(|e| CliError::user(format!("cannot read image {}: {e}", path.display())))
}

/// Load as grayscale `(1, 1, H, W)` in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Tensor, CliError> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut t = Tensor::zeros([1, 1, h as usize, w as usize]);
    for (x, y, p) in img.enumerate_pixels() {
        t.set(0, 0, y as usize, x as usize, p.0[0] as f64 / 255.0);
    }
    Ok(t)
}

/// Load keeping color: `(1, 3, H, W)` for color images, `(1, 1, H, W)` for
/// grayscale ones.
pub fn load_keep_channels(path: &Path) -> Result<Tensor, CliError> {
    let img = open(path)?;
    if matches!(img, DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_)) {
        return load_gray(path);
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut t = Tensor::zeros([1, 3, h as usize, w as usize]);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p.0[c] as f64 / 255.0);
        }
    }
    Ok(t)
}

/// Load a binary mask: gray value strictly above 127 counts as foreground.
pub fn load_mask(path: &Path) -> Result<Tensor, CliError> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut t = Tensor::zeros([1, 1, h as usize, w as usize]);
    for (x, y, p) in img.enumerate_pixels() {
        t.set(0, 0, y as usize, x as usize, (p.0[0] > 127) as u8 as f64);
    }
    Ok(t)
}

/// Save one `(1, 1, H, W)` plane in `[0, 1]` as an 8-bit grayscale file.
/// The format follows the extension (.png or .pgm).
pub fn save_gray(path: &Path, t: &Tensor) -> Result<(), CliError> {
    let [b, c, h, w] = t.shape();
    if b != 1 || c != 1 {
        return Err(CliError::internal(format!(
            "save_gray wants (1, 1, H, W), got {:?}",
            t.shape()
        )));
    }
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (t.at(0, 0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)
        .map_err(|e| CliError::user(format!("cannot write image {}: {e}", path.display())))
}

/// Normalize a signed band for viewing: zero maps to mid-gray, the largest
/// magnitude to full black/white. An all-zero band stays mid-gray.
pub fn signed_to_unit(t: &Tensor) -> Tensor {
    let peak = t.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if peak == 0.0 {
        return Tensor::full(t.shape(), 0.5);
    }
    t.map(|v| 0.5 + v / (2.0 * peak))
}

/// Normalize a nonnegative map for viewing by its own peak.
pub fn mag_to_unit(t: &Tensor) -> Tensor {
    let peak = t.data().iter().fold(0.0f64, |a, &v| a.max(v));
    if peak == 0.0 {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| v / peak)
}
