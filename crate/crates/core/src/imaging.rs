//! Image, mask and depth-map files.
//!
//! Colors and masks are 8-bit PNGs mapped to `[0, 1]`. Depth maps use a
//! small binary format:
//!
//! ```text
//! b"DPT1"  u32 width  u32 height  width*height f32 values, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

const DEPTH_MAGIC: &[u8; 4] = b"DPT1";

fn image_error(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::Validation(format!("missing file {}", path.display())));
    }
    image::open(path).map_err(|e| image_error(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Read a color image as `H x W x 3` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = open(path)?.to_rgb32f();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64
    }))
}

/// Write an `H x W x 3` image, clamping to `[0, 1]`.
pub fn write_rgb(path: &Path, img: ArrayView3<f64>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::dimension("image channels", 3, c));
    }
    let out: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(img[[y, x, 0]]), to_u8(img[[y, x, 1]]), to_u8(img[[y, x, 2]])])
    });
    out.save(path).map_err(|e| image_error(path, e))
}

/// Read a single-channel mask as `H x W` in `[0, 1]`; color files are
/// converted to luminance.
pub fn read_mask(path: &Path) -> Result<Array2<f64>> {
    let img = open(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f64
    }))
}

/// Write an `H x W` mask, clamping to `[0, 1]`.
pub fn write_mask(path: &Path, mask: ArrayView2<f64>) -> Result<()> {
    let (h, w) = mask.dim();
    let out: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(mask[[y as usize, x as usize]])]));
    out.save(path).map_err(|e| image_error(path, e))
}

/// Write a depth map in the `DPT1` format.
pub fn write_depth(path: &Path, depth: ArrayView2<f64>) -> Result<()> {
    let (h, w) = depth.dim();
    let mut bytes = Vec::with_capacity(12 + 4 * h * w);
    bytes.extend_from_slice(DEPTH_MAGIC);
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    for v in depth.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a depth map written by [`write_depth`].
pub fn read_depth(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Validation(format!("{}: {what}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(bad("not a DPT1 depth map"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes")) as usize;
    let (w, h) = (word(4), word(8));
    if bytes.len() != 12 + 4 * w * h {
        return Err(bad("truncated depth data"));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
        .collect();
    Array2::from_shape_vec((h, w), values).map_err(|e| bad(&e.to_string()))
}
