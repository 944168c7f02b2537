//! PNG exports: 8-bit validity masks and 16-bit quantized channel or scalar
//! maps. Quantization maps a stated [lo, hi] range onto [0, 65535]; internal
//! math stays real-valued, these files are export only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{ChannelMap, GrayImage};

fn save_err(path: &Path, e: image::ImageError) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|m| if *m { 255 } else { 0 }).collect();
    let img = image::ImageBuffer::<image::Luma<u8>, _>::from_raw(width as u32, height as u32, buf)
        .expect("mask buffer size matches dimensions");
    img.save(path).map_err(|e| save_err(path, e))
}

/// Reads a mask PNG: any nonzero luma counts as valid.
pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path)
        .map_err(|e| save_err(path, e))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = img.into_raw().into_iter().map(|v| v != 0).collect();
    Ok((w, h, mask))
}

#[inline]
fn quantize16(v: f64, lo: f64, hi: f64) -> u16 {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    (t.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes a three-channel map as 16-bit RGB PNG, quantizing [lo, hi] onto
/// the full range. Invalid pixels map to lo.
pub fn write_channel_map_png16(path: &Path, map: &ChannelMap, lo: f64, hi: f64) -> Result<()> {
    let mut buf = Vec::with_capacity(3 * map.data.len());
    for (px, ok) in map.data.iter().zip(&map.valid) {
        for c in 0..3 {
            let v = if *ok { px[c] } else { lo };
            buf.push(quantize16(v, lo, hi));
        }
    }
    let img =
        image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(map.width as u32, map.height as u32, buf)
            .expect("channel buffer size matches dimensions");
    img.save(path).map_err(|e| save_err(path, e))
}

/// Writes a scalar grid as 16-bit grayscale PNG with the same quantization.
pub fn write_scalar_png16(path: &Path, image: &GrayImage, lo: f64, hi: f64) -> Result<()> {
    let buf: Vec<u16> = image.data.iter().map(|v| quantize16(*v, lo, hi)).collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        image.width as u32,
        image.height as u32,
        buf,
    )
    .expect("scalar buffer size matches dimensions");
    img.save(path).map_err(|e| save_err(path, e))
}
