//! PNG rendering of depth maps, signed error maps and heatmaps.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Perceptually ordered dark-blue → green → yellow ramp.
const SEQUENTIAL: [[f64; 3]; 6] = [
    [68.0, 1.0, 84.0],
    [65.0, 68.0, 135.0],
    [42.0, 120.0, 142.0],
    [34.0, 168.0, 132.0],
    [122.0, 209.0, 81.0],
    [253.0, 231.0, 37.0],
];
const NEGATIVE: [f64; 3] = [33.0, 102.0, 172.0];
const POSITIVE: [f64; 3] = [178.0, 24.0, 43.0];
const WHITE: [f64; 3] = [255.0, 255.0, 255.0];
/// Fill for no-data pixels on sequential maps.
const NODATA_GRAY: Rgb<u8> = Rgb([200, 200, 200]);

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> Rgb<u8> {
    let c = |i: usize| (a[i] + (b[i] - a[i]) * t).round().clamp(0.0, 255.0) as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Sequential colour for `t ∈ [0, 1]` (clamped).
pub fn sequential(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let seg = t * (SEQUENTIAL.len() - 1) as f64;
    let i = (seg.floor() as usize).min(SEQUENTIAL.len() - 2);
    lerp(SEQUENTIAL[i], SEQUENTIAL[i + 1], seg - i as f64)
}

/// Diverging colour for `t ∈ [-1, 1]`: blue below zero, white at zero,
/// red above.
pub fn diverging(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() {
        t.clamp(-1.0, 1.0)
    } else {
        0.0
    };
    if t < 0.0 {
        lerp(WHITE, NEGATIVE, -t)
    } else {
        lerp(WHITE, POSITIVE, t)
    }
}

/// The colour used for zero error and for no-data on error maps.
pub fn neutral() -> Rgb<u8> {
    diverging(0.0)
}

fn check(values: &[f32], width: usize, height: usize) -> Result<()> {
    if values.len() != width * height || width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "cannot render {} values as {width}x{height}",
            values.len()
        )));
    }
    Ok(())
}

fn save(img: RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::format(format!("writing {}: {e}", path.display())))
}

/// Renders `values` scaled by `[lo, hi]`; pixels where `valid` is false are
/// gray.
pub fn sequential_image(
    values: &[f32],
    valid: &[bool],
    width: usize,
    height: usize,
    lo: f64,
    hi: f64,
) -> Result<RgbImage> {
    check(values, width, height)?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        if valid[i] {
            sequential((values[i] as f64 - lo) / span)
        } else {
            NODATA_GRAY
        }
    }))
}

/// Renders signed values symmetric around zero with range `±max |v|` over
/// valid pixels; invalid pixels are neutral.
pub fn diverging_image(
    values: &[f32],
    valid: &[bool],
    width: usize,
    height: usize,
) -> Result<RgbImage> {
    check(values, width, height)?;
    let peak = values
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(e, _)| (*e as f64).abs())
        .fold(0.0, f64::max);
    Ok(RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        if !valid[i] || peak == 0.0 {
            neutral()
        } else {
            diverging(values[i] as f64 / peak)
        }
    }))
}

pub fn save_sequential(
    path: &Path,
    values: &[f32],
    valid: &[bool],
    width: usize,
    height: usize,
    lo: f64,
    hi: f64,
) -> Result<()> {
    save(
        sequential_image(values, valid, width, height, lo, hi)?,
        path,
    )
}

pub fn save_diverging(
    path: &Path,
    values: &[f32],
    valid: &[bool],
    width: usize,
    height: usize,
) -> Result<()> {
    save(diverging_image(values, valid, width, height)?, path)
}
