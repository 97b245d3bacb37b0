//! Synthetic catchments for desk-scale runs: a value-noise DEM with an
//! irregular no-data region, 18 one-hour hyetographs, and a monotone
//! depth surrogate per hyetograph.
//!
//! The surrogate is `depth = factor(p) × total_rainfall / REFERENCE_TOTAL`
//! where `factor` is a rainfall-independent field built from D8 flow
//! accumulation and local depression depth, thresholded and smoothed.
//! Depth is therefore linear, and in particular monotone, in the total
//! rainfall at every pixel.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::derive::derive_channels;
use super::patches::PATCH_SIZE;
use super::rainfall::{RainfallPattern, RAINFALL_LEN};
use super::raster::{Grid, Raster, TerrainRaster, MASK_EFFECTIVE, MASK_NODATA};
use crate::error::{Error, Result};

pub const SYNTH_CELL_SIZE: f32 = 2.0;
pub const SYNTH_PATTERNS: usize = 18;
/// Rainfall depth (mm) at which the deepest pixel reaches 1 m.
const REFERENCE_TOTAL_MM: f32 = 40.0;

#[derive(Debug, Clone)]
pub struct SynthCatchment {
    /// 2 planes: DEM and mask.
    pub elevation: Raster,
    pub terrain: TerrainRaster,
    pub patterns: Vec<RainfallPattern>,
    /// One depth grid (meters) per entry of `patterns`.
    pub depths: Vec<Grid>,
}

impl SynthCatchment {
    pub fn depth_for(&self, pattern_id: &str) -> Option<&Grid> {
        self.patterns
            .iter()
            .position(|p| p.id == pattern_id)
            .map(|i| &self.depths[i])
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in roughly `[0, 1]`.
pub fn value_noise(
    size: usize,
    base_cell: usize,
    octaves: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amplitude = 1.0;
    let mut total_amp = 0.0;
    for o in 0..octaves {
        let cell = (base_cell >> o).max(2);
        let lattice = size / cell + 2;
        let values: Vec<f64> = (0..lattice * lattice).map(|_| rng.gen::<f64>()).collect();
        for r in 0..size {
            let fy = r as f64 / cell as f64;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for c in 0..size {
                let fx = c as f64 / cell as f64;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let v = |y: usize, x: usize| values[y * lattice + x];
                let top = v(y0, x0) * (1.0 - tx) + v(y0, x0 + 1) * tx;
                let bottom = v(y0 + 1, x0) * (1.0 - tx) + v(y0 + 1, x0 + 1) * tx;
                out[r * size + c] += amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total_amp += amplitude;
        amplitude *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total_amp);
    out
}

/// Box blur of radius `radius` restricted to effective cells.
fn masked_blur(field: &[f64], mask: &[bool], size: usize, radius: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for a in 0..size {
            for b in 0..size {
                let idx = |t: usize| {
                    if horizontal {
                        a * size + t
                    } else {
                        t * size + a
                    }
                };
                if !mask[idx(b)] {
                    continue;
                }
                let lo = b.saturating_sub(radius);
                let hi = (b + radius + 1).min(size);
                let (mut s, mut n) = (0.0, 0usize);
                for t in lo..hi {
                    if mask[idx(t)] {
                        s += src[idx(t)];
                        n += 1;
                    }
                }
                dst[idx(b)] = s / n as f64;
            }
        }
        dst
    };
    pass(&pass(field, true), false)
}

/// D8 flow accumulation (cells draining through each cell, itself
/// included) over effective cells.
fn flow_accumulation(dem: &[f64], mask: &[bool], size: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..size * size).filter(|&i| mask[i]).collect();
    order.sort_by(|&a, &b| {
        dem[b]
            .partial_cmp(&dem[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut acc: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    for &i in &order {
        let (r, c) = ((i / size) as isize, (i % size) as isize);
        let mut best: Option<(f64, usize)> = None;
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let (nr, nc) = (r + dr, c + dc);
                if (dr == 0 && dc == 0)
                    || nr < 0
                    || nc < 0
                    || nr >= size as isize
                    || nc >= size as isize
                {
                    continue;
                }
                let j = nr as usize * size + nc as usize;
                if !mask[j] {
                    continue;
                }
                let dist = if dr != 0 && dc != 0 {
                    std::f64::consts::SQRT_2
                } else {
                    1.0
                };
                let drop = (dem[i] - dem[j]) / dist;
                if drop > 0.0 && best.is_none_or(|(d, _)| drop > d) {
                    best = Some((drop, j));
                }
            }
        }
        if let Some((_, j)) = best {
            acc[j] += acc[i];
        }
    }
    acc
}

fn irregular_mask(size: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let s = size as f64;
    let (cy, cx) = match rng.gen_range(0..4) {
        0 => (0.0, rng.gen_range(0.0..s)),
        1 => (s - 1.0, rng.gen_range(0.0..s)),
        2 => (rng.gen_range(0.0..s), 0.0),
        _ => (rng.gen_range(0.0..s), s - 1.0),
    };
    let r0 = s * rng.gen_range(0.15..0.25);
    let harmonics: Vec<(f64, f64, f64)> = (0..3)
        .map(|k| {
            (
                (k + 2) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.05..0.2),
            )
        })
        .collect();
    (0..size * size)
        .map(|i| {
            let (dy, dx) = ((i / size) as f64 - cy, (i % size) as f64 - cx);
            let theta = dy.atan2(dx);
            let radius = r0
                * (1.0
                    + harmonics
                        .iter()
                        .map(|(k, ph, a)| a * (k * theta + ph).sin())
                        .sum::<f64>());
            dy.hypot(dx) >= radius
        })
        .collect()
}

/// Hyetographs (mm/h per 5-minute interval) with varied peak timing,
/// spread and volume.
pub fn synth_rainfall_patterns(seed: u64, count: usize) -> Vec<RainfallPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5241_494e);
    (0..count)
        .map(|i| {
            let peak_at = rng.gen_range(1.0..10.0f64);
            let spread = rng.gen_range(1.0..4.0f64);
            let peak = rng.gen_range(15.0..120.0f64);
            let base = rng.gen_range(0.0..4.0f64);
            let values: Vec<f32> = (0..RAINFALL_LEN)
                .map(|t| {
                    let z = (t as f64 - peak_at) / spread;
                    (base + peak * (-0.5 * z * z).exp()) as f32
                })
                .collect();
            RainfallPattern::new(format!("r{:02}", i + 1), &values)
                .expect("valid synthetic rainfall")
        })
        .collect()
}

/// Rainfall depth in millimetres accumulated over the hour.
pub fn rainfall_depth_mm(pattern: &RainfallPattern) -> f32 {
    pattern.total() * 5.0 / 60.0
}

/// Water depth (meters) for a pattern given the catchment's depth factor.
pub fn surrogate_depth(
    factor: &[f32],
    width: usize,
    height: usize,
    pattern: &RainfallPattern,
) -> Grid {
    let scale = rainfall_depth_mm(pattern) / REFERENCE_TOTAL_MM;
    Grid {
        width,
        height,
        data: factor.iter().map(|&f| f * scale).collect(),
    }
}

/// Rainfall-independent ponding factor in `[0, 1]`, zero on no-data.
pub fn depth_factor(dem: &[f64], mask: &[bool], size: usize) -> Vec<f32> {
    let acc = flow_accumulation(dem, mask, size);
    let regional = masked_blur(dem, mask, size, 12);
    let raw: Vec<f64> = (0..size * size)
        .map(|i| {
            if !mask[i] {
                return 0.0;
            }
            let depression = (regional[i] - dem[i]).max(0.0);
            0.15 * acc[i].ln_1p() + depression
        })
        .collect();
    let mut effective: Vec<f64> = raw
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    effective.sort_by(|a, b| a.total_cmp(b));
    let threshold = effective[(effective.len() * 7) / 10];
    let clipped: Vec<f64> = raw.iter().map(|&v| (v - threshold).max(0.0)).collect();
    let smooth = masked_blur(&clipped, mask, size, 2);
    let max = smooth.iter().cloned().fold(0.0, f64::max);
    smooth
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if m && max > 0.0 {
                (v / max) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Generates a square synthetic catchment of `size × size` cells.
pub fn synth_catchment(rng_seed: u64, size: usize) -> Result<SynthCatchment> {
    if size < PATCH_SIZE {
        return Err(Error::invalid(format!(
            "synthetic catchment must be at least {PATCH_SIZE} cells wide, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = value_noise(size, 64, 5, &mut rng);
    let tilt_dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let dem: Vec<f64> = noise
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let (r, c) = ((i / size) as f64, (i % size) as f64);
            let tilt = 0.01 * SYNTH_CELL_SIZE as f64 * (r * tilt_dir.sin() + c * tilt_dir.cos());
            400.0 + 30.0 * n + tilt
        })
        .collect();
    let mask = irregular_mask(size, &mut rng);

    let dem32: Vec<f32> = dem.iter().map(|&v| v as f32).collect();
    let mask32: Vec<f32> = mask
        .iter()
        .map(|&m| if m { MASK_EFFECTIVE } else { MASK_NODATA })
        .collect();
    let terrain = derive_channels(&dem32, &mask32, size, size, SYNTH_CELL_SIZE)?;
    let mut planes = dem32;
    planes.extend_from_slice(&mask32);
    let elevation = Raster::new(size, size, 2, SYNTH_CELL_SIZE, planes)?;

    let factor = depth_factor(&dem, &mask, size);
    let patterns = synth_rainfall_patterns(rng_seed, SYNTH_PATTERNS);
    let depths = patterns
        .iter()
        .map(|p| surrogate_depth(&factor, size, size, p))
        .collect();
    Ok(SynthCatchment {
        elevation,
        terrain,
        patterns,
        depths,
    })
}
