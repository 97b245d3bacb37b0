//! Terrain channel derivation from a DEM and its validity mask.
//!
//! Slope and aspect use Horn's weighted 3×3 finite differences; curvature
//! is the Zevenbergen–Thorne profile curvature. Rows grow southwards and
//! columns eastwards. Aspect is the azimuth of steepest descent measured
//! clockwise from north and is stored as its cosine (northward component)
//! and sine (eastward component). Flat cells carry `cos = sin = 0`.
//!
//! A derived value is only computed where the full 3×3 window lies inside
//! the raster and is effective; everywhere else it is 0.

use super::raster::{Channel, TerrainRaster, MASK_EFFECTIVE, MASK_NODATA, TERRAIN_CHANNELS};
use crate::error::{Error, Result};

/// Gradient magnitudes at or below this are treated as flat.
pub const FLAT_EPS: f64 = 1e-12;

/// The derived quantities at one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Derived {
    pub slope: f64,
    pub cos_aspect: f64,
    pub sin_aspect: f64,
    pub curvature: f64,
}

/// Horn slope/aspect and Zevenbergen–Thorne profile curvature for a 3×3
/// window given row-major as `z[0..9]` (north-west first).
pub fn window_terms(z: &[f64; 9], cell: f64) -> Derived {
    let dzdx = ((z[2] + 2.0 * z[5] + z[8]) - (z[0] + 2.0 * z[3] + z[6])) / (8.0 * cell);
    let dzdy_south = ((z[6] + 2.0 * z[7] + z[8]) - (z[0] + 2.0 * z[1] + z[2])) / (8.0 * cell);
    let slope = dzdx.hypot(dzdy_south);
    let (cos_aspect, sin_aspect) = if slope <= FLAT_EPS {
        (0.0, 0.0)
    } else {
        (dzdy_south / slope, -dzdx / slope)
    };

    let l2 = cell * cell;
    let d = ((z[3] + z[5]) / 2.0 - z[4]) / l2;
    let e = ((z[1] + z[7]) / 2.0 - z[4]) / l2;
    let f = (-z[0] + z[2] + z[6] - z[8]) / (4.0 * l2);
    let g = (z[5] - z[3]) / (2.0 * cell);
    let h = (z[1] - z[7]) / (2.0 * cell);
    let gh = g * g + h * h;
    let curvature = if gh <= FLAT_EPS * FLAT_EPS {
        0.0
    } else {
        -2.0 * (d * g * g + e * h * h + f * g * h) / gh
    };
    Derived {
        slope,
        cos_aspect,
        sin_aspect,
        curvature,
    }
}

/// Builds the 6-channel terrain raster from a DEM (meters) and a `{-1, 1}`
/// mask of the same shape.
pub fn derive_channels(
    dem: &[f32],
    mask: &[f32],
    width: usize,
    height: usize,
    cell_size: f32,
) -> Result<TerrainRaster> {
    let n = width * height;
    if dem.len() != n || mask.len() != n {
        return Err(Error::invalid(format!(
            "dem ({}) and mask ({}) must both have {width}x{height} = {n} cells",
            dem.len(),
            mask.len()
        )));
    }
    if cell_size <= 0.0 || !cell_size.is_finite() {
        return Err(Error::invalid(format!(
            "cell size must be positive, got {cell_size}"
        )));
    }
    if let Some(bad) = mask
        .iter()
        .find(|&&m| m != MASK_EFFECTIVE && m != MASK_NODATA)
    {
        return Err(Error::invalid(format!(
            "mask values must be -1 or 1, found {bad}"
        )));
    }

    let mut data = vec![0.0f32; n * TERRAIN_CHANNELS];
    data[..n].copy_from_slice(dem);
    data[n..2 * n].copy_from_slice(mask);
    let cell = cell_size as f64;
    let mut z = [0.0f64; 9];
    for r in 1..height.saturating_sub(1) {
        'pixel: for c in 1..width.saturating_sub(1) {
            for (k, slot) in z.iter_mut().enumerate() {
                let idx = (r + k / 3 - 1) * width + (c + k % 3 - 1);
                if mask[idx] != MASK_EFFECTIVE {
                    continue 'pixel;
                }
                *slot = dem[idx] as f64;
            }
            let d = window_terms(&z, cell);
            let idx = r * width + c;
            data[Channel::Slope as usize * n + idx] = d.slope as f32;
            data[Channel::CosAspect as usize * n + idx] = d.cos_aspect as f32;
            data[Channel::SinAspect as usize * n + idx] = d.sin_aspect as f32;
            data[Channel::Curvature as usize * n + idx] = d.curvature as f32;
        }
    }
    TerrainRaster::new(width, height, cell_size, data)
}
