//! Input/output scaling. Terrain channels are standardised (the mask is
//! passed through untouched), depths are divided by `depth_max` and clipped
//! to `[0, 1]`, rainfall is divided by `rainfall_max`.

use serde::{Deserialize, Serialize};

use super::patches::{DepthPatch, TerrainPatch, PATCH_PIXELS};
use super::rainfall::{RainfallPattern, RAINFALL_LEN};
use super::raster::{Channel, Grid, TerrainRaster, MASK_EFFECTIVE, TERRAIN_CHANNELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// meters
    pub depth_max: f32,
    pub rainfall_max: f32,
    pub terrain_mean: [f32; TERRAIN_CHANNELS],
    pub terrain_std: [f32; TERRAIN_CHANNELS],
}

impl Normalization {
    /// Fits the constants from training data only: terrain statistics over
    /// effective pixels of every catchment, depth and rainfall maxima over
    /// the training patterns. Each depth grid is paired with the index of
    /// the terrain (catchment) it belongs to.
    pub fn fit(
        terrains: &[&TerrainRaster],
        train_depths: &[(usize, &Grid)],
        train_patterns: &[&RainfallPattern],
    ) -> Result<Self> {
        let mut sum = [0.0f64; TERRAIN_CHANNELS];
        let mut sq = [0.0f64; TERRAIN_CHANNELS];
        let mut count = 0usize;
        for t in terrains {
            let mask = t.mask();
            for c in 0..TERRAIN_CHANNELS {
                let plane = t.channel(Channel::ALL[c]);
                for (v, m) in plane.iter().zip(mask) {
                    if *m == MASK_EFFECTIVE {
                        sum[c] += *v as f64;
                        sq[c] += (*v as f64).powi(2);
                    }
                }
            }
            count += mask.iter().filter(|&&m| m == MASK_EFFECTIVE).count();
        }
        if count == 0 {
            return Err(Error::invalid(
                "no effective terrain pixels to fit normalization",
            ));
        }
        let mut terrain_mean = [0.0f32; TERRAIN_CHANNELS];
        let mut terrain_std = [1.0f32; TERRAIN_CHANNELS];
        for c in 0..TERRAIN_CHANNELS {
            let mean = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - mean * mean).max(0.0);
            terrain_mean[c] = mean as f32;
            terrain_std[c] = var.sqrt() as f32;
        }
        terrain_mean[Channel::Mask as usize] = 0.0;
        terrain_std[Channel::Mask as usize] = 1.0;

        let mut depth_max = 0.0f32;
        for &(ti, g) in train_depths {
            let t = terrains.get(ti).ok_or_else(|| {
                Error::invalid(format!("depth grid refers to missing catchment {ti}"))
            })?;
            if g.width != t.width || g.height != t.height {
                return Err(Error::invalid(
                    "depth grid is not co-registered with its terrain",
                ));
            }
            for (d, m) in g.data.iter().zip(t.mask()) {
                if *m == MASK_EFFECTIVE {
                    depth_max = depth_max.max(*d);
                }
            }
        }
        let rainfall_max = train_patterns
            .iter()
            .flat_map(|p| p.values.iter().copied())
            .fold(0.0f32, f32::max);
        let norm = Normalization {
            depth_max,
            rainfall_max,
            terrain_mean,
            terrain_std,
        };
        norm.validate()?;
        Ok(norm.sanitized())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_max > 0.0 && self.depth_max.is_finite()) {
            return Err(Error::invalid(format!(
                "depth_max must be positive, got {}",
                self.depth_max
            )));
        }
        if !(self.rainfall_max > 0.0 && self.rainfall_max.is_finite()) {
            return Err(Error::invalid(format!(
                "rainfall_max must be positive, got {}",
                self.rainfall_max
            )));
        }
        if self
            .terrain_mean
            .iter()
            .chain(&self.terrain_std)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("terrain statistics must be finite"));
        }
        Ok(())
    }

    /// Replaces zero standard deviations with 1.
    pub fn sanitized(mut self) -> Self {
        for (c, s) in self.terrain_std.iter_mut().enumerate() {
            if *s <= 0.0 || !s.is_finite() {
                log::warn!("terrain channel {c} has zero spread; using std = 1");
                *s = 1.0;
            }
        }
        self
    }

    fn std_of(&self, c: usize) -> f32 {
        let s = self.terrain_std[c];
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    }

    /// Standardises terrain planes in place; `values` holds whole planes
    /// in channel order (any spatial size).
    pub fn normalize_terrain_values(&self, values: &mut [f32]) {
        let plane = values.len() / TERRAIN_CHANNELS;
        for (c, chunk) in values.chunks_mut(plane).enumerate() {
            if c == Channel::Mask as usize {
                continue;
            }
            let (m, s) = (self.terrain_mean[c], self.std_of(c));
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn denormalize_terrain_values(&self, values: &mut [f32]) {
        let plane = values.len() / TERRAIN_CHANNELS;
        for (c, chunk) in values.chunks_mut(plane).enumerate() {
            if c == Channel::Mask as usize {
                continue;
            }
            let (m, s) = (self.terrain_mean[c], self.std_of(c));
            for v in chunk {
                *v = *v * s + m;
            }
        }
    }

    pub fn normalize_terrain(&self, patch: &TerrainPatch) -> TerrainPatch {
        let mut out = patch.clone();
        self.normalize_terrain_values(&mut out.data);
        out
    }

    pub fn denormalize_terrain(&self, patch: &TerrainPatch) -> TerrainPatch {
        let mut out = patch.clone();
        self.denormalize_terrain_values(&mut out.data);
        out
    }

    pub fn normalize_raster(&self, raster: &TerrainRaster) -> TerrainRaster {
        let mut out = raster.clone();
        self.normalize_terrain_values(&mut out.data);
        out
    }

    /// Normalized raster as fed to the networks: like
    /// [`Self::normalize_raster`], with every non-mask channel zeroed on
    /// no-data pixels so fill values never reach a network.
    pub fn model_input(&self, raster: &TerrainRaster) -> TerrainRaster {
        let mut out = self.normalize_raster(raster);
        let n = out.pixels();
        let nodata: Vec<bool> = out.mask().iter().map(|&m| m != MASK_EFFECTIVE).collect();
        for (c, plane) in out.data.chunks_mut(n).enumerate() {
            if c == Channel::Mask as usize {
                continue;
            }
            for (v, &bad) in plane.iter_mut().zip(&nodata) {
                if bad {
                    *v = 0.0;
                }
            }
        }
        out
    }

    pub fn normalize_depth_value(&self, meters: f32) -> f32 {
        (meters / self.depth_max).clamp(0.0, 1.0)
    }

    pub fn denormalize_depth_value(&self, scaled: f32) -> f32 {
        scaled * self.depth_max
    }

    pub fn normalize_depth(&self, patch: &DepthPatch) -> DepthPatch {
        debug_assert_eq!(patch.data.len(), PATCH_PIXELS);
        DepthPatch {
            data: patch
                .data
                .iter()
                .map(|&v| self.normalize_depth_value(v))
                .collect(),
            ..*patch
        }
    }

    pub fn denormalize_depth(&self, patch: &DepthPatch) -> DepthPatch {
        DepthPatch {
            data: patch
                .data
                .iter()
                .map(|&v| self.denormalize_depth_value(v))
                .collect(),
            ..*patch
        }
    }

    pub fn normalize_grid(&self, grid: &Grid) -> Grid {
        Grid {
            width: grid.width,
            height: grid.height,
            data: grid
                .data
                .iter()
                .map(|&v| self.normalize_depth_value(v))
                .collect(),
        }
    }

    pub fn normalize_rainfall(&self, pattern: &RainfallPattern) -> RainfallPattern {
        let mut values = [0.0f32; RAINFALL_LEN];
        for (o, v) in values.iter_mut().zip(&pattern.values) {
            *o = v / self.rainfall_max;
        }
        RainfallPattern {
            id: pattern.id.clone(),
            values,
        }
    }

    pub fn denormalize_rainfall(&self, pattern: &RainfallPattern) -> RainfallPattern {
        let mut values = [0.0f32; RAINFALL_LEN];
        for (o, v) in values.iter_mut().zip(&pattern.values) {
            *o = v * self.rainfall_max;
        }
        RainfallPattern {
            id: pattern.id.clone(),
            values,
        }
    }
}
