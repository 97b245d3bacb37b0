//! In-memory raster types and the `FLR1` binary raster format.
//!
//! Layout (all little-endian): `"FLR1"`, `u32 width`, `u32 height`,
//! `u32 channels`, `f32 cell_size`, `u32 reserved`, then
//! `channels × height × width` row-major `f32` samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FLR1";
pub const HEADER_LEN: usize = 24;

/// Number of planes in a terrain raster.
pub const TERRAIN_CHANNELS: usize = 6;

/// Terrain plane order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Dem = 0,
    Mask = 1,
    Slope = 2,
    CosAspect = 3,
    SinAspect = 4,
    Curvature = 5,
}

impl Channel {
    pub const ALL: [Channel; TERRAIN_CHANNELS] = [
        Channel::Dem,
        Channel::Mask,
        Channel::Slope,
        Channel::CosAspect,
        Channel::SinAspect,
        Channel::Curvature,
    ];
}

pub const MASK_EFFECTIVE: f32 = 1.0;
pub const MASK_NODATA: f32 = -1.0;

/// Value written into grid cells that carry no information (e.g. canvas
/// pixels that no patch covered).
pub const NODATA_VALUE: f32 = -9999.0;

/// A multi-plane raster exactly as stored in an `FLR1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub cell_size: f32,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        cell_size: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "raster {width}x{height}x{channels} needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            cell_size,
            data,
        })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&self.cell_size.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(format!(
                "raster header truncated ({} of {HEADER_LEN} bytes)",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format("bad raster magic (expected FLR1)"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let width = word(4) as usize;
        let height = word(8) as usize;
        let channels = word(12) as usize;
        let cell_size = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let samples = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::format("raster dimensions overflow"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != samples * 4 {
            return Err(Error::format(format!(
                "raster payload is {} bytes, header implies {}",
                payload.len(),
                samples * 4
            )));
        }
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::format("raster has a zero dimension"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Raster {
            width,
            height,
            channels,
            cell_size,
            data,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Raster::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// The 6-plane terrain input: DEM, mask, slope, cos/sin aspect, curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainRaster {
    pub width: usize,
    pub height: usize,
    pub cell_size: f32,
    pub data: Vec<f32>,
}

impl TerrainRaster {
    pub fn new(width: usize, height: usize, cell_size: f32, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * TERRAIN_CHANNELS {
            return Err(Error::invalid(format!(
                "terrain raster {width}x{height} needs {} samples, got {}",
                width * height * TERRAIN_CHANNELS,
                data.len()
            )));
        }
        Ok(TerrainRaster {
            width,
            height,
            cell_size,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, c: Channel) -> &[f32] {
        let n = self.pixels();
        &self.data[c as usize * n..(c as usize + 1) * n]
    }

    pub fn channel_mut(&mut self, c: Channel) -> &mut [f32] {
        let n = self.pixels();
        &mut self.data[c as usize * n..(c as usize + 1) * n]
    }

    pub fn mask(&self) -> &[f32] {
        self.channel(Channel::Mask)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let r = Raster::load(path)?;
        if r.channels != TERRAIN_CHANNELS {
            return Err(Error::format(format!(
                "{}: terrain raster must have {TERRAIN_CHANNELS} channels, header says {}",
                path.display(),
                r.channels
            )));
        }
        Ok(TerrainRaster {
            width: r.width,
            height: r.height,
            cell_size: r.cell_size,
            data: r.data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_raster().save(path)
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: TERRAIN_CHANNELS,
            cell_size: self.cell_size,
            data: self.data.clone(),
        }
    }
}

/// A single-plane grid, used for water depth in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "grid {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Grid {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let r = Raster::load(path)?;
        if r.channels != 1 {
            return Err(Error::format(format!(
                "{}: depth grid must have 1 channel, header says {}",
                path.display(),
                r.channels
            )));
        }
        Ok(Grid {
            width: r.width,
            height: r.height,
            data: r.data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, cell_size: f32) -> Result<()> {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            cell_size,
            data: self.data.clone(),
        }
        .save(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn save_load_round_trip_is_bit_exact(
            w in 1usize..9, h in 1usize..9, c in 1usize..4,
            cell in 0.1f32..50.0,
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let data: Vec<f32> = (0..w * h * c)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f32::from_bits((state >> 32) as u32)
                })
                .collect();
            let r = Raster::new(w, h, c, cell, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.flr");
            r.save(&path).unwrap();
            let back = Raster::load(&path).unwrap();
            prop_assert_eq!(back.to_bytes(), r.to_bytes());
        }
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let r = Raster::new(4, 4, 1, 1.0, vec![0.5; 16]).unwrap();
        let mut bytes = r.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Raster::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(
            Raster::from_bytes(&bytes[..10]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn trailing_bytes_are_a_format_error() {
        let mut bytes = Raster::new(2, 2, 1, 1.0, vec![0.0; 4]).unwrap().to_bytes();
        bytes.push(0);
        assert!(matches!(Raster::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn terrain_requires_six_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.flr");
        Raster::new(3, 3, 5, 1.0, vec![0.0; 45])
            .unwrap()
            .save(&path)
            .unwrap();
        assert!(matches!(TerrainRaster::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn header_is_24_bytes_with_magic() {
        let bytes = Raster::new(2, 3, 1, 2.5, vec![1.0; 6]).unwrap().to_bytes();
        assert_eq!(&bytes[..4], b"FLR1");
        assert_eq!(bytes.len(), 24 + 6 * 4);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2.5);
    }
}
