//! Fixed-size patch extraction, inference tiling and mosaic stitching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::{Grid, TerrainRaster, NODATA_VALUE, TERRAIN_CHANNELS};
use crate::error::{Error, Result};

/// Side length of every patch fed to the networks.
pub const PATCH_SIZE: usize = 256;
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;

/// A 6×256×256 terrain window and its offset in the source raster.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainPatch {
    pub data: Vec<f32>,
    pub origin_row: usize,
    pub origin_col: usize,
}

/// A 1×256×256 water depth window (meters, or normalized units once
/// passed through [`super::Normalization`]).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPatch {
    pub data: Vec<f32>,
    pub origin_row: usize,
    pub origin_col: usize,
}

impl TerrainPatch {
    pub fn new(data: Vec<f32>, origin_row: usize, origin_col: usize) -> Result<Self> {
        if data.len() != TERRAIN_CHANNELS * PATCH_PIXELS {
            return Err(Error::invalid(format!(
                "terrain patch must hold 6x256x256 values, got {}",
                data.len()
            )));
        }
        Ok(TerrainPatch {
            data,
            origin_row,
            origin_col,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * PATCH_PIXELS..(c + 1) * PATCH_PIXELS]
    }

    pub fn mask(&self) -> &[f32] {
        self.channel(super::Channel::Mask as usize)
    }
}

impl DepthPatch {
    pub fn new(data: Vec<f32>, origin_row: usize, origin_col: usize) -> Result<Self> {
        if data.len() != PATCH_PIXELS {
            return Err(Error::invalid(format!(
                "depth patch must hold 256x256 values, got {}",
                data.len()
            )));
        }
        Ok(DepthPatch {
            data,
            origin_row,
            origin_col,
        })
    }
}

/// Copies a `PATCH_SIZE` window of every plane of `planes` (each
/// `width × height`) into `out`.
pub fn crop_planes(
    planes: &[f32],
    width: usize,
    height: usize,
    row: usize,
    col: usize,
    out: &mut Vec<f32>,
) {
    let n = width * height;
    debug_assert_eq!(planes.len() % n, 0);
    for plane in planes.chunks_exact(n) {
        for r in row..row + PATCH_SIZE {
            out.extend_from_slice(&plane[r * width + col..r * width + col + PATCH_SIZE]);
        }
    }
}

pub fn crop_terrain(raster: &TerrainRaster, row: usize, col: usize) -> TerrainPatch {
    let mut data = Vec::with_capacity(TERRAIN_CHANNELS * PATCH_PIXELS);
    crop_planes(
        &raster.data,
        raster.width,
        raster.height,
        row,
        col,
        &mut data,
    );
    TerrainPatch {
        data,
        origin_row: row,
        origin_col: col,
    }
}

pub fn crop_depth(grid: &Grid, row: usize, col: usize) -> DepthPatch {
    let mut data = Vec::with_capacity(PATCH_PIXELS);
    crop_planes(&grid.data, grid.width, grid.height, row, col, &mut data);
    DepthPatch {
        data,
        origin_row: row,
        origin_col: col,
    }
}

fn check_fits(width: usize, height: usize) -> Result<()> {
    if width < PATCH_SIZE || height < PATCH_SIZE {
        return Err(Error::invalid(format!(
            "raster {width}x{height} is smaller than a {PATCH_SIZE}x{PATCH_SIZE} patch"
        )));
    }
    Ok(())
}

/// `count` uniformly random top-left offsets (sampled with replacement),
/// deterministic in `seed`.
pub fn sample_offsets(
    width: usize,
    height: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    check_fits(width, height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            (
                rng.gen_range(0..=height - PATCH_SIZE),
                rng.gen_range(0..=width - PATCH_SIZE),
            )
        })
        .collect())
}

/// Cuts `count` co-registered terrain/depth patch pairs at random offsets.
pub fn extract_patches(
    raster: &TerrainRaster,
    depth: &Grid,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<(TerrainPatch, DepthPatch)>> {
    if depth.width != raster.width || depth.height != raster.height {
        return Err(Error::invalid(format!(
            "depth grid {}x{} is not co-registered with terrain {}x{}",
            depth.width, depth.height, raster.width, raster.height
        )));
    }
    let offsets = sample_offsets(raster.width, raster.height, count, rng_seed)?;
    Ok(offsets
        .into_iter()
        .map(|(r, c)| (crop_terrain(raster, r, c), crop_depth(depth, r, c)))
        .collect())
}

/// Offsets of a non-overlapping patch grid covering the whole raster; the
/// last row/column of patches is shifted back to sit flush with the border.
pub fn tile_origins(width: usize, height: usize) -> Result<Vec<(usize, usize)>> {
    check_fits(width, height)?;
    let axis = |len: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..len / PATCH_SIZE).map(|i| i * PATCH_SIZE).collect();
        if !len.is_multiple_of(PATCH_SIZE) {
            v.push(len - PATCH_SIZE);
        }
        v
    };
    let rows = axis(height);
    let cols = axis(width);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// A stitched mosaic. Pixels no patch touched hold [`NODATA_VALUE`] and are
/// `false` in `covered`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stitched {
    pub grid: Grid,
    pub covered: Vec<bool>,
}

/// Averages overlapping patches onto a `width × height` canvas.
pub fn stitch_patches(patches: &[DepthPatch], width: usize, height: usize) -> Result<Stitched> {
    let mut sum = vec![0.0f64; width * height];
    let mut count = vec![0u32; width * height];
    for p in patches {
        if p.data.len() != PATCH_PIXELS {
            return Err(Error::invalid("depth patch has the wrong size"));
        }
        if p.origin_row + PATCH_SIZE > height || p.origin_col + PATCH_SIZE > width {
            return Err(Error::invalid(format!(
                "patch at ({}, {}) does not fit a {width}x{height} canvas",
                p.origin_row, p.origin_col
            )));
        }
        for r in 0..PATCH_SIZE {
            let dst = (p.origin_row + r) * width + p.origin_col;
            for c in 0..PATCH_SIZE {
                sum[dst + c] += p.data[r * PATCH_SIZE + c] as f64;
                count[dst + c] += 1;
            }
        }
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| {
            if n == 0 {
                NODATA_VALUE
            } else {
                (s / n as f64) as f32
            }
        })
        .collect();
    Ok(Stitched {
        grid: Grid::new(width, height, data)?,
        covered: count.iter().map(|&n| n > 0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_raster(w: usize, h: usize) -> (TerrainRaster, Grid) {
        let data = (0..w * h * TERRAIN_CHANNELS).map(|i| i as f32).collect();
        let depth = (0..w * h).map(|i| (i % 977) as f32 * 0.01).collect();
        (
            TerrainRaster::new(w, h, 1.0, data).unwrap(),
            Grid::new(w, h, depth).unwrap(),
        )
    }

    #[test]
    fn extraction_is_deterministic_and_co_registered() {
        let (t, d) = ramp_raster(300, 280);
        let a = extract_patches(&t, &d, 5, 42).unwrap();
        let b = extract_patches(&t, &d, 5, 42).unwrap();
        assert_eq!(a, b);
        for (tp, dp) in &a {
            assert_eq!(
                (tp.origin_row, tp.origin_col),
                (dp.origin_row, dp.origin_col)
            );
            assert_eq!(tp.data.len(), 6 * PATCH_PIXELS);
            assert_eq!(dp.data[0], d.get(dp.origin_row, dp.origin_col));
            assert_eq!(
                tp.channel(0)[0],
                t.data[tp.origin_row * 300 + tp.origin_col]
            );
        }
    }

    #[test]
    fn zero_count_and_single_offset_cases() {
        let (t, d) = ramp_raster(256, 256);
        assert!(extract_patches(&t, &d, 0, 1).unwrap().is_empty());
        let three = extract_patches(&t, &d, 3, 1).unwrap();
        assert_eq!(three.len(), 3);
        assert!(three
            .iter()
            .all(|p| p == &three[0] && p.0.origin_row == 0 && p.0.origin_col == 0));
    }

    #[test]
    fn small_raster_is_rejected() {
        let (t, d) = ramp_raster(255, 300);
        assert!(matches!(
            extract_patches(&t, &d, 1, 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn two_overlapping_patches_average() {
        let a = DepthPatch::new(vec![1.0; PATCH_PIXELS], 0, 0).unwrap();
        let b = DepthPatch::new(vec![3.0; PATCH_PIXELS], 0, 0).unwrap();
        let s = stitch_patches(&[a, b], 256, 256).unwrap();
        assert!(s.grid.data.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn uncovered_pixels_are_flagged_and_out_of_bounds_rejected() {
        let a = DepthPatch::new(vec![1.0; PATCH_PIXELS], 0, 0).unwrap();
        let s = stitch_patches(std::slice::from_ref(&a), 300, 256).unwrap();
        assert!(!s.covered[299]);
        assert_eq!(s.grid.data[299], NODATA_VALUE);
        let mut far = a;
        far.origin_col = 100;
        assert!(stitch_patches(&[far], 300, 256).is_err());
    }

    #[test]
    fn tiling_then_stitching_reproduces_the_grid() {
        for (w, h) in [(512, 512), (300, 700), (256, 256)] {
            let (_, d) = ramp_raster(w, h);
            let tiles: Vec<DepthPatch> = tile_origins(w, h)
                .unwrap()
                .into_iter()
                .map(|(r, c)| crop_depth(&d, r, c))
                .collect();
            let s = stitch_patches(&tiles, w, h).unwrap();
            assert!(s.covered.iter().all(|&c| c));
            assert_eq!(s.grid, d);
        }
    }

    #[test]
    fn tile_origins_are_border_aligned() {
        let o = tile_origins(600, 256).unwrap();
        assert_eq!(o, vec![(0, 0), (0, 256), (0, 344)]);
    }
}
