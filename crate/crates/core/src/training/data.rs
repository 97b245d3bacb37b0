use std::ops::ControlFlow;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::terrain_data::{
    crop_planes, sample_offsets, Channel, Dataset, Grid, RainfallPattern, TerrainRaster,
    MASK_EFFECTIVE, PATCH_PIXELS, PATCH_SIZE, RAINFALL_LEN, TERRAIN_CHANNELS,
};

/// Batches a background worker may run ahead by.
const QUEUE_DEPTH: usize = 2;

/// One normalized training example as network-ready tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, 6, S, S]`
    pub terrain: Tensor<f32>,
    /// `[1, 12]`
    pub rain: Tensor<f32>,
    /// `[1, 1, S, S]`
    pub depth: Tensor<f32>,
    /// `S·S` mask values (`1` effective, `-1` no-data).
    pub mask: Vec<f32>,
}

impl Sample {
    pub fn new(terrain: Tensor<f32>, rain: Tensor<f32>, depth: Tensor<f32>) -> Result<Self> {
        let (n, c, h, w) = terrain.dims4();
        if n != 1
            || c != TERRAIN_CHANNELS
            || rain.shape() != [1, RAINFALL_LEN]
            || depth.shape() != [1, 1, h, w]
        {
            return Err(Error::invalid(format!(
                "sample tensors have inconsistent shapes {:?}, {:?}, {:?}",
                terrain.shape(),
                rain.shape(),
                depth.shape()
            )));
        }
        let plane = h * w;
        let m = Channel::Mask as usize;
        let mask = terrain.data()[m * plane..(m + 1) * plane].to_vec();
        Ok(Sample {
            terrain,
            rain,
            depth,
            mask,
        })
    }

    /// Number of effective pixels.
    pub fn effective_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m == MASK_EFFECTIVE).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SampleRef {
    catchment: usize,
    row: usize,
    col: usize,
    pattern: usize,
}

struct Prepared {
    terrain: TerrainRaster,
    /// Normalized depth per training pattern, in `patterns` order.
    depths: Vec<Grid>,
}

/// The training split as a random-access sample collection: every random
/// patch of every catchment paired with every training rainfall pattern.
/// Patches are cut on demand.
pub struct TrainingSet {
    catchments: Vec<Prepared>,
    patterns: Vec<RainfallPattern>,
    index: Vec<SampleRef>,
}

impl TrainingSet {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let norm = dataset.normalization();
        let train = &dataset.manifest.split.train;
        if train.is_empty() {
            return Err(Error::config(
                "the training split lists no rainfall patterns",
            ));
        }
        let patterns: Vec<RainfallPattern> = train
            .iter()
            .map(|id| dataset.pattern(id).map(|p| norm.normalize_rainfall(p)))
            .collect::<Result<_>>()?;
        let info = &dataset.manifest.dataset;
        let mut catchments = Vec::new();
        let mut index = Vec::new();
        for (ci, c) in dataset.catchments.iter().enumerate() {
            let terrain = norm.model_input(&c.terrain);
            let depths = train
                .iter()
                .map(|id| {
                    c.depths
                        .get(id)
                        .map(|g| norm.normalize_grid(g))
                        .ok_or_else(|| {
                            Error::config(format!(
                                "catchment {} has no depth grid for pattern {id}",
                                c.id
                            ))
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            let seed = info.patch_seed.wrapping_add(ci as u64);
            let offsets = sample_offsets(
                c.terrain.width,
                c.terrain.height,
                info.patches_per_catchment,
                seed,
            )?;
            let mut skipped = 0;
            for (row, col) in offsets {
                if !window_has_effective(&c.terrain, row, col) {
                    skipped += 1;
                    continue;
                }
                for pattern in 0..patterns.len() {
                    index.push(SampleRef {
                        catchment: ci,
                        row,
                        col,
                        pattern,
                    });
                }
            }
            if skipped > 0 {
                log::debug!(
                    "catchment {}: skipped {skipped} patches without effective pixels",
                    c.id
                );
            }
            catchments.push(Prepared { terrain, depths });
        }
        if index.is_empty() {
            return Err(Error::config("no training patch contains effective pixels"));
        }
        Ok(TrainingSet {
            catchments,
            patterns,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        let r = self
            .index
            .get(i)
            .ok_or_else(|| Error::invalid(format!("sample {i} out of range")))?;
        let c = &self.catchments[r.catchment];
        let mut terrain = Vec::with_capacity(TERRAIN_CHANNELS * PATCH_PIXELS);
        crop_planes(
            &c.terrain.data,
            c.terrain.width,
            c.terrain.height,
            r.row,
            r.col,
            &mut terrain,
        );
        let depth_grid = &c.depths[r.pattern];
        let mut depth = Vec::with_capacity(PATCH_PIXELS);
        crop_planes(
            &depth_grid.data,
            depth_grid.width,
            depth_grid.height,
            r.row,
            r.col,
            &mut depth,
        );
        let s = PATCH_SIZE;
        Sample::new(
            Tensor::from_vec(&[1, TERRAIN_CHANNELS, s, s], terrain)?,
            Tensor::from_vec(&[1, RAINFALL_LEN], self.patterns[r.pattern].values.to_vec())?,
            Tensor::from_vec(&[1, 1, s, s], depth)?,
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Vec<Sample>> {
        indices.iter().map(|&i| self.sample(i)).collect()
    }
}

fn window_has_effective(t: &TerrainRaster, row: usize, col: usize) -> bool {
    let mask = t.mask();
    (row..row + PATCH_SIZE).any(|r| {
        mask[r * t.width + col..r * t.width + col + PATCH_SIZE]
            .contains(&MASK_EFFECTIVE)
    })
}

/// Sample order of one epoch, a seeded shuffle of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(epoch) + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Number of batches of size `batch` (the last one may be short).
pub fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Feeds batches `first..` of `order` to `f` in order. With more than one
/// worker, batches are cut on background threads (worker `k` handles
/// batches `k, k + workers, ...`) and handed over through bounded queues,
/// so the sequence seen by `f` is the same for any worker count.
pub fn for_each_batch<F>(
    set: &TrainingSet,
    order: &[usize],
    batch: usize,
    first: usize,
    workers: usize,
    mut f: F,
) -> Result<ControlFlow<()>>
where
    F: FnMut(usize, Vec<Sample>) -> Result<ControlFlow<()>>,
{
    let chunks: Vec<&[usize]> = order.chunks(batch).collect();
    if workers <= 1 {
        for (b, chunk) in chunks.iter().enumerate().skip(first) {
            if f(b, set.batch(chunk)?)?.is_break() {
                return Ok(ControlFlow::Break(()));
            }
        }
        return Ok(ControlFlow::Continue(()));
    }
    thread::scope(|scope| {
        let mut queues = Vec::with_capacity(workers);
        for k in 0..workers {
            let (tx, rx) = mpsc::sync_channel::<Result<Vec<Sample>>>(QUEUE_DEPTH);
            let chunks = &chunks;
            scope.spawn(move || {
                for chunk in chunks.iter().skip(first + k).step_by(workers) {
                    if tx.send(set.batch(chunk)).is_err() {
                        return;
                    }
                }
            });
            queues.push(rx);
        }
        let mut outcome = Ok(ControlFlow::Continue(()));
        for b in first..chunks.len() {
            let next = queues[(b - first) % workers]
                .recv()
                .map_err(|_| Error::Numerical("data loader thread stopped unexpectedly".into()))
                .and_then(|r| r)
                .and_then(|samples| f(b, samples));
            match next {
                Ok(ControlFlow::Continue(())) => {}
                other => {
                    outcome = other;
                    break;
                }
            }
        }
        // dropping the receivers unblocks any worker still sending
        drop(queues);
        outcome
    })
}
