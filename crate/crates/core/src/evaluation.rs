//! Depth-map metrics, full-catchment evaluation and error-map rendering.
//!
//! Metrics are computed over effective (`mask = 1`) pixels of stitched
//! full-catchment maps in meters. MAE is reported in millimeters.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::render;
use crate::terrain_data::{
    crop_depth, crop_terrain, stitch_patches, tile_origins, Dataset, DepthPatch, Grid,
    Normalization, RainfallPattern, SplitKind, TerrainPatch, MASK_EFFECTIVE, PATCH_PIXELS,
};

/// Flood/no-flood threshold in meters.
pub const DEFAULT_THRESHOLD_M: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Mean absolute error in millimeters.
    pub mae: f64,
    pub r2: f64,
    pub csi: f64,
    /// Predicted over true flooded area.
    pub area_ratio: f64,
    pub n_pixels: usize,
    pub threshold_m: f64,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MAE {:.2} mm, R2 {:.2}%, CSI {:.3}, flooded area {:.1}% ({} px, threshold {} m)",
            self.mae,
            self.r2 * 100.0,
            self.csi,
            self.area_ratio * 100.0,
            self.n_pixels,
            self.threshold_m
        )
    }
}

/// Binarized agreement counts over effective pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub hits: usize,
    pub false_alarms: usize,
    pub misses: usize,
    pub correct_negatives: usize,
}

fn check_lengths(pred: &[f32], truth: &[f32], mask: &[f32]) -> Result<()> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::invalid(format!(
            "grids are not co-registered: {} predicted, {} true, {} mask values",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    Ok(())
}

fn effective<'a>(
    pred: &'a [f32],
    truth: &'a [f32],
    mask: &'a [f32],
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(truth)
        .zip(mask)
        .filter(|(_, &m)| m == MASK_EFFECTIVE)
        .map(|((&p, &t), _)| (p as f64, t as f64))
}

/// Mean `|pred − truth|` over effective pixels, in millimeters.
pub fn mae(pred: &[f32], truth: &[f32], mask: &[f32]) -> Result<f64> {
    check_lengths(pred, truth, mask)?;
    let (sum, n) = effective(pred, truth, mask)
        .fold((0.0, 0usize), |(s, n), (p, t)| (s + (p - t).abs(), n + 1));
    if n == 0 {
        return Err(Error::invalid("no effective pixels to compute MAE over"));
    }
    Ok(sum / n as f64 * 1000.0)
}

/// Coefficient of determination over effective pixels.
pub fn r2(pred: &[f32], truth: &[f32], mask: &[f32]) -> Result<f64> {
    check_lengths(pred, truth, mask)?;
    let (sum, n) =
        effective(pred, truth, mask).fold((0.0, 0usize), |(s, n), (_, t)| (s + t, n + 1));
    if n == 0 {
        return Err(Error::invalid("no effective pixels to compute R2 over"));
    }
    let mean = sum / n as f64;
    let (ss_res, ss_tot) = effective(pred, truth, mask).fold((0.0, 0.0), |(r, t0), (p, t)| {
        (r + (p - t) * (p - t), t0 + (t - mean) * (t - mean))
    });
    if ss_tot == 0.0 {
        return Err(Error::invalid(
            "true depth has zero variance over effective pixels",
        ));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Confusion counts after binarizing both maps at `depth > threshold_m`,
/// compared at the `f32` precision of the rasters.
pub fn confusion(pred: &[f32], truth: &[f32], mask: &[f32], threshold_m: f64) -> Result<Confusion> {
    check_lengths(pred, truth, mask)?;
    let th = threshold_m as f32 as f64;
    let mut c = Confusion::default();
    for (p, t) in effective(pred, truth, mask) {
        match (p > th, t > th) {
            (true, true) => c.hits += 1,
            (true, false) => c.false_alarms += 1,
            (false, true) => c.misses += 1,
            (false, false) => c.correct_negatives += 1,
        }
    }
    Ok(c)
}

/// Critical success index; 1 when neither map floods anywhere.
pub fn csi(pred: &[f32], truth: &[f32], mask: &[f32], threshold_m: f64) -> Result<f64> {
    let c = confusion(pred, truth, mask, threshold_m)?;
    let denom = c.hits + c.false_alarms + c.misses;
    Ok(if denom == 0 {
        1.0
    } else {
        c.hits as f64 / denom as f64
    })
}

/// Predicted flooded pixel count over the true flooded pixel count.
pub fn area_ratio(pred: &[f32], truth: &[f32], mask: &[f32], threshold_m: f64) -> Result<f64> {
    let c = confusion(pred, truth, mask, threshold_m)?;
    let truth_area = c.hits + c.misses;
    if truth_area == 0 {
        return Err(Error::invalid("true depth map has no flooded pixels"));
    }
    Ok((c.hits + c.false_alarms) as f64 / truth_area as f64)
}

/// All four metrics at once.
pub fn compute_metrics(
    pred: &[f32],
    truth: &[f32],
    mask: &[f32],
    threshold_m: f64,
) -> Result<MetricsReport> {
    let mae = mae(pred, truth, mask)?;
    let r2 = r2(pred, truth, mask)?;
    Ok(MetricsReport {
        mae,
        r2,
        csi: csi(pred, truth, mask, threshold_m)?,
        area_ratio: area_ratio(pred, truth, mask, threshold_m)?,
        n_pixels: mask.iter().filter(|&&m| m == MASK_EFFECTIVE).count(),
        threshold_m,
    })
}

/// One inference tile handed to a [`DepthModel`].
#[derive(Debug)]
pub struct Tile<'a> {
    pub catchment: &'a str,
    /// Rainfall in physical units.
    pub pattern: &'a RainfallPattern,
    /// Normalized terrain window.
    pub terrain: &'a TerrainPatch,
}

/// Anything that maps a tile to a depth patch in meters.
pub trait DepthModel {
    fn predict_tile(&self, tile: &Tile<'_>) -> Result<Vec<f32>>;
}

/// A trained generator plus the normalization it was trained with.
#[derive(Debug)]
pub struct GeneratorModel<'a> {
    pub generator: &'a Generator,
    pub normalization: &'a Normalization,
}

impl DepthModel for GeneratorModel<'_> {
    fn predict_tile(&self, tile: &Tile<'_>) -> Result<Vec<f32>> {
        let rain = self.normalization.normalize_rainfall(tile.pattern);
        let out = self.generator.predict_patch(tile.terrain, &rain)?;
        Ok(self.normalization.denormalize_depth(&out).data)
    }
}

/// Returns the ground truth for every tile.
#[derive(Debug)]
pub struct TruthModel<'a> {
    pub dataset: &'a Dataset,
}

impl DepthModel for TruthModel<'_> {
    fn predict_tile(&self, tile: &Tile<'_>) -> Result<Vec<f32>> {
        let c = self
            .dataset
            .catchments
            .iter()
            .find(|c| c.id == tile.catchment)
            .ok_or_else(|| Error::config(format!("unknown catchment {}", tile.catchment)))?;
        let grid = c
            .depths
            .get(&tile.pattern.id)
            .ok_or_else(|| missing_truth(&c.id, &tile.pattern.id))?;
        Ok(crop_depth(grid, tile.terrain.origin_row, tile.terrain.origin_col).data)
    }
}

/// Predicts zero depth everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroModel;

impl DepthModel for ZeroModel {
    fn predict_tile(&self, _tile: &Tile<'_>) -> Result<Vec<f32>> {
        Ok(vec![0.0; PATCH_PIXELS])
    }
}

fn missing_truth(catchment: &str, pattern: &str) -> Error {
    Error::config(format!(
        "catchment {catchment} has no depth grid for pattern {pattern}"
    ))
}

/// A stitched prediction for one catchment.
#[derive(Debug, Clone)]
pub struct CatchmentPrediction {
    pub catchment: String,
    pub predicted: Grid,
}

#[derive(Debug, Clone)]
pub struct PatternResult {
    pub pattern: String,
    pub metrics: MetricsReport,
    pub predictions: Vec<CatchmentPrediction>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub split: SplitKind,
    pub patterns: Vec<PatternResult>,
    /// Mean of each metric over patterns; `n_pixels` is the total.
    pub aggregate: MetricsReport,
}

/// Tiles every catchment, predicts each tile and stitches the results
/// into a full map in meters.
pub fn predict_catchment(
    model: &dyn DepthModel,
    catchment: &str,
    terrain_norm: &crate::terrain_data::TerrainRaster,
    pattern: &RainfallPattern,
) -> Result<Grid> {
    let mut tiles = Vec::new();
    for (row, col) in tile_origins(terrain_norm.width, terrain_norm.height)? {
        let terrain = crop_terrain(terrain_norm, row, col);
        let data = model.predict_tile(&Tile {
            catchment,
            pattern,
            terrain: &terrain,
        })?;
        tiles.push(DepthPatch::new(data, row, col)?);
    }
    Ok(stitch_patches(&tiles, terrain_norm.width, terrain_norm.height)?.grid)
}

/// Evaluates `model` on every rainfall pattern of `split`.
pub fn evaluate_model(
    model: &dyn DepthModel,
    dataset: &Dataset,
    split: SplitKind,
) -> Result<EvalReport> {
    let ids = dataset.split_ids(split);
    if ids.is_empty() {
        return Err(Error::config(format!(
            "the {split:?} split lists no rainfall patterns"
        )));
    }
    let norm = dataset.normalization();
    let normalized: Vec<_> = dataset
        .catchments
        .iter()
        .map(|c| norm.model_input(&c.terrain))
        .collect();
    let mut patterns = Vec::new();
    for pid in ids {
        let pattern = dataset.pattern(pid)?;
        let (mut pred, mut truth, mut mask) = (Vec::new(), Vec::new(), Vec::new());
        let mut predictions = Vec::new();
        for (c, terrain) in dataset.catchments.iter().zip(&normalized) {
            let grid = c.depths.get(pid).ok_or_else(|| missing_truth(&c.id, pid))?;
            let predicted = predict_catchment(model, &c.id, terrain, pattern)?;
            pred.extend_from_slice(&predicted.data);
            truth.extend_from_slice(&grid.data);
            mask.extend_from_slice(c.terrain.mask());
            predictions.push(CatchmentPrediction {
                catchment: c.id.clone(),
                predicted,
            });
        }
        patterns.push(PatternResult {
            pattern: pid.clone(),
            metrics: compute_metrics(&pred, &truth, &mask, DEFAULT_THRESHOLD_M)?,
            predictions,
        });
    }
    let n = patterns.len() as f64;
    let mean =
        |f: fn(&MetricsReport) -> f64| patterns.iter().map(|p| f(&p.metrics)).sum::<f64>() / n;
    let aggregate = MetricsReport {
        mae: mean(|m| m.mae),
        r2: mean(|m| m.r2),
        csi: mean(|m| m.csi),
        area_ratio: mean(|m| m.area_ratio),
        n_pixels: patterns.iter().map(|p| p.metrics.n_pixels).sum(),
        threshold_m: DEFAULT_THRESHOLD_M,
    };
    Ok(EvalReport {
        split,
        patterns,
        aggregate,
    })
}

/// Evaluates the generator stored in a training checkpoint.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset: &Dataset,
    split: SplitKind,
) -> Result<EvalReport> {
    let state = crate::training::load_checkpoint(checkpoint)?;
    state.check_normalization(dataset.normalization())?;
    let generator = Generator::from_params(state.generator_config.clone(), state.generator)?;
    let model = GeneratorModel {
        generator: &generator,
        normalization: dataset.normalization(),
    };
    evaluate_model(&model, dataset, split)
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    pattern: &'a str,
    mae_mm: f64,
    r2: f64,
    csi: f64,
    area_ratio: f64,
    n_pixels: usize,
    threshold_m: f64,
}

/// One CSV row per rainfall pattern.
pub fn write_metrics_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    for p in &report.patterns {
        let m = &p.metrics;
        w.serialize(MetricsRow {
            pattern: &p.pattern,
            mae_mm: m.mae,
            r2: m.r2,
            csi: m.csi,
            area_ratio: m.area_ratio,
            n_pixels: m.n_pixels,
            threshold_m: m.threshold_m,
        })
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Human-readable per-pattern and aggregate summary.
pub fn summary_text(report: &EvalReport) -> String {
    let mut s = format!(
        "{:?} split, {} patterns\n",
        report.split,
        report.patterns.len()
    );
    for p in &report.patterns {
        s.push_str(&format!("{}: {}\n", p.pattern, p.metrics));
    }
    s.push_str(&format!("mean: {}\n", report.aggregate));
    s
}

/// Writes `<stem>_truth.png`, `<stem>_pred.png` and `<stem>_error.png`
/// (signed `pred − truth`) into `dir`.
pub fn error_map(
    pred: &Grid,
    truth: &Grid,
    mask: &[f32],
    dir: &Path,
    stem: &str,
) -> Result<[PathBuf; 3]> {
    if pred.width != truth.width || pred.height != truth.height || mask.len() != truth.data.len() {
        return Err(Error::invalid(
            "prediction, truth and mask are not co-registered",
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (truth.width, truth.height);
    let valid: Vec<bool> = mask.iter().map(|&m| m == MASK_EFFECTIVE).collect();
    let hi = truth
        .data
        .iter()
        .chain(&pred.data)
        .zip(valid.iter().chain(&valid))
        .filter(|(_, &v)| v)
        .map(|(&d, _)| d as f64)
        .fold(0.0, f64::max);
    let error: Vec<f32> = pred
        .data
        .iter()
        .zip(&truth.data)
        .map(|(p, t)| p - t)
        .collect();
    let paths = [
        dir.join(format!("{stem}_truth.png")),
        dir.join(format!("{stem}_pred.png")),
        dir.join(format!("{stem}_error.png")),
    ];
    render::save_sequential(&paths[0], &truth.data, &valid, w, h, 0.0, hi)?;
    render::save_sequential(&paths[1], &pred.data, &valid, w, h, 0.0, hi)?;
    render::save_diverging(&paths[2], &error, &valid, w, h)?;
    Ok(paths)
}

/// Renders the triptych for every pattern and catchment of `report`.
pub fn write_error_maps(
    report: &EvalReport,
    dataset: &Dataset,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in &report.patterns {
        for cp in &p.predictions {
            let c = dataset
                .catchments
                .iter()
                .find(|c| c.id == cp.catchment)
                .ok_or_else(|| Error::config(format!("unknown catchment {}", cp.catchment)))?;
            let truth = c
                .depths
                .get(&p.pattern)
                .ok_or_else(|| missing_truth(&c.id, &p.pattern))?;
            let stem = format!("{}_{}", c.id, p.pattern);
            out.extend(error_map(
                &cp.predicted,
                truth,
                c.terrain.mask(),
                dir,
                &stem,
            )?);
        }
    }
    Ok(out)
}
