//! Dataset manifest (TOML) and the loaded, in-memory dataset.
//!
//! A manifest lists each catchment's rasters, the rainfall table, the
//! train/test split by rainfall pattern and the normalization constants.
//! Relative paths are resolved against the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::derive::derive_channels;
use super::normalize::Normalization;
use super::patches::PATCH_SIZE;
use super::rainfall::{read_rainfall_csv, split_patterns, write_rainfall_csv, RainfallPattern};
use super::raster::{Grid, Raster, TerrainRaster};
use super::synth::{synth_catchment, SYNTH_CELL_SIZE, SYNTH_PATTERNS};
use crate::error::{Error, Result};

/// Patch count the reference experiments cut from each catchment.
pub const DEFAULT_PATCHES_PER_CATCHMENT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub rainfall_table: PathBuf,
    #[serde(default = "default_patches")]
    pub patches_per_catchment: usize,
    #[serde(default)]
    pub patch_seed: u64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_patches() -> usize {
    DEFAULT_PATCHES_PER_CATCHMENT
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CatchmentPaths {
    /// Two-plane raster (DEM, mask) the terrain channels are derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elevation: Option<PathBuf>,
    /// Six-plane terrain raster.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terrain: Option<PathBuf>,
    /// Pattern id → ground-truth depth grid.
    #[serde(default)]
    pub depth: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: DatasetInfo,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    pub catchments: BTreeMap<String, CatchmentPaths>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(info: DatasetInfo, base_dir: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            dataset: info,
            split: Split::default(),
            normalization: None,
            catchments: BTreeMap::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn normalization(&self) -> Result<&Normalization> {
        self.normalization.as_ref().ok_or_else(|| {
            Error::config("manifest has no normalization constants; run `prepare` first")
        })
    }

    /// Checks the split invariants against the rainfall table.
    pub fn validate_split(&self, patterns: &[RainfallPattern]) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self.split.train.iter().chain(&self.split.test) {
            if !seen.insert(id) {
                return Err(Error::config(format!(
                    "pattern {id} appears twice in the split"
                )));
            }
            if !patterns.iter().any(|p| &p.id == id) {
                return Err(Error::config(format!("split names unknown pattern {id}")));
            }
        }
        if seen.len() != patterns.len() {
            return Err(Error::config(
                "train and test splits do not cover every rainfall pattern",
            ));
        }
        Ok(())
    }
}

fn missing(what: &str, path: &Path, e: Error) -> Error {
    match e {
        Error::Io { .. } => Error::config(format!("{what} {} is unavailable: {e}", path.display())),
        _ if !path.exists() => Error::config(format!("{what} {} does not exist", path.display())),
        other => other,
    }
}

/// Derives terrain channels where needed, splits rainfall patterns and fits
/// normalization constants on the training patterns. Terrain rasters are
/// written next to the manifest as `<catchment>_terrain.flr` unless a path
/// is already set.
pub fn prepare_dataset(manifest: &mut DatasetManifest, split_seed: u64) -> Result<()> {
    let table = manifest.resolve(&manifest.dataset.rainfall_table);
    let patterns = read_rainfall_csv(&table).map_err(|e| missing("rainfall table", &table, e))?;
    let (train, test) = split_patterns(&patterns, split_seed)?;
    manifest.dataset.split_seed = split_seed;
    manifest.split = Split { train, test };

    let ids: Vec<String> = manifest.catchments.keys().cloned().collect();
    let mut terrains = Vec::new();
    for id in &ids {
        let entry = manifest.catchments[id].clone();
        let terrain = match (&entry.elevation, &entry.terrain) {
            (Some(elev), _) => {
                let path = manifest.resolve(elev);
                let r = Raster::load(&path).map_err(|e| missing("elevation raster", &path, e))?;
                if r.channels != 2 {
                    return Err(Error::format(format!(
                        "{}: elevation raster needs 2 planes (dem, mask), found {}",
                        path.display(),
                        r.channels
                    )));
                }
                let t = derive_channels(r.plane(0), r.plane(1), r.width, r.height, r.cell_size)?;
                let rel = entry
                    .terrain
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(format!("{id}_terrain.flr")));
                t.save(manifest.resolve(&rel))?;
                manifest.catchments.get_mut(id).unwrap().terrain = Some(rel);
                t
            }
            (None, Some(tp)) => {
                let path = manifest.resolve(tp);
                TerrainRaster::load(&path).map_err(|e| missing("terrain raster", &path, e))?
            }
            (None, None) => {
                return Err(Error::config(format!(
                    "catchment {id} has neither elevation nor terrain"
                )))
            }
        };
        terrains.push(terrain);
    }

    let mut train_depths = Vec::new();
    for (ci, id) in ids.iter().enumerate() {
        for pid in &manifest.split.train {
            let rel = manifest.catchments[id].depth.get(pid).ok_or_else(|| {
                Error::config(format!(
                    "catchment {id} has no depth grid for pattern {pid}"
                ))
            })?;
            let path = manifest.resolve(rel);
            let g = Grid::load(&path).map_err(|e| missing("depth grid", &path, e))?;
            train_depths.push((ci, g));
        }
    }
    let train_patterns: Vec<&RainfallPattern> = patterns
        .iter()
        .filter(|p| manifest.split.train.contains(&p.id))
        .collect();
    let terrain_refs: Vec<&TerrainRaster> = terrains.iter().collect();
    let depth_refs: Vec<(usize, &Grid)> = train_depths.iter().map(|(i, g)| (*i, g)).collect();
    manifest.normalization = Some(Normalization::fit(
        &terrain_refs,
        &depth_refs,
        &train_patterns,
    )?);
    Ok(())
}

/// Shape of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOptions {
    pub seed: u64,
    /// Catchment side length in cells.
    pub size: usize,
    /// Training patches cut from the catchment per epoch.
    pub patches: usize,
    /// Number of rainfall patterns kept (at most [`SYNTH_PATTERNS`]).
    pub patterns: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            seed: 0,
            size: PATCH_SIZE,
            patches: 8,
            patterns: SYNTH_PATTERNS,
        }
    }
}

/// Writes a complete synthetic dataset (rasters, rainfall table, depth
/// grids, prepared manifest) into `dir` and returns the manifest path.
pub fn write_synth_dataset(dir: impl AsRef<Path>, opts: &SynthOptions) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if opts.patterns < 2 || opts.patterns > SYNTH_PATTERNS {
        return Err(Error::invalid(format!(
            "synthetic datasets hold 2..={SYNTH_PATTERNS} rainfall patterns, got {}",
            opts.patterns
        )));
    }
    if opts.patches == 0 {
        return Err(Error::invalid("synthetic datasets need at least one patch"));
    }
    let seed = opts.seed;
    fs::create_dir_all(dir.join("depth")).map_err(|e| Error::io(dir, e))?;
    let mut synth = synth_catchment(seed, opts.size)?;
    synth.patterns.truncate(opts.patterns);
    synth.depths.truncate(opts.patterns);
    synth.elevation.save(dir.join("synth_elevation.flr"))?;
    write_rainfall_csv(dir.join("rainfall.csv"), &synth.patterns)?;
    let mut depth = BTreeMap::new();
    for (p, g) in synth.patterns.iter().zip(&synth.depths) {
        let rel = PathBuf::from("depth").join(format!("synth_{}.flr", p.id));
        g.save(dir.join(&rel), SYNTH_CELL_SIZE)?;
        depth.insert(p.id.clone(), rel);
    }
    let mut manifest = DatasetManifest::new(
        DatasetInfo {
            rainfall_table: PathBuf::from("rainfall.csv"),
            patches_per_catchment: opts.patches,
            patch_seed: seed,
            split_seed: seed,
        },
        dir,
    );
    manifest.catchments.insert(
        "synth".into(),
        CatchmentPaths {
            elevation: Some(PathBuf::from("synth_elevation.flr")),
            terrain: None,
            depth,
        },
    );
    prepare_dataset(&mut manifest, seed)?;
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}

/// One catchment held in memory.
#[derive(Debug, Clone)]
pub struct Catchment {
    pub id: String,
    pub terrain: TerrainRaster,
    /// Pattern id → depth grid (meters).
    pub depths: BTreeMap<String, Grid>,
}

/// A manifest with every raster it references loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub patterns: Vec<RainfallPattern>,
    pub catchments: Vec<Catchment>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_manifest(DatasetManifest::load(manifest_path)?)
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let table = manifest.resolve(&manifest.dataset.rainfall_table);
        let patterns =
            read_rainfall_csv(&table).map_err(|e| missing("rainfall table", &table, e))?;
        manifest.validate_split(&patterns)?;
        manifest.normalization()?.validate()?;
        let mut catchments = Vec::new();
        for (id, entry) in &manifest.catchments {
            let rel = entry.terrain.as_ref().ok_or_else(|| {
                Error::config(format!(
                    "catchment {id} has no terrain raster; run `prepare`"
                ))
            })?;
            let path = manifest.resolve(rel);
            let terrain =
                TerrainRaster::load(&path).map_err(|e| missing("terrain raster", &path, e))?;
            let mut depths = BTreeMap::new();
            for (pid, rel) in &entry.depth {
                let path = manifest.resolve(rel);
                let g = Grid::load(&path).map_err(|e| missing("depth grid", &path, e))?;
                if g.width != terrain.width || g.height != terrain.height {
                    return Err(Error::config(format!(
                        "depth grid {} is not co-registered with catchment {id}",
                        path.display()
                    )));
                }
                depths.insert(pid.clone(), g);
            }
            catchments.push(Catchment {
                id: id.clone(),
                terrain,
                depths,
            });
        }
        if catchments.is_empty() {
            return Err(Error::config("manifest lists no catchments"));
        }
        Ok(Dataset {
            manifest,
            patterns,
            catchments,
        })
    }

    pub fn normalization(&self) -> &Normalization {
        self.manifest
            .normalization
            .as_ref()
            .expect("validated at load time")
    }

    pub fn pattern(&self, id: &str) -> Result<&RainfallPattern> {
        self.patterns
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::config(format!("unknown rainfall pattern {id}")))
    }

    pub fn split_ids(&self, split: SplitKind) -> &[String] {
        match split {
            SplitKind::Train => &self.manifest.split.train,
            SplitKind::Test => &self.manifest.split.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::invalid(format!(
                "split must be train or test, got {other}"
            ))),
        }
    }
}
