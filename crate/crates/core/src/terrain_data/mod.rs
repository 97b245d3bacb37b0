//! Terrain, rainfall and depth data: file formats, channel derivation,
//! patching, normalization, synthetic catchments and dataset manifests.

mod dataset;
mod derive;
mod normalize;
mod patches;
mod rainfall;
mod raster;
mod synth;

pub use dataset::{
    prepare_dataset, write_synth_dataset, Catchment, CatchmentPaths, Dataset, DatasetInfo,
    DatasetManifest, Split, SplitKind, SynthOptions, DEFAULT_PATCHES_PER_CATCHMENT,
};
pub use derive::{derive_channels, window_terms, Derived, FLAT_EPS};
pub use normalize::Normalization;
pub use patches::{
    crop_depth, crop_planes, crop_terrain, extract_patches, sample_offsets, stitch_patches,
    tile_origins, DepthPatch, Stitched, TerrainPatch, PATCH_PIXELS, PATCH_SIZE,
};
pub use rainfall::{
    read_rainfall_csv, split_patterns, write_rainfall_csv, RainfallPattern, RAINFALL_LEN,
};
pub use raster::{
    Channel, Grid, Raster, TerrainRaster, MASK_EFFECTIVE, MASK_NODATA, NODATA_VALUE,
    TERRAIN_CHANNELS,
};
pub use synth::{
    depth_factor, rainfall_depth_mm, surrogate_depth, synth_catchment, synth_rainfall_patterns,
    value_noise, SynthCatchment, SYNTH_CELL_SIZE, SYNTH_PATTERNS,
};
