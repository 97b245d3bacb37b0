//! Terrain- and rainfall-conditioned flood depth generation: data
//! pipeline, generator and discriminator networks, losses, training and
//! evaluation.

pub mod autograd;
pub mod checkpoint;
mod conv;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod render;
pub mod tensor;
pub mod terrain_data;
pub mod training;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, MetricsReport};
pub use generator::{Generator, GeneratorConfig};
pub use losses::{LossComponents, LossWeights};
pub use tensor::Tensor;
pub use terrain_data::{
    Dataset, DatasetManifest, DepthPatch, Grid, RainfallPattern, TerrainPatch, TerrainRaster,
};
pub use training::{TrainConfig, TrainState};
