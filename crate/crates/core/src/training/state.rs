use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::checkpoint::{self, add_store, take_store, Blobs};
use crate::discriminator::{self, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorConfig};
use crate::nn::{AdamState, ParamStore};
use crate::terrain_data::Normalization;

/// Discriminator weights draw from a different seed than the generator's.
const DISC_SEED_OFFSET: u64 = 0x0D15_C0DE;

/// Loss values logged for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: u32,
    pub step: u64,
    pub l_adv: f64,
    pub l_adv_g: f64,
    pub l_reg_r: f64,
    pub l_reg_f: f64,
    pub l_rec: f64,
    pub l_d: f64,
    pub l_g: f64,
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Global step count at the end of the epoch.
    pub step: u64,
    pub l_adv: f64,
    pub l_reg_r: f64,
    pub l_reg_f: f64,
    pub l_rec: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub mae: f64,
    pub r2: f64,
    pub csi: f64,
    pub area_ratio: f64,
}

/// Loss sums over the steps of the current epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub steps: u64,
    pub l_adv: f64,
    pub l_reg_r: f64,
    pub l_reg_f: f64,
    pub l_rec: f64,
    pub l_d: f64,
    pub l_g: f64,
}

impl RunningStats {
    pub fn add(&mut self, s: &StepLog) {
        self.steps += 1;
        self.l_adv += s.l_adv;
        self.l_reg_r += s.l_reg_r;
        self.l_reg_f += s.l_reg_f;
        self.l_rec += s.l_rec;
        self.l_d += s.l_d;
        self.l_g += s.l_g;
    }

    /// Epoch means, with NaN metrics until evaluation fills them in.
    pub fn record(&self, epoch: u32, step: u64) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        EpochRecord {
            epoch,
            step,
            l_adv: self.l_adv / n,
            l_reg_r: self.l_reg_r / n,
            l_reg_f: self.l_reg_f / n,
            l_rec: self.l_rec / n,
            l_d: self.l_d / n,
            l_g: self.l_g / n,
            mae: f64::NAN,
            r2: f64::NAN,
            csi: f64::NAN,
            area_ratio: f64::NAN,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator_config: GeneratorConfig,
    pub discriminator_config: DiscriminatorConfig,
    pub generator: ParamStore<f32>,
    pub discriminator: ParamStore<f32>,
    pub gen_opt: AdamState<f32>,
    pub disc_opt: AdamState<f32>,
    /// Root seed; the per-epoch data order derives from it and `epoch`.
    pub seed: u64,
    /// Current (0-based) epoch.
    pub epoch: u32,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
    pub step: u64,
    pub running: RunningStats,
    pub steps: Vec<StepLog>,
    pub history: Vec<EpochRecord>,
    pub normalization: Option<Normalization>,
}

impl TrainState {
    pub fn new(
        generator_config: GeneratorConfig,
        discriminator_config: DiscriminatorConfig,
        seed: u64,
    ) -> Result<Self> {
        let generator = generator::init_params(&generator_config, seed)?;
        let discriminator =
            discriminator::init_params(&discriminator_config, seed ^ DISC_SEED_OFFSET)?;
        Ok(TrainState {
            gen_opt: AdamState::new(&generator),
            disc_opt: AdamState::new(&discriminator),
            generator_config,
            discriminator_config,
            generator,
            discriminator,
            seed,
            epoch: 0,
            batch_in_epoch: 0,
            step: 0,
            running: RunningStats::default(),
            steps: Vec::new(),
            history: Vec::new(),
            normalization: None,
        })
    }

    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        Self::new(
            config.generator_config(),
            config.discriminator_config(),
            config.train.seed,
        )
    }

    /// Refuses to continue with different networks or seed.
    pub fn check_config(&self, config: &TrainConfig) -> Result<()> {
        if self.generator_config != config.generator_config() {
            return Err(Error::config(format!(
                "checkpoint generator {:?} does not match the configured {:?}",
                self.generator_config,
                config.generator_config()
            )));
        }
        if self.discriminator_config != config.discriminator_config() {
            return Err(Error::config(
                "checkpoint discriminator does not match the configuration",
            ));
        }
        if self.seed != config.train.seed {
            return Err(Error::config(format!(
                "checkpoint was trained with seed {}, configuration says {}",
                self.seed, config.train.seed
            )));
        }
        Ok(())
    }

    pub fn check_normalization(&self, norm: &Normalization) -> Result<()> {
        match &self.normalization {
            Some(n) if n != norm => Err(Error::config(
                "checkpoint was trained with different normalization constants than the manifest",
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Progress {
    seed: u64,
    epoch: u32,
    batch_in_epoch: usize,
    step: u64,
    gen_adam_steps: u64,
    disc_adam_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    progress: Progress,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<Normalization>,
    running: RunningStats,
    #[serde(default)]
    history: Vec<EpochRecord>,
    #[serde(default)]
    steps: Vec<StepLog>,
}

const GEN: &str = "gen/";
const DISC: &str = "disc/";
const GEN_M: &str = "opt/gen/m/";
const GEN_V: &str = "opt/gen/v/";
const DISC_M: &str = "opt/disc/m/";
const DISC_V: &str = "opt/disc/v/";

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let meta = Meta {
        progress: Progress {
            seed: state.seed,
            epoch: state.epoch,
            batch_in_epoch: state.batch_in_epoch,
            step: state.step,
            gen_adam_steps: state.gen_opt.t,
            disc_adam_steps: state.disc_opt.t,
        },
        generator: state.generator_config.clone(),
        discriminator: state.discriminator_config,
        normalization: state.normalization.clone(),
        running: state.running,
        history: state.history.clone(),
        steps: state.steps.clone(),
    };
    let mut blobs = Blobs::new();
    add_store(&mut blobs, GEN, &state.generator);
    add_store(&mut blobs, DISC, &state.discriminator);
    add_store(&mut blobs, GEN_M, &state.gen_opt.m);
    add_store(&mut blobs, GEN_V, &state.gen_opt.v);
    add_store(&mut blobs, DISC_M, &state.disc_opt.m);
    add_store(&mut blobs, DISC_V, &state.disc_opt.v);
    checkpoint::save(path.as_ref(), &meta, &blobs)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let (meta, mut blobs): (Meta, Blobs) = checkpoint::load(path)?;
    let gen_m = take_store(&mut blobs, GEN_M);
    let gen_v = take_store(&mut blobs, GEN_V);
    let disc_m = take_store(&mut blobs, DISC_M);
    let disc_v = take_store(&mut blobs, DISC_V);
    let generator = take_store(&mut blobs, GEN);
    let discriminator = take_store(&mut blobs, DISC);
    if let Some(name) = blobs.keys().next() {
        return Err(Error::format(format!(
            "{}: unexpected tensor {name}",
            path.display()
        )));
    }
    let schema = |e: Error| Error::config(format!("{}: {e}", path.display()));
    generator::check_params(&meta.generator, &generator).map_err(schema)?;
    generator::check_params(&meta.generator, &gen_m).map_err(schema)?;
    generator::check_params(&meta.generator, &gen_v).map_err(schema)?;
    discriminator::check_params(&meta.discriminator, &discriminator).map_err(schema)?;
    discriminator::check_params(&meta.discriminator, &disc_m).map_err(schema)?;
    discriminator::check_params(&meta.discriminator, &disc_v).map_err(schema)?;
    let p = meta.progress;
    Ok(TrainState {
        generator_config: meta.generator,
        discriminator_config: meta.discriminator,
        generator,
        discriminator,
        gen_opt: AdamState {
            m: gen_m,
            v: gen_v,
            t: p.gen_adam_steps,
        },
        disc_opt: AdamState {
            m: disc_m,
            v: disc_v,
            t: p.disc_adam_steps,
        },
        seed: p.seed,
        epoch: p.epoch,
        batch_in_epoch: p.batch_in_epoch,
        step: p.step,
        running: meta.running,
        steps: meta.steps,
        history: meta.history,
        normalization: meta.normalization,
    })
}

/// Loads a checkpoint and checks that it holds a generator of `expected`
/// shape.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    expected: &GeneratorConfig,
) -> Result<TrainState> {
    let state = load_checkpoint(path.as_ref())?;
    if &state.generator_config != expected {
        return Err(Error::config(format!(
            "{}: stored generator {:?} does not match the requested {:?}",
            path.as_ref().display(),
            state.generator_config,
            expected
        )));
    }
    Ok(state)
}
