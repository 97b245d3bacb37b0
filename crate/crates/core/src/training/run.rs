use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::data::{batches_per_epoch, epoch_order, for_each_batch, TrainingSet};
use super::state::{load_checkpoint, save_checkpoint, EpochRecord, StepLog, TrainState};
use super::step::train_step;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, GeneratorModel};
use crate::generator::Generator;
use crate::terrain_data::{Dataset, SplitKind};

pub const CHECKPOINT_FILE: &str = "checkpoint.fgck";
pub const HISTORY_FILE: &str = "train_log.csv";
pub const STEPS_FILE: &str = "steps.csv";

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// The most recent checkpoint written.
    pub checkpoint: PathBuf,
    /// False when the run stopped at `max_steps` before the last epoch.
    pub completed: bool,
}

impl TrainOutcome {
    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }
}

/// Path of the numbered checkpoint written after `epoch` (1-based).
pub fn epoch_checkpoint(out_dir: &Path, epoch: u32) -> PathBuf {
    out_dir.join(format!("checkpoint_epoch{epoch:03}.fgck"))
}

/// Path of a mid-epoch checkpoint written after global step `step`.
pub fn step_checkpoint(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("checkpoint_step{step:06}.fgck"))
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    w.write_record(header)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const HISTORY_HEADER: [&str; 12] = [
    "epoch",
    "step",
    "l_adv",
    "l_reg_r",
    "l_reg_f",
    "l_rec",
    "l_d",
    "l_g",
    "mae",
    "r2",
    "csi",
    "area_ratio",
];
const STEPS_HEADER: [&str; 9] = [
    "epoch", "step", "l_adv", "l_adv_g", "l_reg_r", "l_reg_f", "l_rec", "l_d", "l_g",
];

/// Rewrites the per-epoch and per-step CSV logs from `state`.
pub fn write_logs(state: &TrainState, out_dir: &Path) -> Result<()> {
    write_csv::<EpochRecord>(&out_dir.join(HISTORY_FILE), &state.history, &HISTORY_HEADER)?;
    write_csv::<StepLog>(&out_dir.join(STEPS_FILE), &state.steps, &STEPS_HEADER)
}

fn checkpoint_and_log(
    state: &TrainState,
    out_dir: &Path,
    extra: Option<PathBuf>,
) -> Result<PathBuf> {
    let latest = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(state, &latest)?;
    if let Some(p) = extra {
        save_checkpoint(state, p)?;
    }
    write_logs(state, out_dir)?;
    Ok(latest)
}

fn evaluate_epoch(state: &TrainState, dataset: &Dataset, record: &mut EpochRecord) -> Result<()> {
    if dataset.split_ids(SplitKind::Test).is_empty() {
        return Ok(());
    }
    let generator =
        Generator::from_params(state.generator_config.clone(), state.generator.clone())?;
    let model = GeneratorModel {
        generator: &generator,
        normalization: dataset.normalization(),
    };
    match evaluate_model(&model, dataset, SplitKind::Test) {
        Ok(report) => {
            let m = report.aggregate;
            record.mae = m.mae;
            record.r2 = m.r2;
            record.csi = m.csi;
            record.area_ratio = m.area_ratio;
            log::info!("epoch {} held-out: {m}", record.epoch);
        }
        Err(e @ Error::InvalidInput(_)) => {
            log::warn!("epoch {}: metrics undefined: {e}", record.epoch)
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Trains from scratch, or from `resume` when given, until
/// `config.train.epochs` epochs (or `max_steps` global steps) are done.
/// Checkpoints, logs and the final state land in `config.train.out_dir`.
pub fn train_loop(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = config
        .train
        .manifest
        .as_ref()
        .ok_or_else(|| Error::config("no dataset manifest configured"))?;
    let dataset = Dataset::load(manifest)?;
    let set = TrainingSet::new(&dataset)?;
    let mut state = match resume {
        Some(path) => {
            let s = load_checkpoint(path)?;
            s.check_config(config)?;
            s.check_normalization(dataset.normalization())?;
            s
        }
        None => {
            let mut s = TrainState::from_config(config)?;
            s.normalization = Some(dataset.normalization().clone());
            s
        }
    };
    let out_dir = &config.train.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let batch = config.train.batch_size.min(set.len());
    let per_epoch = batches_per_epoch(set.len(), batch);
    let step_cfg = config.step_config();
    log::info!(
        "training on {} samples, batch {batch}, {per_epoch} steps per epoch, {} generator parameters",
        set.len(),
        state.generator.num_scalars()
    );
    let mut latest = out_dir.join(CHECKPOINT_FILE);
    let last_good = |p: &Path, e: Error| match e {
        Error::Numerical(m) => {
            Error::Numerical(format!("{m}; last good checkpoint: {}", p.display()))
        }
        other => other,
    };

    let mut epochs_run = 0;
    while state.epoch < config.train.epochs {
        let order = epoch_order(set.len(), state.seed, state.epoch);
        let first = state.batch_in_epoch;
        let flow = for_each_batch(
            &set,
            &order,
            batch,
            first,
            config.train.workers,
            |_, samples| {
                if config.train.max_steps.is_some_and(|m| state.step >= m) {
                    return Ok(ControlFlow::Break(()));
                }
                let log = train_step(&mut state, &samples, &step_cfg)
                    .map_err(|e| last_good(&latest, e))?;
                log::debug!(
                    "epoch {} step {}: l_d {:.6} l_g {:.6} l_rec {:.6}",
                    log.epoch,
                    log.step,
                    log.l_d,
                    log.l_g,
                    log.l_rec
                );
                state.running.add(&log);
                state.steps.push(log);
                state.batch_in_epoch += 1;
                let every = config.train.checkpoint_steps;
                if every > 0 && state.step % every == 0 && state.batch_in_epoch < per_epoch {
                    latest = checkpoint_and_log(
                        &state,
                        out_dir,
                        Some(step_checkpoint(out_dir, state.step)),
                    )?;
                }
                Ok(ControlFlow::Continue(()))
            },
        )?;
        if flow.is_break() {
            latest = checkpoint_and_log(&state, out_dir, None)?;
            log::info!("stopped at step {} (max_steps)", state.step);
            return Ok(TrainOutcome {
                state,
                checkpoint: latest,
                completed: false,
            });
        }
        let mut record = state.running.record(state.epoch + 1, state.step);
        if config.train.evaluate {
            evaluate_epoch(&state, &dataset, &mut record)?;
        }
        state.history.push(record);
        state.epoch += 1;
        state.batch_in_epoch = 0;
        state.running = Default::default();
        log::info!(
            "epoch {}/{}: l_rec {:.5} l_g {:.5} l_d {:.5}",
            state.epoch,
            config.train.epochs,
            record.l_rec,
            record.l_g,
            record.l_d
        );
        let numbered = (state.epoch % config.train.checkpoint_interval == 0
            || state.epoch == config.train.epochs)
            .then(|| epoch_checkpoint(out_dir, state.epoch));
        latest = checkpoint_and_log(&state, out_dir, numbered)?;
        epochs_run += 1;
    }
    if epochs_run == 0 {
        latest = checkpoint_and_log(&state, out_dir, None)?;
    }
    Ok(TrainOutcome {
        state,
        checkpoint: latest,
        completed: true,
    })
}
