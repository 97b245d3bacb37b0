//! `floodgen`: synthetic data, dataset preparation, training, evaluation,
//! tiled prediction and attention heatmaps.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use floodgen_core::evaluation::{
    evaluate_checkpoint, predict_catchment, summary_text, write_error_maps, write_metrics_csv,
    GeneratorModel,
};
use floodgen_core::generator::{visualize_attention, AttentionMode, Generator};
use floodgen_core::render;
use floodgen_core::terrain_data::{
    crop_depth, crop_terrain, prepare_dataset, tile_origins, write_synth_dataset, Dataset,
    DatasetManifest, SplitKind, SynthOptions, PATCH_SIZE, SYNTH_PATTERNS,
};
use floodgen_core::training::{load_checkpoint, train_loop, TrainConfig};
use floodgen_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "floodgen",
    version,
    about = "Terrain and rainfall conditioned flood depth generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic catchment, rainfall table, depth grids, a prepared
    /// manifest and a desk-scale training config.
    Synth(SynthArgs),
    /// Derive terrain channels, split rainfall patterns and fit
    /// normalization constants; updates the manifest in place.
    Prepare(PrepareArgs),
    /// Train the generator and discriminator.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split of the manifest.
    Eval(EvalArgs),
    /// Predict full-catchment depth rasters for one rainfall pattern.
    Predict(PredictArgs),
    /// Render the four encoder-level attention heatmaps for one patch.
    Attn(AttnArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Catchment side length in cells (at least 256).
    #[arg(long, default_value_t = PATCH_SIZE)]
    size: usize,
    /// Random training patches per catchment.
    #[arg(long, default_value_t = 8)]
    patches: usize,
    /// Rainfall patterns to keep (2 to 18).
    #[arg(long, default_value_t = SYNTH_PATTERNS)]
    patterns: usize,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Seed of the rainfall train/test split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Background data-loading threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Stop after this many global steps.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Disable hierarchical terrain attention.
    #[arg(long)]
    no_hta: bool,
    /// Disable the multi-scale rainfall embedding.
    #[arg(long)]
    no_mre: bool,
    /// Disable the discriminator (supervised L1 only); implies --no-reg.
    #[arg(long)]
    no_gan: bool,
    /// Disable the rainfall regression losses.
    #[arg(long)]
    no_reg: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Directory for metrics.csv, summary.txt and error maps.
    #[arg(long)]
    out: PathBuf,
    /// Skip rendering error maps.
    #[arg(long)]
    no_maps: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Rainfall pattern id from the manifest's rainfall table.
    #[arg(long)]
    pattern: String,
    /// Directory receiving one `<catchment>_<pattern>.flr` raster per
    /// catchment.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Index of the inference tile (catchments in manifest order).
    #[arg(long)]
    patch: usize,
    /// Rainfall pattern id; defaults to the first held-out pattern.
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long, default_value = "raw", value_parser = ["raw", "grad_cam"])]
    mode: String,
    #[arg(long)]
    out: PathBuf,
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let manifest = write_synth_dataset(
        &a.out,
        &SynthOptions {
            seed: a.seed,
            size: a.size,
            patches: a.patches,
            patterns: a.patterns,
        },
    )?;
    let mut cfg = TrainConfig::desk();
    cfg.train.seed = a.seed;
    cfg.train.manifest = Some(PathBuf::from("manifest.toml"));
    cfg.train.out_dir = PathBuf::from("run");
    let cfg_path = a.out.join("train.toml");
    cfg.save(&cfg_path)?;
    println!("wrote {} and {}", manifest.display(), cfg_path.display());
    Ok(())
}

fn prepare(a: &PrepareArgs) -> anyhow::Result<()> {
    let mut m = DatasetManifest::load(&a.manifest)?;
    prepare_dataset(&mut m, a.seed)?;
    m.save(&a.manifest)?;
    let n = m.normalization()?;
    println!(
        "split {} train / {} test patterns; depth_max {} m, rainfall_max {}",
        m.split.train.len(),
        m.split.test.len(),
        n.depth_max,
        n.rainfall_max
    );
    Ok(())
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = &a.manifest {
        cfg.train.manifest = Some(m.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = &a.out {
        cfg.train.out_dir = o.clone();
    }
    if let Some(w) = a.workers {
        cfg.train.workers = w;
    }
    if a.max_steps.is_some() {
        cfg.train.max_steps = a.max_steps;
    }
    if a.no_hta {
        cfg.ablation.use_hta = false;
    }
    if a.no_mre {
        cfg.ablation.use_mre = false;
    }
    if a.no_gan {
        cfg.ablation.use_gan = false;
        cfg.ablation.use_reg = false;
    }
    if a.no_reg {
        cfg.ablation.use_reg = false;
    }
    cfg.validate()?;
    let outcome = train_loop(&cfg, a.checkpoint.as_deref())?;
    let s = &outcome.state;
    println!(
        "{} after {} steps ({} epochs); checkpoint {}",
        if outcome.completed {
            "finished"
        } else {
            "stopped"
        },
        s.step,
        s.epoch,
        outcome.checkpoint.display()
    );
    if let Some(r) = s.history.last() {
        println!(
            "last epoch: l_rec {:.5}, l_g {:.5}, l_d {:.5}, MAE {:.2} mm, R2 {:.4}, CSI {:.4}, area ratio {:.4}",
            r.l_rec, r.l_g, r.l_d, r.mae, r.r2, r.csi, r.area_ratio
        );
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let split: SplitKind = a.split.parse()?;
    let dataset = Dataset::load(&a.manifest)?;
    let report = evaluate_checkpoint(&a.checkpoint, &dataset, split)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_metrics_csv(&a.out.join("metrics.csv"), &report)?;
    let summary = summary_text(&report);
    fs::write(a.out.join("summary.txt"), &summary)
        .with_context(|| format!("writing summary in {}", a.out.display()))?;
    if !a.no_maps {
        write_error_maps(&report, &dataset, &a.out.join("maps"))?;
    }
    print!("{summary}");
    Ok(())
}

fn load_generator(checkpoint: &Path, dataset: &Dataset) -> anyhow::Result<Generator> {
    let state = load_checkpoint(checkpoint)?;
    state.check_normalization(dataset.normalization())?;
    Ok(Generator::from_params(
        state.generator_config,
        state.generator,
    )?)
}

fn predict(a: &PredictArgs) -> anyhow::Result<()> {
    let dataset = Dataset::load(&a.manifest)?;
    let pattern = dataset.pattern(&a.pattern)?.clone();
    let generator = load_generator(&a.checkpoint, &dataset)?;
    let norm = dataset.normalization();
    let model = GeneratorModel {
        generator: &generator,
        normalization: norm,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for c in &dataset.catchments {
        let grid = predict_catchment(&model, &c.id, &norm.model_input(&c.terrain), &pattern)?;
        let path = a.out.join(format!("{}_{}.flr", c.id, pattern.id));
        grid.save(&path, c.terrain.cell_size)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn attn(a: &AttnArgs) -> anyhow::Result<()> {
    let mode: AttentionMode = a.mode.parse()?;
    let dataset = Dataset::load(&a.manifest)?;
    let pattern_id = match &a.pattern {
        Some(p) => p.clone(),
        None => dataset
            .split_ids(SplitKind::Test)
            .first()
            .or_else(|| dataset.patterns.first().map(|p| &p.id))
            .cloned()
            .ok_or_else(|| anyhow!("the manifest lists no rainfall patterns"))?,
    };
    let pattern = dataset.pattern(&pattern_id)?.clone();
    let mut tiles = Vec::new();
    for (ci, c) in dataset.catchments.iter().enumerate() {
        for origin in tile_origins(c.terrain.width, c.terrain.height)? {
            tiles.push((ci, origin));
        }
    }
    let &(ci, (row, col)) = tiles.get(a.patch).ok_or_else(|| {
        Error::InvalidInput(format!(
            "patch {} out of range: the manifest has {} tiles",
            a.patch,
            tiles.len()
        ))
    })?;
    let generator = load_generator(&a.checkpoint, &dataset)?;
    let norm = dataset.normalization();
    let c = &dataset.catchments[ci];
    let terrain = crop_terrain(&norm.model_input(&c.terrain), row, col);
    let truth = c
        .depths
        .get(&pattern.id)
        .map(|g| norm.normalize_depth(&crop_depth(g, row, col)));
    let maps = visualize_attention(
        &generator,
        &terrain,
        &norm.normalize_rainfall(&pattern),
        truth.as_ref(),
        mode,
    )?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let valid = vec![true; PATCH_SIZE * PATCH_SIZE];
    for m in &maps {
        let path = a
            .out
            .join(format!("attn_{}_layer{}.png", a.mode, m.level + 1));
        render::save_sequential(&path, &m.data, &valid, m.size, m.size, 0.0, 1.0)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn dispatch(cmd: &Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Attn(a) => attn(a),
    }
}

/// 1 for mistakes in arguments, files or configuration, 2 for failures
/// of the computation itself.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if !e.is_user_error() => 2,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 1,
        None => 2,
    }
}

fn run(argv: impl IntoIterator<Item = OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn main() -> ExitCode {
    let filter = std::env::var("FLOODGEN_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&filter)
        .format_target(false)
        .init();
    run(std::env::args_os())
}
