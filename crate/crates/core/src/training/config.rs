use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::nn::Adam;
use crate::terrain_data::PATCH_SIZE;

/// Full training configuration, read from a TOML file with `[train]`,
/// `[losses]`, `[ablation]` and `[model]` sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub losses: LossWeights,
    pub ablation: Ablation,
    pub model: ModelSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Capped at the number of training samples.
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
    /// Epochs between numbered checkpoints.
    pub checkpoint_interval: u32,
    /// Steps between mid-epoch checkpoints; 0 disables them.
    pub checkpoint_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Background loader threads; 0 or 1 loads synchronously.
    pub workers: usize,
    /// Stop (with a checkpoint) once this many global steps have run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    /// Evaluate on the held-out patterns after every epoch.
    pub evaluate: bool,
    /// Memory (MiB) for keeping generator graphs alive between the
    /// discriminator and generator updates instead of recomputing them.
    pub graph_cache_mib: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 32,
            epochs: 80,
            seed: 0,
            checkpoint_interval: 1,
            checkpoint_steps: 0,
            manifest: None,
            out_dir: PathBuf::from("runs/floodgen"),
            workers: 0,
            max_steps: None,
            evaluate: true,
            graph_cache_mib: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_hta: bool,
    pub use_mre: bool,
    pub use_gan: bool,
    /// Rainfall regression terms; needs `use_gan`.
    pub use_reg: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_hta: true,
            use_mre: true,
            use_gan: true,
            use_reg: true,
        }
    }
}

impl Ablation {
    /// The six ablation rows, from the plain U-Net to the full model.
    pub fn table() -> [(&'static str, Ablation); 6] {
        let row = |use_hta, use_mre, use_gan, use_reg| Ablation {
            use_hta,
            use_mre,
            use_gan,
            use_reg,
        };
        [
            ("Base", row(false, false, false, false)),
            ("+HTA", row(true, false, false, false)),
            ("+MRE", row(false, true, false, false)),
            ("+HTA+MRE", row(true, true, false, false)),
            ("+HTA+MRE+L_gan", row(true, true, true, false)),
            ("+HTA+MRE+L_gan+L_reg", row(true, true, true, true)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_channels: Vec<usize>,
    pub rainfall_embed_channels: usize,
    pub disc_base_width: usize,
    pub disc_n_down: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let d = DiscriminatorConfig::default();
        ModelSection {
            encoder_channels: g.encoder_channels,
            rainfall_embed_channels: g.rainfall_embed_channels,
            disc_base_width: d.base_width,
            disc_n_down: d.n_down,
        }
    }
}

impl ModelSection {
    /// Narrow networks for CPU-scale runs.
    pub fn desk() -> Self {
        ModelSection {
            encoder_channels: vec![4, 8, 16, 32],
            rainfall_embed_channels: 4,
            disc_base_width: 8,
            disc_n_down: 3,
        }
    }
}

impl TrainConfig {
    /// Default optimization settings with [`ModelSection::desk`] networks.
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelSection::desk(),
            ..Default::default()
        }
    }

    /// Reads a config file; relative `manifest` and `out_dir` paths are
    /// resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &cfg.train.manifest {
            cfg.train.manifest = Some(base.join(m));
        }
        cfg.train.out_dir = base.join(&cfg.train.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if t.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if t.checkpoint_interval == 0 {
            return Err(Error::config("checkpoint_interval must be at least 1"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                t.learning_rate
            )));
        }
        for (name, b) in [("beta1", t.beta1), ("beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.ablation.use_reg && !self.ablation.use_gan {
            return Err(Error::config(
                "use_reg requires use_gan (the regression head lives on the discriminator)",
            ));
        }
        self.losses
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        self.generator_config()
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        self.discriminator_config()
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            encoder_channels: self.model.encoder_channels.clone(),
            rainfall_embed_channels: self.model.rainfall_embed_channels,
            use_hta: self.ablation.use_hta,
            use_mre: self.ablation.use_mre,
            patch_size: PATCH_SIZE,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_width: self.model.disc_base_width,
            n_down: self.model.disc_n_down,
        }
    }

    pub fn adam(&self) -> Adam {
        Adam {
            lr: self.train.learning_rate,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            ..Adam::default()
        }
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            adam: self.adam(),
            weights: self.losses,
            use_gan: self.ablation.use_gan,
            use_reg: self.ablation.use_reg,
            graph_cache_scalars: self.train.graph_cache_mib * (1 << 20)
                / std::mem::size_of::<f32>(),
        }
    }
}

/// What a single [`super::train_step`] needs beyond the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub adam: Adam,
    pub weights: LossWeights,
    pub use_gan: bool,
    pub use_reg: bool,
    /// Upper bound on scalars held by cached generator graphs.
    pub graph_cache_scalars: usize,
}

impl StepConfig {
    pub fn lambda_adv(&self) -> f64 {
        if self.use_gan {
            self.weights.lambda_adv
        } else {
            0.0
        }
    }

    pub fn lambda_reg(&self) -> f64 {
        if self.use_gan && self.use_reg {
            self.weights.lambda_reg
        } else {
            0.0
        }
    }

    /// Whether the discriminator takes part at all.
    pub fn uses_discriminator(&self) -> bool {
        self.lambda_adv() > 0.0 || self.lambda_reg() > 0.0
    }

    /// The loss weights actually in effect.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda_adv: self.lambda_adv(),
            lambda_reg: self.lambda_reg(),
            lambda_rec: self.weights.lambda_rec,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.train.learning_rate, 2e-4);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.epochs, 80);
        assert_eq!((c.train.beta1, c.train.beta2), (0.5, 0.999));
        assert_eq!(c.losses, LossWeights::default());
        c.validate().unwrap();
    }

    #[test]
    fn invariants_are_enforced() {
        let mut c = TrainConfig::desk();
        c.train.batch_size = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::desk();
        c.train.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.ablation.use_gan = false;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.ablation.use_reg = false;
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig::desk();
        let text = c.to_toml().unwrap();
        assert!(text.contains("[ablation]") && text.contains("[model]"));
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<TrainConfig>("[train]\nbogus = 1\n").is_err());
        let partial: TrainConfig = toml::from_str("[train]\nepochs = 3\n").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.train.batch_size, 32);
    }

    #[test]
    fn ablation_table_is_consistent() {
        let rows = Ablation::table();
        assert_eq!(
            rows[0].1,
            Ablation {
                use_hta: false,
                use_mre: false,
                use_gan: false,
                use_reg: false
            }
        );
        assert_eq!(rows[5].1, Ablation::default());
        for (_, a) in rows {
            assert!(!a.use_reg || a.use_gan);
        }
    }
}
