use crate::autoencoder::{default_latent_dim, AutoencoderConfig};
use crate::corpus::SelectorSpec;
use crate::diffusion::{DenoiserConfig, NoiseSchedule, DEFAULT_BETA_1, DEFAULT_BETA_T, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::novelty::NoiseScaleMode;
use crate::optim::OptimizerKind;
use crate::rng::derive_seed;
use crate::tasks::{Architecture, DatasetKind, DatasetSpec, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

// no deny_unknown_fields here: serde does not support it together with flatten
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub n_samples: usize,
    pub n_classes: usize,
    #[serde(default = "half")]
    pub val_fraction: f64,
    /// Fixed dataset seed; derived from the global seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn half() -> f64 {
    0.5
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianBlobs {
                dim: 16,
                separation: 3.0,
                noise_std: 1.0,
            },
            n_samples: 800,
            n_classes: 4,
            val_fraction: 0.5,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Hidden widths of the MLP; ignored by the conv net.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 16]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::MlpMiniS,
            hidden: default_hidden(),
        }
    }
}

/// Training recipe for the original models. Learning rates and weight
/// decay left unset take per-optimizer defaults (see [`TrainSection::resolve`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "sgd")]
    pub optimizer: OptimizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default = "momentum")]
    pub momentum: f64,
    #[serde(default = "epochs")]
    pub epochs: usize,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_lr: Option<f64>,
    #[serde(default = "steps")]
    pub finetune_steps: usize,
}

fn sgd() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn momentum() -> f64 {
    0.9
}
fn epochs() -> usize {
    20
}
fn batch() -> usize {
    32
}
fn steps() -> usize {
    300
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            optimizer: sgd(),
            lr: None,
            weight_decay: None,
            momentum: momentum(),
            epochs: epochs(),
            batch_size: batch(),
            finetune_lr: None,
            finetune_steps: steps(),
        }
    }
}

impl TrainSection {
    /// `(train lr, fine-tune lr)` defaults: SGD 0.1 / 0.1, Adam(W) 0.01 / 0.003.
    pub fn default_lrs(kind: OptimizerKind) -> (f64, f64) {
        match kind {
            OptimizerKind::Sgd => (0.1, 0.1),
            OptimizerKind::Adam | OptimizerKind::AdamW => (0.01, 0.003),
        }
    }

    /// Decoupled decay 5e-4 for AdamW; SGD and Adam default to none.
    pub fn default_weight_decay(kind: OptimizerKind) -> f64 {
        match kind {
            OptimizerKind::AdamW => 5e-4,
            OptimizerKind::Sgd | OptimizerKind::Adam => 0.0,
        }
    }

    pub fn resolve(&self, seed: u64) -> TrainConfig {
        let (lr, ft) = Self::default_lrs(self.optimizer);
        TrainConfig {
            optimizer: self.optimizer,
            lr: self.lr.unwrap_or(lr),
            weight_decay: self.weight_decay.unwrap_or(Self::default_weight_decay(self.optimizer)),
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            finetune_lr: self.finetune_lr.unwrap_or(ft),
            finetune_steps: self.finetune_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default = "ae_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "sigma_v")]
    pub sigma_v: f64,
    #[serde(default = "sigma_z")]
    pub sigma_z: f64,
    #[serde(default = "ae_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "ae_iterations")]
    pub iterations: usize,
    #[serde(default = "fifty")]
    pub batch_size: usize,
}

fn ae_channels() -> Vec<usize> {
    vec![8, 16, 32, 32, 16]
}
fn sigma_v() -> f64 {
    1e-3
}
fn sigma_z() -> f64 {
    1e-1
}
fn ae_lr() -> f64 {
    1e-3
}
fn ae_iterations() -> usize {
    1500
}
fn fifty() -> usize {
    50
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        Self {
            latent_dim: None,
            channels: ae_channels(),
            sigma_v: sigma_v(),
            sigma_z: sigma_z(),
            lr: ae_lr(),
            weight_decay: 0.0,
            iterations: ae_iterations(),
            batch_size: fifty(),
        }
    }
}

impl AutoencoderSection {
    pub fn resolve(&self, input_dim: usize) -> AutoencoderConfig {
        AutoencoderConfig {
            input_dim,
            latent_dim: self.latent_dim.unwrap_or_else(|| default_latent_dim(input_dim)),
            channels: self.channels.clone(),
            sigma_v: self.sigma_v,
            sigma_z: self.sigma_z,
            lr: self.lr,
            weight_decay: self.weight_decay,
            iterations: self.iterations,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    #[serde(default = "diff_steps")]
    pub steps: usize,
    #[serde(default = "beta_1")]
    pub beta_1: f64,
    #[serde(default = "beta_t")]
    pub beta_t: f64,
    #[serde(default = "diff_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "time_dim")]
    pub time_dim: usize,
    #[serde(default = "diff_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "diff_iterations")]
    pub iterations: usize,
    #[serde(default = "fifty")]
    pub batch_size: usize,
    /// Standardize latent codes per coordinate before diffusion.
    #[serde(default = "yes")]
    pub standardize_latents: bool,
    /// Keep the implied clean latent inside the range of the training
    /// latents at every reverse step.
    #[serde(default = "yes")]
    pub clip_samples: bool,
}

fn yes() -> bool {
    true
}
fn diff_steps() -> usize {
    DEFAULT_STEPS
}
fn beta_1() -> f64 {
    DEFAULT_BETA_1
}
fn beta_t() -> f64 {
    DEFAULT_BETA_T
}
fn diff_channels() -> Vec<usize> {
    DenoiserConfig::for_latent(1).channels
}
fn time_dim() -> usize {
    64
}
fn diff_lr() -> f64 {
    DenoiserConfig::for_latent(1).lr
}
fn diff_iterations() -> usize {
    DenoiserConfig::for_latent(1).iterations
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: diff_steps(),
            beta_1: beta_1(),
            beta_t: beta_t(),
            channels: diff_channels(),
            time_dim: time_dim(),
            lr: diff_lr(),
            weight_decay: 0.0,
            iterations: diff_iterations(),
            batch_size: fifty(),
            standardize_latents: true,
            clip_samples: true,
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_1, self.beta_t)
    }

    pub fn resolve(&self, latent_dim: usize) -> DenoiserConfig {
        DenoiserConfig {
            latent_dim,
            channels: self.channels.clone(),
            time_dim: self.time_dim,
            lr: self.lr,
            weight_decay: self.weight_decay,
            iterations: self.iterations,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "n_generated")]
    pub n_generated: usize,
    #[serde(default = "noise_scales")]
    pub noise_scales: Vec<f64>,
    #[serde(default = "noise_draws")]
    pub noise_draws: usize,
    #[serde(default)]
    pub noise_mode: NoiseScaleMode,
    /// Number of generated chains whose trajectories are decoded and scored.
    #[serde(default)]
    pub trajectory_samples: usize,
    #[serde(default = "snapshots")]
    pub trajectory_snapshots: usize,
    /// Reverse chains evaluated together in one batch.
    #[serde(default = "fifty")]
    pub sample_batch: usize,
}

fn n_generated() -> usize {
    200
}
fn noise_scales() -> Vec<f64> {
    vec![0.001, 0.05, 0.15]
}
fn noise_draws() -> usize {
    20
}
fn snapshots() -> usize {
    10
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_generated: n_generated(),
            noise_scales: noise_scales(),
            noise_draws: noise_draws(),
            noise_mode: NoiseScaleMode::default(),
            trajectory_samples: 0,
            trajectory_snapshots: snapshots(),
            sample_batch: fifty(),
        }
    }
}

/// Everything needed to run one experiment end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Run directory used when none is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "full_selector")]
    pub selector: SelectorSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub autoencoder: AutoencoderSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn full_selector() -> SelectorSpec {
    SelectorSpec::full()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            selector: full_selector(),
            train: TrainSection::default(),
            autoencoder: AutoencoderSection::default(),
            diffusion: DiffusionSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Per-stage seeds, all derived from the global seed by label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub task: u64,
    pub init: u64,
    pub train: u64,
    pub autoencoder_init: u64,
    pub autoencoder: u64,
    pub denoiser_init: u64,
    pub denoiser: u64,
    pub sampling: u64,
    pub noise_baseline: u64,
}

impl ExperimentConfig {
    pub fn seeds(&self) -> StageSeeds {
        let d = |l: &str| derive_seed(self.seed, l);
        StageSeeds {
            task: self.task.seed.unwrap_or_else(|| d("task")),
            init: d("init"),
            train: d("train"),
            autoencoder_init: d("autoencoder-init"),
            autoencoder: d("autoencoder"),
            denoiser_init: d("denoiser-init"),
            denoiser: d("denoiser"),
            sampling: d("sampling"),
            noise_baseline: d("noise-baseline"),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.task.kind.clone(),
            n_samples: self.task.n_samples,
            n_classes: self.task.n_classes,
            val_fraction: self.task.val_fraction,
            seed: self.seeds().task,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let input = self.dataset_spec().input_shape();
        let nc = self.task.n_classes;
        match self.model.architecture {
            Architecture::MlpMiniS => {
                if input.len() != 1 {
                    return Err(Error::Config(format!("mlp-mini-s needs vector inputs, task gives {input:?}")));
                }
                let mut dims = vec![input[0]];
                dims.extend(&self.model.hidden);
                dims.push(nc);
                Ok(ModelSpec::mlp_mini_s(&dims))
            }
            Architecture::ConvnetMiniS => match input[..] {
                [c, h, w] => Ok(ModelSpec::convnet_mini_s([c, h, w], nc)),
                _ => Err(Error::Config(format!("convnet-mini-s needs image inputs, task gives {input:?}"))),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let data = self.dataset_spec();
        data.validate()?;
        self.model_spec()?.validate()?;
        self.train.resolve(0).validate(data.split_sizes().0)?;
        let ae = self.autoencoder.resolve(1);
        ae.validate()?;
        if self.autoencoder.latent_dim == Some(0) {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        self.diffusion.schedule()?;
        self.diffusion.resolve(1).validate()?;
        if self.eval.noise_scales.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if self.eval.sample_batch == 0 {
            return Err(Error::Config("sample_batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// A config together with the exact text it was read from.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub source: String,
    /// Seed given on the command line, replacing `config.seed`.
    pub seed_override: Option<u64>,
}

impl Experiment {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(Self {
            config,
            source: text.to_string(),
            seed_override: None,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Wraps a programmatic config; the snapshot is its TOML serialisation.
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let source = config.to_toml()?;
        Ok(Self {
            config,
            source,
            seed_override: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self.seed_override = Some(seed);
        self
    }

    pub fn source_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.source.as_bytes()))
    }
}
